"""Representation diagnostics: singular value entropy and per-sample gradient norms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbones import Backbone, task_loss
from .data import Dataset
from .ndiff import NonFiniteError, singular_values


@dataclass(frozen=True)
class SpectrumReport:
    singular_values: np.ndarray
    sve: float
    effective_rank: float

    def to_dict(self) -> dict:
        return {"singular_values": self.singular_values.tolist(), "sve": self.sve,
                "effective_rank": self.effective_rank}


def entropy_of_spectrum(sigma: np.ndarray) -> float:
    """Natural-log entropy of sigma / sum(sigma); zero entries contribute nothing."""
    sigma = np.asarray(sigma, dtype=np.float64)
    total = sigma.sum()
    if total <= 0:
        return 0.0
    p = sigma[sigma > 0] / total
    return float(-np.sum(p * np.log(p)))


def sve(Z: np.ndarray) -> SpectrumReport:
    Z = np.asarray(Z, dtype=np.float64)
    if not np.all(np.isfinite(Z)):
        raise NonFiniteError("sve: non-finite input")
    sigma = singular_values(Z)
    if not np.any(sigma > 0):
        return SpectrumReport(sigma, 0.0, 0.0)
    h = entropy_of_spectrum(sigma)
    return SpectrumReport(sigma, h, float(np.exp(h)))


def effective_rank(Z: np.ndarray) -> float:
    return sve(Z).effective_rank


@dataclass(frozen=True)
class GradNormTable:
    norms: np.ndarray  # per sample, dataset order
    ranks: np.ndarray  # 1-based ascending rank per sample

    @property
    def order(self) -> np.ndarray:
        """Sample indices sorted by ascending norm (index tie-break)."""
        return np.argsort(self.ranks, kind="stable")

    @classmethod
    def from_norms(cls, norms: np.ndarray) -> "GradNormTable":
        norms = np.asarray(norms, dtype=np.float64)
        order = np.argsort(norms, kind="stable")
        ranks = np.empty(len(norms), dtype=np.int64)
        ranks[order] = np.arange(1, len(norms) + 1)
        return cls(norms, ranks)

    def to_csv_rows(self) -> list[tuple[int, float, int]]:
        return [(i, float(n), int(r)) for i, (n, r) in enumerate(zip(self.norms, self.ranks))]


def per_sample_grad_norms(bb: Backbone, ds: Dataset, p: float = 1.0, q: float = 1.0) -> GradNormTable:
    """||grad_{theta_f} loss(x_i, y_i)||_p^q for each sample, one sample at a time.

    Head gradients are computed along the way but left out of the norm. The
    backbone's gradient accumulators are used as scratch and left zeroed.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    feat = bb.feature_params()
    norms = np.empty(len(ds))
    bb.zero_grad()
    for i in range(len(ds)):
        out = bb.forward(ds.X[i:i + 1])
        _, grad = task_loss(out, ds.y[i:i + 1], bb.task)
        bb.backward(grad)
        s = sum(float(np.sum(np.abs(prm.grad) ** p)) for prm in feat)
        norms[i] = s ** (q / p)
        bb.zero_grad()
    return GradNormTable.from_norms(norms)
