"""Post-hoc correction of frozen backbone representations.

A corrector owns four trainable blocks on top of a frozen backbone:

* a shift estimator ``phi`` (D -> D MLP) whose output is subtracted from z,
* a coordinate estimator ``s`` (linear D -> T + softmax),
* an embedding matrix ``B`` (T x D) spanning the light embedding space,
* a freshly initialised prediction head.

``phi`` is supervised with simulated shifts built by perturbing the raw
features of the lowest-gradient-norm validation samples.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .backbones import (Backbone, FrozenError, TrainHP, TrainLog, evaluate, params_checksum,
                        run_epochs, task_loss)
from .data import Dataset, EmpiricalSampler, Preprocessor, Split, Task
from .diagnostics import GradNormTable, per_sample_grad_norms
from .ndiff import AdamW, Linear, Param, Sequential, Softmax, mlp

log = logging.getLogger(__name__)

ORTH_EPS = 1e-12


@dataclass(frozen=True)
class TrcHP:
    tau: float = 0.01
    M: int = 3
    eta_range: tuple[float, float] = (0.1, 0.3)
    T: int = 10
    orth_weight: float = 1.0
    mask_means_keep: bool = True
    opt_source: str = "val"
    regen_shifts: bool = False
    lr: float = 1e-4
    wd: float = 1e-5
    batch: int = 128
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    # ablation switches: re-estimation, space compression, diversified embeddings
    use_tr: bool = True
    use_sc: bool = True
    use_de: bool = True

    def __post_init__(self):
        if self.tau <= 0 or self.tau > 1:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if self.M < 1 or self.T < 1:
            raise ValueError("M and T must be positive")
        lo, hi = self.eta_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"invalid eta range {self.eta_range}")
        if self.opt_source not in ("val", "train-slice"):
            raise ValueError(f"unknown optimal-set source {self.opt_source!r}")

    @property
    def train_hp(self) -> TrainHP:
        return TrainHP(self.lr, self.wd, self.batch, self.patience, self.max_epochs)


VARIANT_SWITCHES = {
    "trc": dict(use_tr=True, use_sc=True, use_de=True),
    "tr_only": dict(use_tr=True, use_sc=False, use_de=False),
    "sc_only": dict(use_tr=False, use_sc=True, use_de=False),
    "tr_sc": dict(use_tr=True, use_sc=True, use_de=False),
    "sc_de": dict(use_tr=False, use_sc=True, use_de=True),
}


def variant_hp(hp: TrcHP, variant: str) -> TrcHP:
    return replace(hp, **VARIANT_SWITCHES[variant])


# ---------------------------------------------------------- optimal set

@dataclass(frozen=True)
class OptimalSet:
    indices: np.ndarray
    Z: np.ndarray
    X: np.ndarray

    @property
    def K(self) -> int:
        return len(self.indices)


def optimal_set_size(n: int, tau: float) -> int:
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return max(1, int(np.floor(tau * n + 1e-9)))


def select_optimal_set(table: GradNormTable, source: Dataset, bb: Backbone, tau: float = 0.01) -> OptimalSet:
    """The K = max(1, floor(tau * n)) samples with the lowest gradient-norm ranks."""
    K = optimal_set_size(len(source), tau)
    idx = np.sort(np.flatnonzero(table.ranks <= K))
    X = np.array(source.X[idx])
    return OptimalSet(idx, bb.represent(X), X)


# -------------------------------------------------------- simulated shifts

@dataclass(frozen=True)
class SimulatedShiftSet:
    z_tilde: np.ndarray  # (n, D)
    delta: np.ndarray  # (n, D)
    x_tilde: np.ndarray  # (n, d) perturbed rows
    source: np.ndarray  # (n,) index into the optimal set
    clean: np.ndarray  # (n,) bool, True for the (z_k, 0) pairs

    def __len__(self) -> int:
        return self.z_tilde.shape[0]


def perturb(x: np.ndarray, mask: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """mask * x + (1 - mask) * eps; mask == 1 keeps the observed value."""
    return mask * x + (1 - mask) * eps


def draw_masks(d: int, M: int, keep_prob: float, rng: np.random.Generator, max_tries: int = 100) -> np.ndarray:
    masks: list[np.ndarray] = []
    seen: set[bytes] = set()
    for _ in range(M):
        for _ in range(max_tries):
            m = (rng.random(d) < keep_prob).astype(np.float64)
            if m.tobytes() not in seen:
                break
        else:
            log.warning("could not draw %d distinct masks over %d features; keeping a duplicate", M, d)
        seen.add(m.tobytes())
        masks.append(m)
    return np.array(masks)


def generate_simulated_shifts(opt: OptimalSet, sampler: EmpiricalSampler, bb: Backbone, M: int = 3,
                              eta_range: Sequence[float] = (0.1, 0.3), rng: np.random.Generator | None = None,
                              mask_means_keep: bool = True) -> SimulatedShiftSet:
    if M < 1:
        raise ValueError("M must be at least 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    d = opt.X.shape[1]
    rows, srcs = [], []
    for k in range(opt.K):
        eta = rng.uniform(eta_range[0], eta_range[1])
        keep = eta if mask_means_keep else 1.0 - eta
        masks = draw_masks(d, M, keep, rng)
        eps = sampler.sample_rows(1, rng)[0]
        for m in masks:
            rows.append(perturb(opt.X[k], m, eps))
            srcs.append(k)
    x_tilde = np.vstack(rows + [opt.X])
    source = np.array(srcs + list(range(opt.K)))
    clean = np.r_[np.zeros(len(srcs), bool), np.ones(opt.K, bool)]
    z_tilde = bb.represent(x_tilde)
    delta = z_tilde - opt.Z[source]
    delta[clean] = 0.0
    return SimulatedShiftSet(z_tilde, delta, x_tilde, source, clean)


# ------------------------------------------------------------------ losses

def orthogonality_loss(B: np.ndarray) -> tuple[float, np.ndarray]:
    """||A||_1 / ||A||_2^2 + (||A||_1 - T)^2 with A_ij = |cos(b_i, b_j)|, and dL/dB."""
    B = np.asarray(B, dtype=np.float64)
    T = B.shape[0]
    norms = np.sqrt(np.sum(B**2, axis=1))
    denom = np.maximum(np.outer(norms, norms), ORTH_EPS)
    C = (B @ B.T) / denom
    A = np.abs(C)
    s1 = A.sum()
    s2 = np.sum(A**2)
    loss = s1 / s2 + (s1 - T) ** 2
    dA = 1.0 / s2 - 2.0 * s1 * A / s2**2 + 2.0 * (s1 - T)
    G = dA * np.sign(C)
    np.fill_diagonal(G, 0.0)
    # d C_ij / d b_i = b_j / (n_i n_j) - C_ij b_i / n_i^2 ; G is symmetric
    inv_n2 = 1.0 / np.maximum(norms**2, ORTH_EPS)
    grad = 2.0 * ((G / denom) @ B - (np.sum(G * C, axis=1) * inv_n2)[:, None] * B)
    return float(loss), grad


def mean_abs_offdiag_cos(B: np.ndarray) -> float:
    B = np.asarray(B, dtype=np.float64)
    norms = np.sqrt(np.sum(B**2, axis=1))
    C = np.abs((B @ B.T) / np.maximum(np.outer(norms, norms), ORTH_EPS))
    T = B.shape[0]
    return float((C.sum() - np.trace(C)) / (T * (T - 1))) if T > 1 else 0.0


# --------------------------------------------------------------- corrector

class TrcCorrector:
    def __init__(self, D: int, task: Task, T: int = 10, seed: int = 0, use_tr: bool = True, use_sc: bool = True):
        rng = np.random.default_rng([seed, 303])
        self.D, self.task, self.T = D, task, T
        self.use_tr, self.use_sc = use_tr, use_sc
        self.phi = mlp([D, D, D], rng, name="phi") if use_tr else None
        if use_sc:
            self.s = Sequential([Linear(D, T, rng, name="coord"), Softmax()], name="coord")
            bound = 1.0 / np.sqrt(D)
            self.B = Param(rng.uniform(-bound, bound, size=(T, D)), "B")
        else:
            self.s, self.B = None, None
        self.head = Sequential([Linear(D, task.n_outputs, rng, name="trc_head")], name="trc_head")
        self.backbone_checksum: str | None = None
        self._r = None

    # parameter groups
    def phi_params(self) -> list[Param]:
        return self.phi.params() if self.phi is not None else []

    def params(self) -> list[Param]:
        ps = self.phi_params()
        if self.use_sc:
            ps = ps + self.s.params() + [self.B]
        return ps + self.head.params()

    def checksum(self) -> str:
        return params_checksum(self.params())

    def state(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.params()]

    def load_state(self, values) -> None:
        params = self.params()
        if len(values) != len(params):
            raise ValueError("parameter count mismatch")
        for p, v in zip(params, values):
            p.value[...] = np.asarray(v, dtype=np.float64).reshape(p.value.shape)

    # passes
    def shift(self, z: np.ndarray) -> np.ndarray:
        if self.phi is None:
            return np.zeros_like(z)
        return self.phi.forward(z)

    def reestimate(self, z: np.ndarray) -> np.ndarray:
        return re_estimate(self.phi, z) if self.phi is not None else np.asarray(z, dtype=np.float64)

    def coordinates(self, phiz: np.ndarray) -> np.ndarray:
        return coordinates(self.s, phiz)

    def corrected(self, z: np.ndarray) -> np.ndarray:
        """Representation fed to the head: r B, or Phi(z) when mapping is off."""
        phiz = self.reestimate(z)
        if not self.use_sc:
            return phiz
        self._r = self.coordinates(phiz)
        return map_to_le_space(self._r, self.B.value)

    def forward(self, z: np.ndarray) -> np.ndarray:
        return self.head.forward(self.corrected(z))

    def backward(self, grad_out: np.ndarray) -> None:
        g = self.head.backward(grad_out)
        if self.use_sc:
            self.B.grad += self._r.T @ g
            g = self.s.backward(g @ self.B.value.T)
        if self.phi is not None:
            self.phi.backward(-g)


def re_estimate(phi: Sequential, Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    out = phi.forward(Z)
    if out.shape != Z.shape:
        raise ValueError(f"shift estimator maps {Z.shape} to {out.shape}")
    return Z - out


def coordinates(s: Sequential, phiz: np.ndarray) -> np.ndarray:
    return s.forward(phiz)


def map_to_le_space(R: np.ndarray, B: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if R.ndim != 2 or B.ndim != 2 or R.shape[1] != B.shape[0]:
        raise ValueError(f"cannot combine coordinates {R.shape} with embeddings {B.shape}")
    return R @ B


def shift_loss(phi: Sequential, shifts: SimulatedShiftSet, idx: np.ndarray | None = None,
               backward: bool = True) -> float:
    """Mean over entries of ||phi(z~) - delta||^2; accumulates phi gradients."""
    if len(shifts) == 0:
        raise ValueError("empty simulated shift set")
    zt = shifts.z_tilde if idx is None else shifts.z_tilde[idx]
    dl = shifts.delta if idx is None else shifts.delta[idx]
    out = phi.forward(zt)
    if out.shape != dl.shape:
        raise ValueError(f"shift estimator output {out.shape} vs targets {dl.shape}")
    diff = out - dl
    n = diff.shape[0]
    if backward:
        phi.backward(2.0 * diff / n)
    return float(np.sum(diff**2) / n)


def prediction_loss(corrector: TrcCorrector, z: np.ndarray, y: np.ndarray, backward: bool = True) -> float:
    """Task loss of head(r B) on frozen representations z."""
    out = corrector.forward(z)
    loss, grad = task_loss(out, y, corrector.task)
    if backward:
        corrector.backward(grad)
    return loss


# ---------------------------------------------------------------- training

@dataclass
class TrcArtifacts:
    grad_table: GradNormTable | None = None
    optimal: OptimalSet | None = None
    shifts: SimulatedShiftSet | None = None
    shift_loss: list[float] = field(default_factory=list)
    shift_baseline: float | None = None


def fit_shift_epoch(corrector: TrcCorrector, shifts: SimulatedShiftSet, opt: AdamW, batch: int,
                    rng: np.random.Generator) -> float:
    """One shuffled pass over the simulated set, updating phi only."""
    order = rng.permutation(len(shifts))
    total = 0.0
    for start in range(0, len(order), batch):
        idx = order[start:start + batch]
        total += shift_loss(corrector.phi, shifts, idx) * len(idx)
        opt.step()
    return total / len(order)


def train_trc(bb: Backbone, split: Split, hp: TrcHP = TrcHP(), label_pre: Preprocessor | None = None,
              sampler: EmpiricalSampler | None = None) -> tuple[TrcCorrector, TrainLog, TrcArtifacts]:
    if not bb.frozen:
        raise FrozenError("train_trc requires a frozen backbone")
    rng = np.random.default_rng([hp.seed, 404])
    sampler = sampler or EmpiricalSampler.from_dataset(split.train)
    art = TrcArtifacts()
    train = split.train

    if hp.use_tr:
        if hp.opt_source == "val":
            source = split.val
        else:
            n_slice = min(len(split.val), len(train) // 2)
            held = rng.permutation(len(train))
            source = train.take(np.sort(held[:n_slice]))
            train = train.take(np.sort(held[n_slice:]))
        art.grad_table = per_sample_grad_norms(bb, source)
        art.optimal = select_optimal_set(art.grad_table, source, bb, hp.tau)
        shift_rng = np.random.default_rng([hp.seed, 505])

        def make_shifts():
            return generate_simulated_shifts(art.optimal, sampler, bb, hp.M, hp.eta_range, shift_rng,
                                             hp.mask_means_keep)
        art.shifts = make_shifts()
        art.shift_baseline = float(np.mean(np.sum(art.shifts.delta**2, axis=1)))

    corrector = TrcCorrector(bb.width, bb.task, hp.T, hp.seed, hp.use_tr, hp.use_sc)
    corrector.backbone_checksum = bb.checksum()
    z_train = bb.represent(train.X)
    z_val = bb.represent(split.val.X)
    y_train = train.y
    opt_all = AdamW(corrector.params(), hp.lr, hp.wd)
    opt_phi = AdamW(corrector.phi_params(), hp.lr, hp.wd)
    orth_w = hp.orth_weight if (hp.use_sc and hp.use_de) else 0.0

    def shift_phase():
        if not hp.use_tr:
            return
        if hp.regen_shifts and art.shift_loss:
            art.shifts = make_shifts()
        art.shift_loss.append(fit_shift_epoch(corrector, art.shifts, opt_phi, hp.batch, rng))

    def step(idx):
        loss = prediction_loss(corrector, z_train[idx], y_train[idx])
        if orth_w:
            lo, g = orthogonality_loss(corrector.B.value)
            corrector.B.grad += orth_w * g
            loss += orth_w * lo
        opt_all.step()
        return loss

    def validate():
        return evaluate(corrector.forward(z_val), split.val.y, bb.task, label_pre)

    trlog = run_epochs(n_train=len(train), hp=hp.train_hp, rng=rng, task=bb.task, step=step,
                       validate=validate, snapshot=corrector.state, restore=corrector.load_state,
                       before_epoch=shift_phase)
    return corrector, trlog, art


def infer_trc(bb: Backbone, corrector: TrcCorrector, ds: Dataset) -> np.ndarray:
    if ds.schema.fingerprint() != bb.schema.fingerprint():
        raise ValueError("dataset schema does not match the backbone")
    return corrector.forward(bb.represent(ds.X))


def corrected_representations(bb: Backbone, corrector: TrcCorrector, ds: Dataset) -> np.ndarray:
    return corrector.corrected(bb.represent(ds.X))
