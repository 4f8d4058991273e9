import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_dataset
from trclab.backbones import task_loss
from trclab.data import Task
from trclab.diagnostics import GradNormTable, effective_rank, entropy_of_spectrum, per_sample_grad_norms, sve
from trclab.ndiff import Linear, NonFiniteError


def _with_singular_values(sigma, n=12, seed=0):
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.normal(size=(n, len(sigma))))
    V, _ = np.linalg.qr(rng.normal(size=(len(sigma), len(sigma))))
    return U @ np.diag(sigma) @ V.T


def test_equal_singular_values():
    rep = sve(_with_singular_values([2.0, 2.0, 2.0, 2.0]))
    assert rep.sve == pytest.approx(np.log(4), abs=1e-9)
    assert rep.effective_rank == pytest.approx(4.0)


def test_rank_one_matrix():
    Z = np.outer(np.arange(1, 9), np.arange(1, 6))
    rep = sve(Z)
    assert rep.sve < 1e-9 and rep.effective_rank == pytest.approx(1.0)


def test_two_one_one_spectrum():
    p = np.array([2.0, 1.0, 1.0]) / 4.0
    expected = -np.sum(p * np.log(p))
    assert expected == pytest.approx(1.03972, abs=1e-5)
    assert sve(_with_singular_values([2.0, 1.0, 1.0])).sve == pytest.approx(expected, abs=1e-9)
    assert entropy_of_spectrum(np.array([2.0, 1.0, 1.0])) == pytest.approx(expected, abs=1e-15)


def test_zero_matrix_and_non_finite():
    rep = sve(np.zeros((4, 3)))
    assert rep.sve == 0.0 and rep.effective_rank == 0.0
    with pytest.raises(NonFiniteError):
        sve(np.array([[np.nan, 1.0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_sve_scale_invariant_and_bounded(seed, c):
    Z = np.random.default_rng(seed).normal(size=(10, 5))
    a, b = sve(Z), sve(c * Z)
    assert abs(a.sve - b.sve) < 1e-12
    assert 0.0 <= a.sve <= np.log(5) + 1e-12
    assert 1.0 <= effective_rank(Z) <= 5.0 + 1e-9


# ------------------------------------------------------------- grad norms

class ScalarModel:
    """y_hat = w * x with w the only representation parameter."""

    def __init__(self, w):
        self.task = Task("regression")
        self.lin = Linear(1, 1)
        self.lin.W.value[...] = w
        self._params = [self.lin.W]

    def feature_params(self):
        return self._params

    def forward(self, X):
        return self.lin.forward(X)

    def backward(self, g):
        self.lin.backward(g)

    def zero_grad(self):
        for p in self.lin.params():
            p.zero_grad()


def test_scalar_model_norm():
    table = per_sample_grad_norms(ScalarModel(1.0), numeric_dataset([[2.0]], [1.0]))
    # |d/dw (w x - y)^2| = |2 (w x - y) x|
    assert table.norms[0] == pytest.approx(abs(2 * (1.0 * 2.0 - 1.0) * 2.0)) == 4.0


def test_stationary_sample_has_zero_norm_and_rank_one():
    table = per_sample_grad_norms(ScalarModel(1.0), numeric_dataset([[2.0], [3.0], [1.0]], [1.0, 3.0, 0.0]))
    assert table.norms[1] == 0.0 and table.ranks[1] == 1


def test_duplicate_rows_tie_break_by_index(trained_backbone):
    bb, _, split = trained_backbone
    ds = split.val.take(np.array([3, 3, 3, 0]))
    table = per_sample_grad_norms(bb, ds)
    assert table.norms[0] == table.norms[1] == table.norms[2]
    r = table.ranks[:3]
    assert list(r) == sorted(r) and r[2] - r[0] == 2


def test_grad_norms_leave_gradients_clean(trained_backbone):
    bb, _, split = trained_backbone
    before = bb.checksum()
    per_sample_grad_norms(bb, split.val.take(np.arange(10)))
    assert bb.checksum() == before
    assert all(not p.grad.any() for p in bb.params())


def test_grad_norm_matches_batch_of_one(trained_backbone):
    bb, _, split = trained_backbone
    ds = split.val.take(np.arange(4))
    table = per_sample_grad_norms(bb, ds, p=2, q=2)
    bb.zero_grad()
    _, g = task_loss(bb.forward(ds.X[2:3]), ds.y[2:3], bb.task)
    bb.backward(g)
    expected = sum(np.sum(p.grad**2) for p in bb.feature_params())
    bb.zero_grad()
    assert table.norms[2] == pytest.approx(expected, rel=1e-12)


def test_table_ranks_and_rows():
    t = GradNormTable.from_norms(np.array([0.3, 0.1, 0.3, 0.0]))
    assert list(t.ranks) == [3, 2, 4, 1]
    assert list(t.order) == [3, 1, 0, 2]
    assert t.to_csv_rows()[1] == (1, 0.1, 2)
