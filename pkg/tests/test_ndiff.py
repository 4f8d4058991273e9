import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trclab.ndiff import (AdamW, Embedding, Linear, NonFiniteError, Param, ReLU, Residual, Sequential,
                          Softmax, adamw_step, check_gradients, jacobi_eigh, kink_safe_rows, loss_cross_entropy,
                          loss_mse, mlp, singular_values)


def _linear(W, b):
    lin = Linear(len(W), len(W[0]))
    lin.W.value[...] = W
    lin.b.value[...] = b
    return lin


# ------------------------------------------------------------------ forward

def test_identity_linear_layer():
    x = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(_linear(np.eye(3), np.zeros(3)).forward(x), x)


def test_relu_definition():
    np.testing.assert_array_equal(ReLU().forward(np.array([[-1.0, 2.0]])), [[0.0, 2.0]])


def test_affine_arithmetic():
    assert _linear([[2.0]], [1.0]).forward(np.array([[3.0]]))[0, 0] == 7.0


def test_shape_mismatch_and_non_finite():
    lin = Linear(3, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        lin.forward(np.zeros((4, 2)))
    with pytest.raises(NonFiniteError):
        lin.forward(np.array([[np.inf, 0.0, 0.0]]))


def test_backward_before_forward_is_an_error():
    with pytest.raises(RuntimeError):
        Linear(2, 2).backward(np.zeros((1, 2)))


# ----------------------------------------------------------------- backward

def test_scalar_model_gradient():
    lin = _linear([[1.0]], [0.0])
    pred = lin.forward(np.array([[2.0]]))
    # d/dw (w x - y)^2 = 2 (w x - y) x
    lin.backward(2 * (pred - 1.0))
    assert lin.W.grad[0, 0] == 2 * (1.0 * 2.0 - 1.0) * 2.0 == 4.0


def test_zero_upstream_gives_zero_gradients():
    net = mlp([3, 4, 2], np.random.default_rng(0))
    net.forward(np.ones((2, 3)))
    net.backward(np.zeros((2, 2)))
    assert all(not p.grad.any() for p in net.params())


def test_two_backward_calls_double_gradients():
    net = mlp([3, 4, 2], np.random.default_rng(0))
    x, g = np.random.default_rng(1).normal(size=(5, 3)), np.random.default_rng(2).normal(size=(5, 2))
    net.forward(x)
    net.backward(g)
    once = [p.grad.copy() for p in net.params()]
    net.backward(g)
    for a, p in zip(once, net.params()):
        np.testing.assert_array_equal(p.grad, 2 * a)


# ------------------------------------------------------------------- losses

def test_mse_cases():
    p = np.array([[1.0], [2.0]])
    assert loss_mse(p, p)[0] == 0.0
    assert loss_mse(p + 3.0, p)[0] == pytest.approx(9.0)
    loss, grad = loss_mse(np.array([[0.0], [2.0]]), np.zeros((2, 1)))
    assert loss == (0 + 4) / 2
    np.testing.assert_allclose(grad, [[0.0], [2.0]])


def test_cross_entropy_cases():
    assert loss_cross_entropy(np.zeros((3, 4)), np.array([0, 1, 2]))[0] == pytest.approx(np.log(4))
    logits = np.array([[20.0, 0.0]])
    assert loss_cross_entropy(logits, np.array([0]))[0] < 1e-8
    loss, grad = loss_cross_entropy(np.zeros((2, 2)), np.array([0, 0]))
    assert loss == pytest.approx(np.log(2))
    np.testing.assert_allclose(grad, [[-0.25, 0.25], [-0.25, 0.25]])


def test_cross_entropy_is_stable_for_huge_logits():
    loss, grad = loss_cross_entropy(np.array([[1e4, -1e4]]), np.array([1]))
    assert np.isfinite(loss) and np.isfinite(grad).all()
    assert loss == pytest.approx(2e4)


# ------------------------------------------------------------------- AdamW

def test_pure_decoupled_decay():
    p = Param(np.array([1.0]))
    adamw_step([p], lr=0.1, wd=0.5)
    assert p.value[0] == pytest.approx(0.95)


def test_constant_gradient_moves_by_lr_per_step():
    p = Param(np.array([0.0]))
    opt = AdamW([p], lr=0.01, wd=0.0)
    prev = p.value.copy()
    for _ in range(200):
        p.grad[...] = 3.0
        opt.step()
        assert p.value[0] < prev[0]
        # bias-corrected moments equal (g, g^2) exactly, so the step is lr * g / (|g| + eps)
        assert prev[0] - p.value[0] == pytest.approx(0.01, rel=1e-6)
        prev = p.value.copy()


def test_identical_models_update_identically_and_grads_reset():
    a, b = (mlp([4, 3, 1], np.random.default_rng(5)) for _ in range(2))
    g = np.random.default_rng(6).normal(size=(7, 1))
    x = np.random.default_rng(7).normal(size=(7, 4))
    for net in (a, b):
        net.forward(x)
        net.backward(g)
        AdamW(net.params(), 1e-3, 1e-5).step()
    for pa, pb in zip(a.params(), b.params()):
        assert pa.value.tobytes() == pb.value.tobytes()
        assert not pa.grad.any()


# ----------------------------------------------------------------- spectral

def test_singular_values_small_cases():
    np.testing.assert_allclose(singular_values(np.eye(2)), [1.0, 1.0], atol=1e-14)
    np.testing.assert_allclose(singular_values(np.diag([3.0, 4.0])), [4.0, 3.0], atol=1e-14)


def test_frobenius_identity():
    Z = np.random.default_rng(0).normal(size=(50, 8))
    s = singular_values(Z)
    assert abs(np.sum(s**2) - np.sum(Z**2)) / np.sum(Z**2) < 1e-8


def test_rank_deficient_gets_exact_zeros():
    Z = np.random.default_rng(1).normal(size=(30, 3)) @ np.random.default_rng(2).normal(size=(3, 10))
    s = singular_values(Z)
    assert np.count_nonzero(s) == 3


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 6)),
              elements=st.floats(-100, 100, allow_nan=False, width=64)))
def test_singular_values_match_reference(Z):
    ours = singular_values(Z)
    ref = np.zeros(Z.shape[1])
    sv = np.linalg.svd(Z, compute_uv=False)
    ref[:len(sv)] = sv
    scale = max(1.0, ref.max(initial=0.0))
    assert ours.shape == (Z.shape[1],)
    assert np.all(np.diff(ours) <= 0) and np.all(ours >= 0)
    np.testing.assert_allclose(ours, ref, atol=1e-6 * scale)


def test_jacobi_eigenvalues():
    A = np.random.default_rng(3).normal(size=(6, 6))
    S = A + A.T
    np.testing.assert_allclose(np.sort(jacobi_eigh(S)), np.linalg.eigvalsh(S), atol=1e-10)


# --------------------------------------------------------------- grad check

def _analytic(net, x, target):
    for p in net.params():
        p.zero_grad()
    loss, g = loss_mse(net.forward(x), target)
    net.backward(g)
    return [p.grad.copy() for p in net.params()]


def test_linear_mse_gradient_check():
    rng = np.random.default_rng(0)
    net = Sequential([Linear(4, 1, rng)])
    x, t = rng.normal(size=(8, 4)), rng.normal(size=(8, 1))
    ana = _analytic(net, x, t)
    err = check_gradients(lambda: loss_mse(net.forward(x), t)[0], net.params(), ana)
    assert err < 1e-6


def test_relu_network_gradient_check_away_from_kinks():
    rng = np.random.default_rng(1)
    net = Sequential([Linear(5, 8, rng), ReLU(), Residual(Sequential([Linear(8, 8, rng), ReLU()])),
                      Linear(8, 3, rng), Softmax(), Linear(3, 1, rng)])
    x, t = rng.normal(size=(40, 5)), rng.normal(size=(40, 1))
    net.forward(x)
    keep = kink_safe_rows([net])
    x, t = x[keep], t[keep]
    assert len(x) > 10
    ana = _analytic(net, x, t)
    err = check_gradients(lambda: loss_mse(net.forward(x), t)[0], net.params(), ana)
    assert err < 1e-5


def test_embedding_gradient_check():
    rng = np.random.default_rng(2)
    emb, head = Embedding(4, 3, rng), Linear(3, 1, rng)
    codes = np.array([0, 1, 1, 3, 3, 3])
    t = rng.normal(size=(6, 1))

    def loss():
        return loss_mse(head.forward(emb.forward(codes)), t)[0]

    emb.table.zero_grad()
    _, g = loss_mse(head.forward(emb.forward(codes)), t)
    emb.backward(head.backward(g))
    assert check_gradients(loss, [emb.table], [emb.table.grad.copy()]) < 1e-6


def test_corrupted_gradient_is_detected():
    rng = np.random.default_rng(0)
    net = Sequential([Linear(4, 1, rng)])
    x, t = rng.normal(size=(8, 4)), rng.normal(size=(8, 1))
    ana = [2 * g for g in _analytic(net, x, t)]
    assert check_gradients(lambda: loss_mse(net.forward(x), t)[0], net.params(), ana) > 0.4
