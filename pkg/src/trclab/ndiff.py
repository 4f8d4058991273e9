"""Dense float64 building blocks with hand-written backward passes.

Every trainable piece of the library is a composition of the layers here.
Layers cache what they need during ``forward`` and accumulate parameter
gradients during ``backward``; ``AdamW.step`` consumes and zeroes them.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    pass


class Param:
    """A trainable block: value, gradient accumulator and AdamW moments."""

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = np.array(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape})"


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _check_finite(out: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite values produced by {where}")


class Layer:
    name = "layer"

    def __init__(self):
        self._cache = None

    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise RuntimeError(f"backward called on {self.name} before forward")
        return self._cache


class Linear(Layer):
    """y = x W + b with W of shape (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None, name: str = "linear"):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.name = name
        if rng is None:
            w = np.zeros((n_in, n_out))
            b = np.zeros((1, n_out))
        else:
            w = uniform_init(rng, n_in, (n_in, n_out))
            b = uniform_init(rng, n_in, (1, n_out))
        self.W = Param(w, f"{name}.W")
        self.b = Param(b, f"{name}.b")

    def params(self) -> list[Param]:
        return [self.W, self.b]

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"{self.name}: expected input with {self.n_in} columns, got shape {x.shape}")
        self._cache = x
        out = x @ self.W.value + self.b.value
        _check_finite(out, self.name)
        return out

    def backward(self, grad):
        x = self._cached()
        self.W.grad += x.T @ grad
        self.b.grad += grad.sum(axis=0, keepdims=True)
        return grad @ self.W.value.T


class ReLU(Layer):
    name = "relu"

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        self._cache = x
        return np.where(x > 0, x, 0.0)

    def backward(self, grad):
        return grad * (self._cached() > 0)


class Softmax(Layer):
    """Row-wise softmax, max-shifted for stability."""

    name = "softmax"

    def forward(self, x):
        y = softmax(np.asarray(x, dtype=DTYPE))
        self._cache = y
        return y

    def backward(self, grad):
        y = self._cached()
        return y * (grad - np.sum(grad * y, axis=1, keepdims=True))


class Residual(Layer):
    """h + inner(h); the inner stack must preserve width."""

    name = "residual"

    def __init__(self, inner: "Sequential"):
        super().__init__()
        self.inner = inner

    def params(self):
        return self.inner.params()

    def forward(self, x):
        out = x + self.inner.forward(x)
        self._cache = True
        return out

    def backward(self, grad):
        self._cached()
        return grad + self.inner.backward(grad)


class Embedding(Layer):
    """Lookup table for integer codes; input is a 1-D array of codes."""

    def __init__(self, cardinality: int, dim: int, rng: np.random.Generator | None = None, name: str = "embedding"):
        super().__init__()
        self.cardinality, self.dim = cardinality, dim
        self.name = name
        table = np.zeros((cardinality, dim)) if rng is None else rng.normal(0.0, 1.0 / np.sqrt(dim), size=(cardinality, dim))
        self.table = Param(table, f"{name}.table")

    def params(self):
        return [self.table]

    def forward(self, codes):
        codes = np.asarray(codes)
        idx = codes.astype(np.int64)
        if np.any(idx != codes) or np.any(idx < 0) or np.any(idx >= self.cardinality):
            raise ValueError(f"{self.name}: codes must be integers in [0, {self.cardinality})")
        self._cache = idx
        return self.table.value[idx]

    def backward(self, grad):
        idx = self._cached()
        np.add.at(self.table.grad, idx, grad)
        return None


class Sequential(Layer):
    name = "sequential"

    def __init__(self, layers: Sequence[Layer] = (), name: str = "sequential"):
        super().__init__()
        self.layers = list(layers)
        self.name = name

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x):
        out = np.asarray(x, dtype=DTYPE)
        for i, layer in enumerate(self.layers):
            try:
                out = layer.forward(out)
            except NonFiniteError as exc:
                raise NonFiniteError(f"{self.name}[{i}]: {exc}") from None
        self._cache = True
        return out

    def backward(self, grad):
        self._cached()
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


def mlp(sizes: Sequence[int], rng: np.random.Generator | None, final_relu: bool = False, name: str = "mlp") -> Sequential:
    """Linear/ReLU stack through ``sizes``; ReLU after the last layer only if asked."""
    layers: list[Layer] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Linear(a, b, rng, name=f"{name}.{i}"))
        if i < len(sizes) - 2 or final_relu:
            layers.append(ReLU())
    return Sequential(layers, name=name)


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


# --------------------------------------------------------------------- losses

def loss_mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if target.size != pred.size:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    target = target.reshape(pred.shape)
    diff = pred - target
    n = pred.shape[0]
    return float(np.sum(diff**2) / n), 2.0 * diff / n


def loss_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels).astype(np.int64).ravel()
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ValueError(f"{labels.shape[0]} labels for {n} rows")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ------------------------------------------------------------------ optimizer

class AdamW:
    """AdamW with decoupled decay applied before the moment update."""

    def __init__(self, params: Iterable[Param], lr: float = 1e-4, wd: float = 1e-5,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.wd = lr, wd
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self) -> None:
        for p in self.params:
            p.step += 1
            if self.wd:
                p.value -= self.lr * self.wd * p.value
            p.m = self.beta1 * p.m + (1 - self.beta1) * p.grad
            p.v = self.beta2 * p.v + (1 - self.beta2) * p.grad**2
            m_hat = p.m / (1 - self.beta1**p.step)
            v_hat = p.v / (1 - self.beta2**p.step)
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def adamw_step(params: Iterable[Param], lr: float, wd: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> None:
    AdamW(params, lr, wd, beta1, beta2, eps).step()


# ------------------------------------------------------------------- spectral

def jacobi_eigh(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations."""
    a = np.array(a, dtype=DTYPE)
    n = a.shape[0]
    if n == 1:
        return a.diagonal().copy()
    # work on a / max|a| so squared norms cannot overflow
    m = np.max(np.abs(a))
    if m == 0.0:
        return np.zeros(n)
    a /= m
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        scale = np.sqrt(np.sum(a**2))
        if off <= tol * scale or scale == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                g = 100.0 * abs(apq)
                if abs(a[p, p]) + g == abs(a[p, p]) and abs(a[q, q]) + g == abs(a[q, q]):
                    a[p, q] = a[q, p] = 0.0  # below the precision of both diagonal entries
                    continue
                h = a[q, q] - a[p, p]
                if abs(h) + g == abs(h):
                    t = apq / h  # tiny rotation; avoids overflowing h / apq
                else:
                    theta = 0.5 * h / apq
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
    return a.diagonal() * m


def singular_values(z: np.ndarray) -> np.ndarray:
    """Descending singular values from the Jacobi spectrum of the Gram matrix.

    Gram eigenvalues below ``max(N, D) * eps * lambda_max`` are rounding noise
    (squaring halves the usable precision) and are clamped to zero.
    """
    z = np.asarray(z, dtype=DTYPE)
    if z.ndim != 2 or min(z.shape) < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("singular_values: non-finite input")
    m = np.max(np.abs(z))
    if m == 0.0:
        return np.zeros(z.shape[1])
    z = z / m
    lam = jacobi_eigh(z.T @ z)
    lam_max = lam.max(initial=0.0)
    floor = max(z.shape) * np.finfo(DTYPE).eps * lam_max
    lam = np.where(lam > floor, lam, 0.0)
    return np.sort(np.sqrt(lam))[::-1] * m


# ------------------------------------------------------------ gradient check

def relu_inputs(layer: Layer) -> list[np.ndarray]:
    """Cached pre-activations of every ReLU under ``layer`` (after a forward)."""
    if isinstance(layer, ReLU):
        return [] if layer._cache is None else [layer._cache]
    if isinstance(layer, Sequential):
        return [a for sub in layer.layers for a in relu_inputs(sub)]
    if isinstance(layer, Residual):
        return relu_inputs(layer.inner)
    return []


def kink_safe_rows(stacks: Sequence[Layer], margin: float = 1e-3) -> np.ndarray:
    """Mask of batch rows whose ReLU pre-activations all sit at least ``margin`` from 0.

    Finite differences straddling a ReLU kink are meaningless, so gradient
    checks drop such rows.
    """
    keep = None
    for st in stacks:
        for pre in relu_inputs(st):
            ok = np.all(np.abs(pre) >= margin, axis=1)
            keep = ok if keep is None else keep & ok
    return keep

def check_gradients(loss_fn: Callable[[], tuple[float, None]] | Callable[[], float],
                    params: Sequence[Param], analytic: Sequence[np.ndarray], h: float = 1e-5,
                    max_entries: int = 10_000, rng: np.random.Generator | None = None) -> float:
    """Max relative error between ``analytic`` gradients and central differences.

    ``loss_fn`` evaluates the scalar loss at the current parameter values.
    When more than ``max_entries`` entries exist, a seeded random subset is
    checked.
    """
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.value.size)]
    if len(coords) > max_entries:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_entries, replace=False)
        coords = [coords[k] for k in pick]
    worst = 0.0
    for i, j in coords:
        flat = params[i].value.reshape(-1)
        old = flat[j]
        flat[j] = old + h
        lp = float(loss_fn())
        flat[j] = old - h
        lm = float(loss_fn())
        flat[j] = old
        num = (lp - lm) / (2 * h)
        ana = float(np.asarray(analytic[i]).reshape(-1)[j])
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
    return worst
