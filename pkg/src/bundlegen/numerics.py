"""Dense float64 arrays with reverse-mode gradients, numerically stable
softmax variants, incremental Cholesky log-determinants, and a central
finite-difference gradient checker.

Everything runs on numpy with a fixed summation order, so seeded runs are
bit-reproducible. Inference code wraps calls in `no_grad()` to skip graph
construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular


class AllMasked(ValueError):
    """Every masked-softmax entry was suppressed to probability zero."""


class SingularKernel(ValueError):
    """Cholesky pivot stayed non-positive even after jitter."""


# ---------------------------------------------------------------------------
# reverse-mode autodiff on numpy arrays
# ---------------------------------------------------------------------------

_GRAD_ENABLED = True


class no_grad:
    """Context manager: ops performed inside do not record the graph."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A numpy array with an optional gradient and backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped as non-recorded tensors
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_coerce(other), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other), mul(self, -1.0))


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires)
    if requires:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor):
    """Reverse accumulation from a scalar loss. Visits each recorded node
    exactly once, in reverse topological order."""
    if loss.data.ndim != 0:
        raise ValueError("backward expects a scalar")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)
            # free graph references as we go; grads stay on leaves
            node._backward_fn = None
            node._parents = ()


def zero_grads(params):
    for p in params:
        p.grad = None


# -- primitive ops ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data * b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bw)


def _parse_spec(spec: str):
    lhs, out = spec.split("->")
    sa, sb = lhs.split(",")
    return sa, sb, out


def einsum2(spec: str, a, b) -> Tensor:
    """Two-operand einsum whose adjoint is again an einsum.

    Requires every index to appear at most once per operand and each
    operand index to occur in the output or in the other operand, which
    holds for all contractions the model uses.
    """
    a, b = _coerce(a), _coerce(b)
    sa, sb, out = _parse_spec(spec)
    out_data = np.einsum(spec, a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, np.einsum(f"{out},{sb}->{sa}", g, b.data))
        if b.requires_grad:
            _accumulate(b, np.einsum(f"{out},{sa}->{sb}", g, a.data))

    return _make(out_data, (a, b), bw)


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows `table[idx]`; backward scatter-adds into the table."""
    idx = np.asarray(idx, dtype=np.intp)
    out_data = table.data[idx]

    def bw(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            _accumulate(table, gt)

    return _make(out_data, (table,), bw)


def gather_cols(x: Tensor, idx) -> Tensor:
    """Pick one column per row of a 2-D tensor: out[i] = x[i, idx[i]]."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(x.data.shape[0])
    out_data = x.data[rows, idx]

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[rows, idx] = g
            _accumulate(x, gx)

    return _make(out_data, (x,), bw)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _make(out_data, tuple(tensors), bw)


def tanh(x) -> Tensor:
    x = _coerce(x)
    out_data = np.tanh(x.data)

    def bw(g):
        _accumulate(x, g * (1.0 - out_data * out_data))

    return _make(out_data, (x,), bw)


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    out_data = _sigmoid_np(x.data)

    def bw(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), bw)


def relu(x) -> Tensor:
    x = _coerce(x)
    out_data = np.maximum(x.data, 0.0)

    def bw(g):
        _accumulate(x, g * (x.data > 0.0))

    return _make(out_data, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _coerce(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def bw(g):
        _accumulate(x, g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (x,), bw)


def softmaxt(x, axis: int = -1) -> Tensor:
    x = _coerce(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(x, out_data * (g - dot))

    return _make(out_data, (x,), bw)


def sumt(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return _make(out_data, (x,), bw)


def maxt(x, axis: int) -> Tensor:
    """Max along one axis; gradient flows to the first argmax position."""
    x = _coerce(x)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out_data = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        _accumulate(x, gx)

    return _make(out_data, (x,), bw)


def reshape(x, shape) -> Tensor:
    x = _coerce(x)
    out_data = x.data.reshape(shape)

    def bw(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(out_data, (x,), bw)


def index_last(x, j: int) -> Tensor:
    """Select one fixed index along the last axis."""
    x = _coerce(x)
    out_data = x.data[..., j]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., j] = g
        _accumulate(x, gx)

    return _make(out_data, (x,), bw)


def unfold_windows(x, w: int) -> Tensor:
    """All length-w windows of a (B, L, D) tensor: out (B, L-w+1, w, D).

    Used by the convolutional encoder; requires L >= w.
    """
    x = _coerce(x)
    B, L, D = x.data.shape
    if L < w:
        raise ValueError(f"sequence length {L} shorter than window {w}")
    view = np.lib.stride_tricks.sliding_window_view(x.data, w, axis=1)
    out_data = np.ascontiguousarray(view.transpose(0, 1, 3, 2))

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for j in range(w):
                gx[:, j : L - w + 1 + j] += g[:, :, j, :]
            _accumulate(x, gx)

    return _make(out_data, (x,), bw)


# ---------------------------------------------------------------------------
# stable softmax variants (plain numpy; used by inference and unit tests)
# ---------------------------------------------------------------------------


def _sigmoid_np(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(h, weights) -> np.ndarray:
    """Probabilities proportional to exp(h . w_j) over the weight rows,
    computed with max-subtraction."""
    z = np.asarray(weights, dtype=np.float64) @ np.asarray(h, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def masked_softmax(h, weights, mask) -> np.ndarray:
    """Probabilities proportional to exp(h . e_j - m_j).

    An infinite mask entry forces probability exactly zero; if every entry
    is suppressed the distribution is undefined and AllMasked is raised.
    """
    z = np.asarray(weights, dtype=np.float64) @ np.asarray(h, dtype=np.float64)
    z = z - np.asarray(mask, dtype=np.float64)
    finite = np.isfinite(z)
    if not finite.any():
        raise AllMasked("all masked-softmax entries are suppressed")
    out = np.zeros_like(z)
    zf = z[finite]
    e = np.exp(zf - zf.max())
    out[finite] = e / e.sum()
    return out


def masked_log_probs(logits, mask) -> np.ndarray:
    """Row-wise log of the masked softmax for (B, n) logits and masks.

    Fully suppressed columns come back as -inf; a fully suppressed row
    raises AllMasked.
    """
    z = np.asarray(logits, dtype=np.float64) - np.asarray(mask, dtype=np.float64)
    finite = np.isfinite(z)
    if (~finite.any(axis=-1)).any():
        raise AllMasked("a row has every entry suppressed")
    mx = np.where(finite, z, -np.inf).max(axis=-1, keepdims=True)
    shifted = np.where(finite, z - mx, -np.inf)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return np.where(finite, shifted - lse, -np.inf)


# ---------------------------------------------------------------------------
# incremental Cholesky log-determinant
# ---------------------------------------------------------------------------

DEFAULT_JITTER = 1e-9


@dataclass(frozen=True)
class CholeskyState:
    """Lower-triangular factor of the selected similarity submatrix and its
    running log-determinant. `jittered` records that some pivot needed the
    diagonal nudge (the extended matrix was numerically singular)."""

    chol: np.ndarray
    log_det: float
    jittered: bool = False

    @property
    def size(self) -> int:
        return self.chol.shape[0]


def empty_cholesky() -> CholeskyState:
    return CholeskyState(np.zeros((0, 0)), 0.0, False)


def logdet_extend(
    state: CholeskyState, new_row, diag: float, jitter: float = DEFAULT_JITTER
) -> tuple[CholeskyState, float]:
    """Extend the factor by one symmetric row/column and return the new
    state with the extended log-determinant.

    A Schur complement at or below `jitter` gets `jitter` added to the
    diagonal and the result is flagged; a pivot still non-positive after
    that raises SingularKernel.
    """
    k = state.size
    new_row = np.asarray(new_row, dtype=np.float64)
    if new_row.shape != (k,):
        raise ValueError(f"expected extension row of length {k}, got {new_row.shape}")
    if k == 0:
        w = np.zeros(0)
    else:
        w = solve_triangular(state.chol, new_row, lower=True)
    schur = float(diag) - float(w @ w)
    jittered = state.jittered
    if schur <= jitter:
        schur += jitter
        jittered = True
    if schur <= 0.0:
        raise SingularKernel(f"non-positive pivot {schur:.3e} after jitter")
    piv = math.sqrt(schur)
    chol = np.zeros((k + 1, k + 1))
    chol[:k, :k] = state.chol
    chol[k, :k] = w
    chol[k, k] = piv
    log_det = state.log_det + math.log(schur)
    return CholeskyState(chol, log_det, jittered), log_det


# ---------------------------------------------------------------------------
# gradient checking and the optimizer
# ---------------------------------------------------------------------------


def grad_check(f, params, h: float = 1e-4) -> float:
    """Max relative error between tape gradients and central finite
    differences of the scalar `f(params)` over every parameter entry."""
    zero_grads(params)
    out = f(params)
    backward(out)
    tape_grads = [
        np.zeros_like(p.data) if p.grad is None else np.array(p.grad) for p in params
    ]
    worst = 0.0
    with no_grad():
        for p, g in zip(params, tape_grads):
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(params).data)
                flat[i] = orig - h
                fm = float(f(params).data)
                flat[i] = orig
                fd = (fp - fm) / (2.0 * h)
                err = abs(fd - gflat[i]) / (abs(fd) + abs(gflat[i]) + 1e-8)
                worst = max(worst, err)
    return worst


class Adam:
    """Standard Adam with bias correction; parameter order is fixed by
    sorted name so updates are deterministic."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(sorted(params.items()))
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * (p.grad * p.grad)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        zero_grads(self.params.values())
