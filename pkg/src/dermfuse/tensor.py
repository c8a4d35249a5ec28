"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward rule on the implicit tape
(the chain of parent links plus a monotonically increasing node id, so the
reverse sweep replays recorded operations in exact reverse order). The only
broadcast form supported anywhere is a trailing vector against leading axes,
e.g. (B, d) + (d,) or (B, T, d) * (d,); everything else is a ShapeError.
Channel bias for feature maps has its own dedicated op (bias_add_channel).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import GradCheckError, ShapeError

_node_ids = itertools.count()

# grad mode is per-thread: concurrent training runs each own a tape
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A numpy-backed float64 array that participates in autodiff.

    ``grad`` is accumulated additively by backward(); tensors with
    requires_grad=False never receive a gradient buffer.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            # own a writable copy; g may be a view into another buffer
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        """Reverse sweep from a scalar loss.

        Walks every recorded operation reachable from this tensor in exact
        reverse recording order (node ids are assigned monotonically, and an
        op's inputs always precede it).
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        nodes: dict[int, Tensor] = {}
        stack: list[Tensor] = [self]
        while stack:
            t = stack.pop()
            if t.node_id not in nodes:
                nodes[t.node_id] = t
                stack.extend(t._parents)
        self.grad = np.ones_like(self.data)
        for nid in sorted(nodes, reverse=True):
            t = nodes[nid]
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)


def _result(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    out = Tensor(data)
    if _grad_enabled():
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = parents
                out._backward = backward
                break
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    """'equal', 'b_vector' or 'a_vector'; anything else is rejected."""
    if a.shape == b.shape:
        return "equal"
    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        return "b_vector"
    if a.ndim == 1 and b.ndim >= 2 and b.shape[-1] == a.shape[0]:
        return "a_vector"
    raise ShapeError(
        f"unsupported broadcast between shapes {a.shape} and {b.shape}; "
        "only equal shapes or a trailing vector over leading axes are allowed"
    )


def _reduce_to_vector(g: np.ndarray, d: int) -> np.ndarray:
    return g.reshape(-1, d).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)
    out_data = a.data + b.data

    def backward(g: np.ndarray) -> None:
        if kind == "a_vector":
            a._accumulate(_reduce_to_vector(g, a.shape[0]))
        else:
            a._accumulate(g)
        if kind == "b_vector":
            b._accumulate(_reduce_to_vector(g, b.shape[0]))
        else:
            b._accumulate(g)

    return _result(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)
    out_data = a.data * b.data

    def backward(g: np.ndarray) -> None:
        ga = g * b.data
        gb = g * a.data
        a._accumulate(_reduce_to_vector(ga, a.shape[0]) if kind == "a_vector" else ga)
        b._accumulate(_reduce_to_vector(gb, b.shape[0]) if kind == "b_vector" else gb)

    return _result(out_data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * c)

    return _result(a.data * c, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # stable two-branch form, avoids exp overflow for |x| ~ 1e3
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * out_data * (1.0 - out_data))

    return _result(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * (1.0 - out_data * out_data))

    return _result(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * (a.data > 0.0))

    return _result(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# matmul and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported forms: (m,k)@(k,n); (...,m,k)@(k,n) with the right operand
    shared across leading axes; (...,m,k)@(...,k,n) with equal leading axes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} vs {b.shape}"
        )
    shared_rhs = b.ndim == 2 and a.ndim > 2
    if not shared_rhs and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(
            f"matmul leading dimensions differ: {a.shape} vs {b.shape}"
        )
    out_data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if shared_rhs:
                k, n = b.shape
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _result(out_data, (a, b), backward)


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(B, Cin, Hp, Wp) -> (B, Cin*k*k, oh*ow) patch matrix."""
    B, C = xp.shape[:2]
    sB, sC, sH, sW = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(B, C, k, k, oh, ow),
        strides=(sB, sC, sH, sW, sH * stride, sW * stride),
    )
    return np.ascontiguousarray(view).reshape(B, C * k * k, oh * ow)


def _col2im(gcols: np.ndarray, xp_shape, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    B, C = xp_shape[:2]
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    gc = gcols.reshape(B, C, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * oh : stride,
                j : j + stride * ow : stride] += gc[:, :, i, j]
    return gxp


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B,Cin,H,W) with (Cout,Cin,k,k) kernels."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d input and kernel, got {x.shape}, {w.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    B, cin, H, W = x.shape
    cout, cin_w, k, k2 = w.shape
    if k != k2 or cin != cin_w:
        raise ShapeError(f"conv2d kernel {w.shape} incompatible with input {x.shape}")
    if k > H + 2 * padding or k > W + 2 * padding:
        raise ShapeError(
            f"kernel {k}x{k} larger than padded input "
            f"{H + 2 * padding}x{W + 2 * padding} (input {x.shape}, kernel {w.shape})"
        )
    oh = (H + 2 * padding - k) // stride + 1
    ow = (W + 2 * padding - k) // stride + 1
    if padding > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, k, stride, oh, ow)
    w_mat = w.data.reshape(cout, cin * k * k)
    out_data = (w_mat @ cols).reshape(B, cout, oh, ow)

    def backward(g: np.ndarray) -> None:
        g_mat = g.reshape(B, cout, oh * ow)
        if w.requires_grad:
            # sum over batch and spatial positions: (cout, cin*k*k)
            gw = np.tensordot(g_mat, cols, axes=([0, 2], [0, 2]))
            w._accumulate(gw.reshape(w.shape))
        if x.requires_grad:
            gcols = w_mat.T @ g_mat
            gxp = _col2im(gcols, xp.shape, k, stride, oh, ow)
            if padding > 0:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(gxp)

    return _result(out_data, (x, w), backward)


def bias_add_channel(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias (C,) to a feature map (B,C,H,W)."""
    if x.ndim != 4 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"channel bias {b.shape} does not match map {x.shape}")
    out_data = x.data + b.data[None, :, None, None]

    def backward(g: np.ndarray) -> None:
        x._accumulate(g)
        b._accumulate(g.sum(axis=(0, 2, 3)))

    return _result(out_data, (x, b), backward)


def adaptive_avg_pool_1x1(x: Tensor) -> Tensor:
    """Spatial mean of a (B,C,H,W) map, flattened to (B,C)."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool_1x1 needs a 4-d map, got {x.shape}")
    B, C, H, W = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def backward(g: np.ndarray) -> None:
        x._accumulate(np.broadcast_to(g[:, :, None, None] / (H * W), x.shape))

    return _result(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# softmax / loss
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (g - dot))

    return _result(out_data, (x,), backward)


def log_softmax_data(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B,K) logits, got {logits.shape}")
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.min() < 0 or labels.max() >= K:
        bad = labels[(labels < 0) | (labels >= K)][0]
        raise IndexError(f"label {bad} outside [0, {K})")
    logp = log_softmax_data(logits.data)
    out_data = np.array(-logp[np.arange(B), labels].mean())

    def backward(g: np.ndarray) -> None:
        grad = np.exp(logp)
        grad[np.arange(B), labels] -= 1.0
        logits._accumulate(grad * (float(g) / B))

    return _result(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out_data = x.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g.reshape(x.shape))

    return _result(out_data, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = np.transpose(x.data, axes)

    def backward(g: np.ndarray) -> None:
        x._accumulate(np.transpose(g, inverse))

    return _result(out_data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return _result(out_data, tuple(tensors), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out_data = x.data[idx].copy()

    def backward(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        gx[idx] = g
        x._accumulate(gx)

    return _result(out_data, (x,), backward)


def tile_batch(x: Tensor, batch: int) -> Tensor:
    """Repeat a (1, ...) tensor along axis 0 to (batch, ...)."""
    if x.shape[0] != 1:
        raise ShapeError(f"tile_batch expects leading axis 1, got {x.shape}")
    out_data = np.broadcast_to(x.data, (batch,) + x.shape[1:]).copy()

    def backward(g: np.ndarray) -> None:
        x._accumulate(g.sum(axis=0, keepdims=True))

    return _result(out_data, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out_data = np.array(x.data.sum())

    def backward(g: np.ndarray) -> None:
        x._accumulate(np.full_like(x.data, float(g)))

    return _result(out_data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then gain+shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/shift {gain.shape}/{shift.shape} do not match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out_data = y * gain.data + shift.data

    def backward(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain._accumulate((g * y).reshape(-1, d).sum(axis=0))
        if shift.requires_grad:
            shift._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            x._accumulate(inv * (gy - gy.mean(axis=-1, keepdims=True)
                                 - y * (gy * y).mean(axis=-1, keepdims=True)))

    return _result(out_data, (x, gain, shift), backward)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a tensor to a scalar Tensor. Error per coordinate is
    |analytic - numeric| / max(1, |analytic|). With ``sample`` set, only that
    many seeded-random coordinates are probed (full sweep otherwise).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar function, got {out.shape}")
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.reshape(-1).copy()
    n = flat.size
    if sample is not None and sample < n:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(n, size=sample, replace=False)
    else:
        coords = np.arange(n)

    worst = 0.0
    analytic_flat = analytic.reshape(-1)
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(flat.reshape(x.shape))).data)
            flat[i] = orig - h
            fm = float(f(Tensor(flat.reshape(x.shape))).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite value while probing coordinate {i}")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic_flat[i]
            if not np.isfinite(a):
                raise GradCheckError(f"non-finite analytic gradient at coordinate {i}")
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return float(worst)
