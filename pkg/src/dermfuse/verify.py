"""Finite-difference verification of backward rules.

`param_fd_error` sweeps model parameters in place; `run_gradcheck` is the
full component suite behind the `dermfuse gradcheck` subcommand.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from . import tensor as ops
from .errors import GradCheckError
from .tensor import Tensor, no_grad


def param_fd_error(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    sample: int | None = 8,
    seed: int = 0,
) -> float:
    """Max relative error of analytic parameter gradients vs central differences.

    ``loss_fn`` recomputes the scalar loss from current parameter values, so
    perturbing a parameter in place and re-evaluating gives the numeric
    derivative. With ``sample`` set, at most that many seeded-random
    coordinates are probed per parameter.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        analytic_flat = analytic.reshape(-1)
        n = flat.size
        if sample is not None and sample < n:
            coords = rng.choice(n, size=sample, replace=False)
        else:
            coords = np.arange(n)
        with no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(loss_fn().data)
                flat[i] = orig - h
                fm = float(loss_fn().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise GradCheckError(
                        f"non-finite loss while probing coordinate {i}"
                    )
                numeric = (fp - fm) / (2.0 * h)
                a = analytic_flat[i]
                err = abs(a - numeric) / max(1.0, abs(a))
                if err > worst:
                    worst = err
    for p in params:
        p.zero_grad()
    return float(worst)


# ---------------------------------------------------------------------------
# gradcheck component suite
# ---------------------------------------------------------------------------

def _check_matmul() -> float:
    rng = np.random.default_rng(10)
    a0, b0 = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))

    def wrt_a(a):
        return ops.sum_all(ops.tanh(ops.matmul(a, Tensor(b0))))

    def wrt_b(b):
        return ops.sum_all(ops.tanh(ops.matmul(Tensor(a0), b)))

    return max(ops.finite_diff_check(wrt_a, Tensor(a0)),
               ops.finite_diff_check(wrt_b, Tensor(b0)))


def _check_conv2d() -> float:
    rng = np.random.default_rng(11)
    x0 = rng.standard_normal((1, 2, 5, 5))
    w0 = rng.standard_normal((3, 2, 3, 3))
    worst = 0.0
    for stride, padding in ((1, 0), (2, 1)):
        def wrt_x(x):
            return ops.sum_all(ops.sigmoid(ops.conv2d(x, Tensor(w0), stride, padding)))

        def wrt_w(w):
            return ops.sum_all(ops.sigmoid(ops.conv2d(Tensor(x0), w, stride, padding)))

        worst = max(worst, ops.finite_diff_check(wrt_x, Tensor(x0)),
                    ops.finite_diff_check(wrt_w, Tensor(w0)))
    return worst


def _check_pool() -> float:
    x0 = np.random.default_rng(12).standard_normal((2, 3, 4, 4))

    def f(x):
        return ops.sum_all(ops.tanh(ops.adaptive_avg_pool_1x1(x)))

    return ops.finite_diff_check(f, Tensor(x0))


def _check_elementwise() -> float:
    rng = np.random.default_rng(13)
    a0 = rng.standard_normal((3, 4)) + np.sign(rng.standard_normal((3, 4))) * 0.2
    v0 = rng.standard_normal(4)

    def f(a):
        y = ops.mul(ops.add(a, Tensor(v0)), a)
        y = ops.add(ops.sigmoid(y), ops.mul(ops.tanh(y), ops.relu(a)))
        return ops.sum_all(y)

    def wrt_v(v):
        return ops.sum_all(ops.sigmoid(ops.mul(Tensor(a0), ops.add(Tensor(a0), v))))

    return max(ops.finite_diff_check(f, Tensor(a0)),
               ops.finite_diff_check(wrt_v, Tensor(v0)))


def _check_softmax() -> float:
    rng = np.random.default_rng(14)
    x0, w = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))

    def f(x):
        return ops.sum_all(ops.mul(ops.softmax(x, axis=1), Tensor(w)))

    return ops.finite_diff_check(f, Tensor(x0))


def _check_cross_entropy() -> float:
    rng = np.random.default_rng(15)
    logits0 = rng.standard_normal((3, 6))
    labels = rng.integers(0, 6, size=3)

    def f(logits):
        return ops.cross_entropy(logits, labels)

    return ops.finite_diff_check(f, Tensor(logits0))


def _check_layer_norm() -> float:
    from .layers import LayerNorm

    rng = np.random.default_rng(16)
    ln = LayerNorm(5)
    ln.gain.data[...] = rng.standard_normal(5)
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)

    def loss():
        return ops.sum_all(ops.sigmoid(ln(x)))

    return param_fd_error(loss, [x, ln.gain, ln.shift], sample=None)


def _check_linear() -> float:
    from .layers import Linear

    rng = np.random.default_rng(17)
    lin = Linear(4, 3, rng=rng)
    x = Tensor(rng.standard_normal((5, 4)))

    def loss():
        return ops.sum_all(ops.tanh(lin(x)))

    return param_fd_error(loss, lin.parameters(), sample=None)


def _check_mha() -> float:
    from .layers import MultiHeadAttention

    rng = np.random.default_rng(18)
    mha = MultiHeadAttention(heads=2, model_dim=8, rng=rng)
    q = Tensor(rng.standard_normal((3, 8)))
    kv = Tensor(rng.standard_normal((4, 8)))

    def loss():
        return ops.sum_all(ops.tanh(mha(q, kv)))

    return param_fd_error(loss, mha.parameters(), sample=None)


def _fusion_inputs(seed, image_dim, meta_dim, batch=2):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((batch, image_dim)), rng.standard_normal((batch, meta_dim))


def _check_fuse_concat() -> float:
    from .fusion import ConcatFusion

    fuse = ConcatFusion(6, 4)
    v0, m0 = _fusion_inputs(19, 6, 4)
    w = np.random.default_rng(20).standard_normal((2, 10))

    def wrt_v(v):
        return ops.sum_all(ops.mul(fuse(v, Tensor(m0)), Tensor(w)))

    def wrt_m(m):
        return ops.sum_all(ops.mul(fuse(Tensor(v0), m), Tensor(w)))

    return max(ops.finite_diff_check(wrt_v, Tensor(v0)),
               ops.finite_diff_check(wrt_m, Tensor(m0)))


def _fusion_param_check(fuse, seed) -> float:
    v0, m0 = _fusion_inputs(seed, fuse.image_dim, fuse.meta_dim)
    v = Tensor(v0, requires_grad=True)
    m = Tensor(m0, requires_grad=True)

    def loss():
        return ops.sum_all(ops.tanh(fuse(v, m)))

    return param_fd_error(loss, [*fuse.parameters(), v, m], sample=None)


def _check_fuse_metablock() -> float:
    from .fusion import MetaBlockFusion

    return _fusion_param_check(MetaBlockFusion(6, 4, rng=np.random.default_rng(21)), 22)


def _check_fuse_metanet() -> float:
    from .fusion import MetaNetFusion

    return _fusion_param_check(
        MetaNetFusion(6, 4, hidden_dim=8, rng=np.random.default_rng(23)), 24
    )


def _check_fuse_mat() -> float:
    from .fusion import MatFusion

    return _fusion_param_check(
        MatFusion(20, 5, chunks=4, attn_dim=8, heads=2, rng=np.random.default_rng(25)), 26
    )


def _check_reducer_head() -> float:
    from .fusion import ReducerHead

    rng = np.random.default_rng(27)
    head = ReducerHead(7, 4, reducer_dim=5, rng=rng)
    x = Tensor(rng.standard_normal((3, 7)))

    def loss():
        return ops.sum_all(ops.sigmoid(head(x)))

    return param_fd_error(loss, head.parameters(), sample=None)


def _small_backbone(kind: str, rng):
    from .backbones import (
        TinyCnn, TinyCnnConfig, TinyDualVit, TinyDualVitConfig, TinyVit, TinyVitConfig,
    )

    if kind == "cnn":
        return TinyCnn(TinyCnnConfig(channels=(4, 6)), rng=rng)
    if kind == "vit":
        return TinyVit(TinyVitConfig(patch_size=8, embed_dim=8, depth=1, heads=2),
                       image_size=16, rng=rng)
    return TinyDualVit(TinyDualVitConfig(
        big=TinyVitConfig(patch_size=8, embed_dim=8, depth=1, heads=2),
        small=TinyVitConfig(patch_size=16, embed_dim=4, depth=1, heads=2),
    ), image_size=16, rng=rng)


def _check_backbone(kind: str, seed: int, sample: int | None) -> float:
    from .fusion import adapt

    backbone = _small_backbone(kind, np.random.default_rng(seed))
    images = Tensor(np.random.default_rng(seed + 1).standard_normal((2, 3, 16, 16)))

    def loss():
        return ops.sum_all(ops.sigmoid(adapt(backbone(images))))

    return param_fd_error(loss, backbone.parameters(), sample=sample, seed=seed)


def _check_end_to_end(backbone_kind: str, fusion_kind: str, seed: int,
                      sample: int | None) -> float:
    from .fusion import (
        ConcatFusion, FusionModel, MatFusion, MetaBlockFusion, MetaNetFusion, ReducerHead,
    )

    rng = np.random.default_rng(seed)
    backbone = _small_backbone(backbone_kind, rng)
    meta_dim, classes = 5, 3
    fusion_cls = {
        "concat": ConcatFusion,
        "metablock": MetaBlockFusion,
        "metanet": MetaNetFusion,
        "mat": MatFusion,
    }[fusion_kind]
    if fusion_kind == "concat":
        fuse = fusion_cls(backbone.feature_dim, meta_dim)
    elif fusion_kind == "mat":
        fuse = fusion_cls(backbone.feature_dim, meta_dim, chunks=2, attn_dim=4, heads=2, rng=rng)
    else:
        fuse = fusion_cls(backbone.feature_dim, meta_dim, rng=rng)
    head = ReducerHead(fuse.output_dim, classes, reducer_dim=7, rng=rng)
    model = FusionModel(backbone, fuse, head)

    data_rng = np.random.default_rng(seed + 1)
    images = Tensor(data_rng.standard_normal((2, 3, 16, 16)))
    meta = Tensor(data_rng.standard_normal((2, meta_dim)))
    labels = np.array([0, 2])

    def loss():
        return ops.cross_entropy(model(images, meta), labels)

    return param_fd_error(loss, model.parameters(), sample=sample, seed=seed)


def run_gradcheck(sample: int | None = 8, tolerance: float = 1e-4) -> dict[str, float]:
    """Worst finite-difference relative error per component.

    Large parameter tensors are probed at ``sample`` seeded coordinates;
    everything is evaluated at h=1e-5 in float64.
    """
    checks = {
        "matmul": _check_matmul,
        "conv2d": _check_conv2d,
        "adaptive_avg_pool_1x1": _check_pool,
        "elementwise": _check_elementwise,
        "softmax": _check_softmax,
        "cross_entropy": _check_cross_entropy,
        "layer_norm": _check_layer_norm,
        "linear": _check_linear,
        "multi_head_attention": _check_mha,
        "fuse_concat": _check_fuse_concat,
        "fuse_metablock": _check_fuse_metablock,
        "fuse_metanet": _check_fuse_metanet,
        "fuse_mat": _check_fuse_mat,
        "reducer_head": _check_reducer_head,
        "tiny_cnn": lambda: _check_backbone("cnn", 30, sample),
        "tiny_vit": lambda: _check_backbone("vit", 31, sample),
        "tiny_dualvit": lambda: _check_backbone("dualvit", 32, sample),
        "model_cnn_metablock": lambda: _check_end_to_end("cnn", "metablock", 33, sample),
        "model_vit_mat": lambda: _check_end_to_end("vit", "mat", 34, sample),
        "model_dualvit_metanet": lambda: _check_end_to_end("dualvit", "metanet", 35, sample),
        "model_vit_concat": lambda: _check_end_to_end("vit", "concat", 36, sample),
    }
    return {name: fn() for name, fn in checks.items()}


def gradcheck_failures(errors: dict[str, float], tolerance: float = 1e-4) -> list[str]:
    return [name for name, err in errors.items() if not err <= tolerance]
