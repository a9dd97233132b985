"""Registry of finite-difference gradient checks over every differentiable piece.

Each check reduces its op to a scalar through a fixed random weighting and
hands it to ``grad_check``. Inputs are drawn away from kinks (relu at 0,
clip bounds, the rasterizer's 3-sigma cut-off) so that central differences
are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, grad_check, ops

THRESHOLD = 2e-3


@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.error <= self.threshold


@dataclass
class GradCase:
    name: str
    fn: Callable[[Tensor], Tensor]
    x: np.ndarray
    step: float = 1e-5


def _weighted(fn, shape_out_seed: int = 99):
    """Scalar sum(fn(x) * R) with R fixed per output shape."""
    cache: dict = {}

    def f(x):
        y = fn(x)
        if y.shape not in cache:
            cache[y.shape] = np.random.default_rng(shape_out_seed).standard_normal(y.shape)
        return ops.sum(ops.mul(y, cache[y.shape]))

    return f


def _away_from(values: np.ndarray, points, margin: float) -> np.ndarray:
    out = values.copy()
    for p in points:
        near = np.abs(out - p) < margin
        out[near] = p + np.where(out[near] >= p, margin, -margin)
    return out


def primitive_cases(seed: int = 0) -> list[GradCase]:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    b = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 5))
    kinked = _away_from(a, [0.0], 0.05)
    cases = [
        GradCase("add", _weighted(lambda x: ops.add(x, b)), a),
        GradCase("add_broadcast", _weighted(lambda x: ops.add(x, b[:1])), a[:1]),
        GradCase("sub", _weighted(lambda x: ops.sub(b, x)), a),
        GradCase("mul", _weighted(lambda x: ops.mul(x, ops.add(x, b))), a),
        GradCase("div", _weighted(lambda x: ops.div(b, x)), pos),
        GradCase("neg", _weighted(ops.neg), a),
        GradCase("scale", _weighted(lambda x: ops.scale(x, 2.5)), a),
        GradCase("square", _weighted(ops.square), a),
        GradCase("sqrt", _weighted(ops.sqrt), pos),
        GradCase("exp", _weighted(ops.exp), a),
        GradCase("log", _weighted(ops.log), pos),
        GradCase("sin", _weighted(ops.sin), a),
        GradCase("cos", _weighted(ops.cos), a),
        GradCase("tanh", _weighted(ops.tanh), a),
        GradCase("sigmoid", _weighted(ops.sigmoid), a),
        GradCase("softplus", _weighted(ops.softplus), a * 5),
        GradCase("gelu", _weighted(ops.gelu), a),
        GradCase("relu", _weighted(ops.relu), kinked),
        GradCase("abs", _weighted(ops.abs), kinked),
        GradCase("clip", _weighted(lambda x: ops.clip(x, -0.5, 0.5)), _away_from(a, [-0.5, 0.5], 0.05)),
        GradCase("where", _weighted(lambda x: ops.where(b > 0, x, ops.square(x))), a),
        GradCase("matmul", _weighted(lambda x: ops.matmul(x, w)), a),
        GradCase("matmul_batched", _weighted(lambda x: ops.matmul(x, ops.transpose(x))), rng.standard_normal((2, 3, 4))),
        GradCase("transpose", _weighted(ops.transpose), a),
        GradCase("permute", _weighted(lambda x: ops.permute(x, (2, 0, 1))), rng.standard_normal((2, 3, 4))),
        GradCase("reshape", _weighted(lambda x: ops.reshape(x, (2, 6))), a),
        GradCase("sum_axis", _weighted(lambda x: ops.sum(x, axis=1)), a),
        GradCase("mean_keepdims", _weighted(lambda x: ops.mean(x, axis=0, keepdims=True)), a),
        GradCase("concat", _weighted(lambda x: ops.concat([x, ops.square(x)], axis=0)), a),
        GradCase("stack", _weighted(lambda x: ops.stack([x, ops.sin(x)], axis=1)), a),
        GradCase("getitem_basic", _weighted(lambda x: x[1:, ::2]), a),
        GradCase("getitem_fancy", _weighted(lambda x: x[np.array([0, 2, 2])]), a),
        GradCase("pad_last", _weighted(lambda x: ops.pad_last(x, 1, 2)), a),
        GradCase("layer_norm", _weighted(lambda x: ops.layer_norm(x, Tensor(pos[0]), Tensor(b[0]))), a),
        GradCase("softmax", _weighted(lambda x: ops.softmax_lastdim(x)), a),
        GradCase(
            "softmax_masked",
            _weighted(lambda x: ops.softmax_lastdim(x, np.where((np.eye(3, 4) > 0) | (np.arange(4) < 2), 0.0, -np.inf))),
            a,
        ),
        GradCase("mse", lambda x: ops.mse(x, Tensor(b)), a),
        GradCase("masked_mean", lambda x: ops.masked_mean(ops.square(x), (b > 0).astype(float)), a),
    ]
    return cases


def attention_cases(seed: int = 0) -> list[GradCase]:
    from .attention import AttentionConfig, MaskSpec, attention_dense, build_block_layout, fused_attention_sparse, grouped_attention
    from .grid import GridShape, grid_positions, rope_rotate

    rng = np.random.default_rng(seed)
    shape = GridShape(V=2, T=3, H=2, W=1, d=8, T_max=4)
    N = shape.n_tokens
    cfg = AttentionConfig(heads=2, head_dim=4)
    q, k, v = (rng.standard_normal((1, N, 8)) for _ in range(3))
    layout = build_block_layout(shape.V, shape.T, shape.frame_tokens)
    pos = grid_positions(shape)
    return [
        GradCase("rope_rotate", _weighted(lambda x: rope_rotate(x, pos)), q),
        GradCase("attention_dense_masked", _weighted(lambda x: attention_dense(x, k, v, cfg, MaskSpec(shape).additive())), q),
        GradCase("fused_attention_sparse_q", _weighted(lambda x: fused_attention_sparse(x, k, v, cfg, layout)), q),
        GradCase("fused_attention_sparse_k", _weighted(lambda x: fused_attention_sparse(q, x, v, cfg, layout)), k),
        GradCase("fused_attention_sparse_v", _weighted(lambda x: fused_attention_sparse(q, k, x, cfg, layout)), v),
        GradCase("grouped_attention_view", _weighted(lambda x: grouped_attention(x, k, v, cfg, shape, "view")), q),
        GradCase("grouped_attention_time", _weighted(lambda x: grouped_attention(q, x, v, cfg, shape, "time")), k),
    ]


def raster_scene():
    """Three overlapping Gaussians in front of an 8x8 camera, well inside every cut-off."""
    from .camera import look_at_camera
    from .splat import GaussianSet

    cam = look_at_camera((0.0, 0.0, -3.0), (0.0, 0.0, 0.0), 8, 8, focal=8.0)
    g = GaussianSet(
        centers=np.array([[0.05, -0.02, 0.0], [-0.15, 0.1, 0.3], [0.12, 0.14, -0.2]]),
        scales=np.array([[0.22, 0.18, 0.2], [0.25, 0.2, 0.3], [0.17, 0.21, 0.19]]),
        rotations=np.array([[0.9, 0.1, -0.2, 0.1], [1.0, 0.0, 0.0, 0.0], [0.8, -0.3, 0.2, 0.1]]),
        opacities=np.array([0.6, 0.5, 0.7]),
        colors=np.array([[0.9, 0.2, 0.1], [0.1, 0.8, 0.3], [0.2, 0.3, 0.9]]),
    )
    g.rotations = g.rotations / np.linalg.norm(g.rotations, axis=1, keepdims=True)
    return g, cam


def raster_cases() -> list[GradCase]:
    from .splat import GaussianSet, rasterize

    g, cam = raster_scene()
    bg = (0.2, 0.3, 0.4)
    names = ("centers", "scales", "rotations", "opacities", "colors")

    def make(i):
        def fn(x):
            fields = list(g.fields())
            fields[i] = x
            return rasterize(GaussianSet(*fields), cam, bg).image

        return fn

    return [GradCase(f"rasterize_{n}", _weighted(make(i)), np.asarray(g.fields()[i], np.float64), step=1e-6) for i, n in enumerate(names)]


def all_cases() -> list[GradCase]:
    return primitive_cases() + attention_cases() + raster_cases()


def run_suite(threshold: float = THRESHOLD, cases: list[GradCase] | None = None) -> list[CheckResult]:
    return [CheckResult(c.name, grad_check(c.fn, c.x, step=c.step), threshold) for c in (cases or all_cases())]
