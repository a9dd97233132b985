"""Fused view-time attention.

A token at (v, t, x, y) attends to every token that shares its view or its
timestep. The mask is constant over frame pairs, so the sparse path works on
whole frames: for each query frame it streams over the V+T-1 key frames in
ascending frame id with an online softmax, never materializing the N x N
score matrix. The dense path builds the full masked score matrix from
autodiff primitives and serves as the reference.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .autodiff import LayerNorm, Linear, Module, Tensor, make_node, ops
from .grid import GridShape, grid_positions, rope_rotate, rope_tables, token_coords


# -- mask and layout -----------------------------------------------------------

def mask_predicate(q: tuple, k: tuple) -> bool:
    """True iff the query token may attend to the key token (same view or same time)."""
    return q[0] == k[0] or q[1] == k[1]


@dataclass(frozen=True)
class MaskSpec:
    shape: GridShape

    def allowed(self) -> np.ndarray:
        """Boolean [N, N] matrix of mask_predicate over all token pairs."""
        c = token_coords(self.shape)
        same_v = c[:, None, 0] == c[None, :, 0]
        same_t = c[:, None, 1] == c[None, :, 1]
        return same_v | same_t

    def additive(self, dtype=np.float32) -> np.ndarray:
        return np.where(self.allowed(), 0.0, -np.inf).astype(dtype)


def group_mask(shape: GridShape, axis: str) -> np.ndarray:
    """Additive mask restricting attention to same-t ('view' attention) or same-v ('time')."""
    c = token_coords(shape)
    col = 1 if axis == "view" else 0
    same = c[:, None, col] == c[None, :, col]
    return np.where(same, 0.0, -np.inf).astype(np.float32)


@dataclass(frozen=True)
class BlockSparseLayout:
    V: int
    T: int
    block_size: int
    pairs: tuple[tuple[int, int], ...]
    key_frames: np.ndarray = field(compare=False)  # [V*T, V+T-1], ascending per row

    @property
    def n_frames(self) -> int:
        return self.V * self.T


def build_block_layout(V: int, T: int, block_size: int = 1) -> BlockSparseLayout:
    if V < 1 or T < 1:
        raise ValueError("V and T must be >= 1")
    rows = []
    pairs = []
    for v in range(V):
        for t in range(T):
            f = v * T + t
            keys = sorted({v * T + tt for tt in range(T)} | {vv * T + t for vv in range(V)})
            rows.append(keys)
            pairs.extend((f, k) for k in keys)
    return BlockSparseLayout(V, T, block_size, tuple(pairs), np.asarray(rows, dtype=np.int64))


def kept_fraction(V: int, T: int) -> Fraction:
    """Exact fraction of (query, key) pairs kept by the mask: (T+V-1)/(TV)."""
    return Fraction(T + V - 1, T * V)


def paper_sparsity(V: int, T: int) -> float:
    """Approximate sparsity 1 - (T+V)/(TV); it counts the self frame twice."""
    return 1.0 - (T + V) / (T * V)


def exact_sparsity(V: int, T: int) -> Fraction:
    return 1 - kept_fraction(V, T)


@dataclass(frozen=True)
class AttentionConfig:
    heads: int
    head_dim: int

    @property
    def d(self) -> int:
        return self.heads * self.head_dim

    @property
    def scale(self) -> float:
        return 1.0 / float(np.sqrt(self.head_dim))


# -- head layout helpers ---------------------------------------------------------

def _split_heads(x: Tensor, cfg: AttentionConfig) -> Tensor:
    lead = x.shape[:-2]
    n = x.shape[-2]
    if x.shape[-1] != cfg.d:
        raise ValueError(f"width {x.shape[-1]} != heads*head_dim {cfg.d}")
    x = ops.reshape(x, lead + (n, cfg.heads, cfg.head_dim))
    nd = len(lead)
    return ops.permute(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))


def _merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim - 3
    h, n, dh = x.shape[-3:]
    x = ops.permute(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    return ops.reshape(x, x.shape[:-2] + (h * dh,))


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if not (q.shape == k.shape == v.shape):
        raise ValueError(f"q/k/v shapes differ: {q.shape} {k.shape} {v.shape}")


# -- dense reference ----------------------------------------------------------------

def attention_dense(q, k, v, cfg: AttentionConfig, additive_mask: np.ndarray | None = None, multiply_mask: bool = False) -> Tensor:
    """Masked multi-head attention over [..., N, d] from autodiff primitives.

    With ``multiply_mask`` the binary mask multiplies the logits instead of
    removing entries (literal M * QK^T); removed entries then keep logit 0.
    """
    q, k, v = (t if isinstance(t, Tensor) else Tensor(t) for t in (q, k, v))
    _check_qkv(q, k, v)
    qh, kh, vh = (_split_heads(t, cfg) for t in (q, k, v))
    logits = ops.scale(ops.matmul(qh, ops.transpose(kh)), cfg.scale)
    if multiply_mask and additive_mask is not None:
        binary = np.isfinite(additive_mask).astype(logits.dtype)
        probs = ops.softmax_lastdim(ops.mul(logits, binary))
    else:
        probs = ops.softmax_lastdim(logits, additive_mask)
    return _merge_heads(ops.matmul(probs, vh))


def fused_attention_dense(q, k, v, cfg: AttentionConfig, mask: MaskSpec, multiply_mask: bool = False) -> Tensor:
    return attention_dense(q, k, v, cfg, mask.additive(), multiply_mask=multiply_mask)


# -- block-sparse streaming path --------------------------------------------------

def _to_blocks(x: np.ndarray, cfg: AttentionConfig, F: int, P: int) -> np.ndarray:
    """[B, N, d] -> [B, h, F, P, dh]."""
    B = x.shape[0]
    return x.reshape(B, F, P, cfg.heads, cfg.head_dim).transpose(0, 3, 1, 2, 4)


def _from_blocks(x: np.ndarray) -> np.ndarray:
    B, h, F, P, dh = x.shape
    return x.transpose(0, 2, 3, 1, 4).reshape(B, F * P, h * dh)


def fused_attention_sparse(q, k, v, cfg: AttentionConfig, layout: BlockSparseLayout) -> Tensor:
    """Block-sparse fused attention; equal to the dense masked path.

    Forward keeps a running max, running denominator and normalized running
    output per (query frame, head) row. Backward recomputes block
    probabilities from the stored log-sum-exp instead of keeping them.
    """
    q, k, v = (t if isinstance(t, Tensor) else Tensor(t) for t in (q, k, v))
    _check_qkv(q, k, v)
    lead = q.shape[:-2]
    N, d = q.shape[-2:]
    if d != cfg.d:
        raise ValueError(f"width {d} != heads*head_dim {cfg.d}")
    F = layout.n_frames
    if N % F or N // F != layout.block_size:
        raise ValueError(f"layout for {F} frames of {layout.block_size} tokens does not match {N} tokens")
    P = N // F
    B = int(np.prod(lead)) if lead else 1
    dtype = np.result_type(q.data, k.data, v.data)
    qb = _to_blocks(q.data.reshape(B, N, d).astype(dtype, copy=False), cfg, F, P)
    kb = _to_blocks(k.data.reshape(B, N, d).astype(dtype, copy=False), cfg, F, P)
    vb = _to_blocks(v.data.reshape(B, N, d).astype(dtype, copy=False), cfg, F, P)
    scale = dtype.type(cfg.scale)
    kf = layout.key_frames

    m = np.full(qb.shape[:-1], -np.inf, dtype)
    l = np.zeros(qb.shape[:-1], dtype)
    o = np.zeros(qb.shape, dtype)
    for j in range(kf.shape[1]):
        kj = kb[:, :, kf[:, j]]
        vj = vb[:, :, kf[:, j]]
        s = (qb @ np.swapaxes(kj, -1, -2)) * scale
        m_new = np.maximum(m, s.max(axis=-1))
        corr = np.exp(m - m_new)
        p = np.exp(s - m_new[..., None])
        l_new = l * corr + p.sum(axis=-1)
        o = o * (l * corr / l_new)[..., None] + (p / l_new[..., None]) @ vj
        m, l = m_new, l_new
    lse = m + np.log(l)
    out = _from_blocks(o).reshape(lead + (N, d))

    def bw(g):
        gb = _to_blocks(g.reshape(B, N, d).astype(dtype, copy=False), cfg, F, P)
        delta = (gb * o).sum(axis=-1)
        dq = np.zeros_like(qb)
        dk = np.zeros_like(kb)
        dv = np.zeros_like(vb)
        for j in range(kf.shape[1]):
            idx = kf[:, j]
            kj = kb[:, :, idx]
            vj = vb[:, :, idx]
            s = (qb @ np.swapaxes(kj, -1, -2)) * scale
            p = np.exp(s - lse[..., None])
            dp = gb @ np.swapaxes(vj, -1, -2)
            ds = p * (dp - delta[..., None]) * scale
            dq += ds @ kj
            np.add.at(dk, (slice(None), slice(None), idx), np.swapaxes(ds, -1, -2) @ qb)
            np.add.at(dv, (slice(None), slice(None), idx), np.swapaxes(p, -1, -2) @ gb)
        shape = lead + (N, d)
        return (
            _from_blocks(dq).reshape(shape).astype(q.dtype, copy=False),
            _from_blocks(dk).reshape(shape).astype(k.dtype, copy=False),
            _from_blocks(dv).reshape(shape).astype(v.dtype, copy=False),
        )

    return make_node(out, (q, k, v), bw)


# -- grouped attention for the baseline architectures ------------------------------

def grouped_attention(q, k, v, cfg: AttentionConfig, shape: GridShape, axis: str) -> Tensor:
    """Attention restricted to same-t groups (axis='view') or same-v groups (axis='time').

    Implemented by regrouping tokens instead of masking: each group is a
    dense attention problem of its own.
    """
    if axis not in ("view", "time"):
        raise ValueError(f"axis must be 'view' or 'time', got {axis!r}")
    V, T, P = shape.V, shape.T, shape.frame_tokens
    lead = q.shape[:-2]
    nl = len(lead)
    d = q.shape[-1]
    L = tuple(range(nl))

    def regroup(x):
        x = ops.reshape(x, lead + (V, T, P, d))
        if axis == "view":
            # groups over t, members (v, p)
            x = ops.permute(x, L + (nl + 1, nl, nl + 2, nl + 3))
            return ops.reshape(x, lead + (T, V * P, d))
        return ops.reshape(x, lead + (V, T * P, d))

    out = attention_dense(regroup(q), regroup(k), regroup(v), cfg)
    if axis == "view":
        out = ops.reshape(out, lead + (T, V, P, d))
        out = ops.permute(out, L + (nl + 1, nl, nl + 2, nl + 3))
    return ops.reshape(out, lead + (V * T * P, d))


# -- layers -------------------------------------------------------------------

class GridContext:
    """Per-forward constants shared by attention layers (rotary tables, layout, mask)."""

    def __init__(self, shape: GridShape, cfg: AttentionConfig, position_mode: str = "collapse", impl: str = "sparse"):
        self.shape = shape
        self.cfg = cfg
        self.impl = impl
        pos = grid_positions(shape, position_mode)
        cos, sin = rope_tables(pos, cfg.head_dim)
        self.rope = (np.tile(cos, (1, cfg.heads)), np.tile(sin, (1, cfg.heads)))
        self.layout = build_block_layout(shape.V, shape.T, shape.frame_tokens)
        self._mask = None

    @property
    def mask(self) -> MaskSpec:
        return MaskSpec(self.shape)

    def additive_mask(self) -> np.ndarray:
        if self._mask is None:
            self._mask = self.mask.additive()
        return self._mask


class SelfAttention(Module):
    """QKV projection, rotary embedding, one attention pattern, output projection."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, pattern: str = "fused", zero_out: bool = False):
        if d % heads:
            raise ValueError("d must be divisible by heads")
        self.heads = heads
        self.pattern = pattern
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng, zero=zero_out)

    def forward(self, x: Tensor, ctx: GridContext) -> Tensor:
        d = x.shape[-1]
        qkv = self.qkv(x)
        q = rope_rotate(qkv[..., :d], tables=ctx.rope)
        k = rope_rotate(qkv[..., d : 2 * d], tables=ctx.rope)
        v = qkv[..., 2 * d :]
        cfg = ctx.cfg
        if self.pattern == "fused":
            if ctx.impl == "sparse":
                y = fused_attention_sparse(q, k, v, cfg, ctx.layout)
            elif ctx.impl == "dense":
                y = attention_dense(q, k, v, cfg, ctx.additive_mask())
            elif ctx.impl == "multiply":
                y = attention_dense(q, k, v, cfg, ctx.additive_mask(), multiply_mask=True)
            else:
                raise ValueError(f"unknown attention impl {ctx.impl!r}")
        elif self.pattern in ("view", "time"):
            y = grouped_attention(q, k, v, cfg, ctx.shape, self.pattern)
        else:
            raise ValueError(f"unknown attention pattern {self.pattern!r}")
        return self.out(y)


class SequentialAttention(Module):
    """Cross-view attention then cross-time attention, each with its own weights and residual."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.norm_view = LayerNorm(d)
        self.view = SelfAttention(d, heads, rng, "view")
        self.norm_time = LayerNorm(d)
        self.time = SelfAttention(d, heads, rng, "time")

    def forward(self, x: Tensor, ctx: GridContext) -> Tensor:
        x = ops.add(x, self.view(self.norm_view(x), ctx))
        return ops.add(x, self.time(self.norm_time(x), ctx))


class ParallelAttention(Module):
    """Cross-view and cross-time branches on the same input, merged by one linear sync layer."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.norm = LayerNorm(d)
        self.view = SelfAttention(d, heads, rng, "view")
        self.time = SelfAttention(d, heads, rng, "time")
        self.sync = Linear(2 * d, d, rng)

    def forward(self, x: Tensor, ctx: GridContext) -> Tensor:
        h = self.norm(x)
        merged = ops.concat([self.view(h, ctx), self.time(h, ctx)], axis=-1)
        return ops.add(x, self.sync(merged))


class FusedAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.norm = LayerNorm(d)
        self.attn = SelfAttention(d, heads, rng, "fused")

    def forward(self, x: Tensor, ctx: GridContext) -> Tensor:
        return ops.add(x, self.attn(self.norm(x), ctx))


def make_attention_block(arch: str, d: int, heads: int, rng: np.random.Generator) -> Module:
    if arch == "fused":
        return FusedAttention(d, heads, rng)
    if arch == "sequential":
        return SequentialAttention(d, heads, rng)
    if arch == "parallel":
        return ParallelAttention(d, heads, rng)
    raise ValueError(f"unknown architecture {arch!r}")


def sequential_block(tokens: Tensor, params: SequentialAttention, ctx: GridContext) -> Tensor:
    return params(tokens, ctx)


def parallel_block(tokens: Tensor, params: ParallelAttention, ctx: GridContext) -> Tensor:
    return params(tokens, ctx)


# -- benchmark ----------------------------------------------------------------

@dataclass
class BenchReport:
    V: int
    T: int
    H: int
    W: int
    d: int
    flops_sparse: int
    flops_dense: int
    ms_sparse: float
    ms_dense: float

    @property
    def flop_ratio(self) -> Fraction:
        return Fraction(self.flops_sparse, self.flops_dense)

    @property
    def speedup(self) -> float:
        return self.ms_dense / self.ms_sparse if self.ms_sparse > 0 else float("inf")


def attention_flops(V: int, T: int, H: int, W: int, d: int) -> tuple[int, int]:
    """Multiply-add counts for QK^T and PV: dense 4*N^2*d, sparse 4*N*(T+V-1)*H*W*d."""
    N = V * T * H * W
    dense = 4 * N * N * d
    sparse = 4 * N * (T + V - 1) * H * W * d
    return sparse, dense


def bench_attention(V: int, T: int, H: int, W: int, d: int, repeats: int = 3, heads: int = 1, seed: int = 0) -> BenchReport:
    rng = np.random.default_rng(seed)
    shape = GridShape(V, T, H, W, d, T_max=T)
    cfg = AttentionConfig(heads, d // heads)
    N = shape.n_tokens
    q, k, v = (Tensor(rng.standard_normal((N, d)).astype(np.float32)) for _ in range(3))
    layout = build_block_layout(V, T, H * W)
    mask = MaskSpec(shape).additive()

    def timed(fn):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t0) * 1e3)
        return float(np.median(times))

    ms_sparse = timed(lambda: fused_attention_sparse(q, k, v, cfg, layout))
    ms_dense = timed(lambda: attention_dense(q, k, v, cfg, mask))
    fs, fd = attention_flops(V, T, H, W, d)
    return BenchReport(V, T, H, W, d, fs, fd, ms_sparse, ms_dense)
