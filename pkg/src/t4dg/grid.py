"""4D token grids: flat indexing, position collapsing, rotary embedding and
temporal patch compression.

Tokens are stored flat in view-major order: ``((v*T + t)*H + x)*W + y``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Linear, Tensor, make_node

ROPE_BASE = 10000.0
DEFAULT_PATCH = 4


@dataclass(frozen=True)
class GridShape:
    V: int
    T: int
    H: int
    W: int
    d: int = 64
    T_max: int = 8

    def __post_init__(self):
        for name in ("V", "T", "H", "W", "d", "T_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"GridShape.{name} must be >= 1")
        if self.T > self.T_max:
            raise ValueError(f"T={self.T} exceeds T_max={self.T_max}")
        if self.d % 2:
            raise ValueError("channel width must be even for rotary pairing")

    @property
    def frames(self) -> int:
        return self.V * self.T

    @property
    def frame_tokens(self) -> int:
        return self.H * self.W

    @property
    def n_tokens(self) -> int:
        return self.V * self.T * self.H * self.W


@dataclass
class TokenGrid:
    shape: GridShape
    tokens: Tensor  # [..., V*T*H*W, d]

    def __post_init__(self):
        if self.tokens.shape[-2] != self.shape.n_tokens:
            raise ValueError(f"token count {self.tokens.shape[-2]} != {self.shape.n_tokens}")

    def unflatten(self) -> np.ndarray:
        s = self.shape
        lead = self.tokens.shape[:-2]
        return self.tokens.data.reshape(*lead, s.V, s.T, s.H, s.W, self.tokens.shape[-1])

    @classmethod
    def from_array(cls, arr: np.ndarray, T_max: int | None = None) -> TokenGrid:
        """Build from ``[..., V, T, H, W, d]``."""
        V, T, H, W, d = arr.shape[-5:]
        lead = arr.shape[:-5]
        shape = GridShape(V, T, H, W, d, T_max or max(T, 1))
        return cls(shape, Tensor(arr.reshape(*lead, V * T * H * W, d)))


def flatten_index(v: int, t: int, x: int, y: int, shape: GridShape) -> int:
    for name, i, n in (("v", v, shape.V), ("t", t, shape.T), ("x", x, shape.H), ("y", y, shape.W)):
        if not 0 <= i < n:
            raise IndexError(f"{name}={i} out of range [0, {n})")
    return ((v * shape.T + t) * shape.H + x) * shape.W + y


def unflatten_index(idx: int, shape: GridShape) -> tuple[int, int, int, int]:
    if not 0 <= idx < shape.n_tokens:
        raise IndexError(f"index {idx} out of range")
    idx, y = divmod(idx, shape.W)
    idx, x = divmod(idx, shape.H)
    v, t = divmod(idx, shape.T)
    return v, t, x, y


def token_coords(shape: GridShape) -> np.ndarray:
    """(v, t, x, y) for every token in canonical order, shape [N, 4]."""
    v, t, x, y = np.meshgrid(
        np.arange(shape.V), np.arange(shape.T), np.arange(shape.H), np.arange(shape.W), indexing="ij"
    )
    return np.stack([v, t, x, y], axis=-1).reshape(-1, 4)


def collapse_position(v: int, t: int, x: int, y: int, T_max: int) -> tuple[int, int, int]:
    """Map (v, t, x, y) to (v*T_max + t, x, y): the views laid end to end as one long video."""
    if t >= T_max:
        raise ValueError(f"t={t} must be < T_max={T_max}")
    return v * T_max + t, x, y


def collapse_position_sum(v: int, t: int, x: int, y: int) -> tuple[int, int, int]:
    """Alternate collapse (v + t, x, y).

    Ambiguous: every (v, t) on the same anti-diagonal shares one position.
    """
    return v + t, x, y


def grid_positions(shape: GridShape, mode: str = "collapse") -> np.ndarray:
    """Rotary positions (p, x, y) for every token, shape [N, 3]."""
    c = token_coords(shape)
    if mode == "collapse":
        p = c[:, 0] * shape.T_max + c[:, 1]
    elif mode == "sum":
        p = c[:, 0] + c[:, 1]
    else:
        raise ValueError(f"unknown position mode {mode!r}")
    return np.stack([p, c[:, 2], c[:, 3]], axis=-1)


# -- rotary embedding ----------------------------------------------------------

def rope_pair_groups(d: int) -> tuple[list[int], int]:
    """Rotary pairs assigned to the (p, x, y) axes and the padded group width.

    The width is padded up to a multiple of 6 so each axis gets an equal
    group; pairs that would fall in the padding do not exist, so the last
    group(s) just hold fewer pairs.
    """
    if d % 2:
        raise ValueError("rotary width must be even")
    group_width = -(-d // 6) * 2
    per_group = group_width // 2
    pairs = d // 2
    counts = []
    for _ in range(3):
        take = min(per_group, pairs)
        counts.append(take)
        pairs -= take
    return counts, group_width


def rope_angles(positions: np.ndarray, d: int) -> np.ndarray:
    """Angle per (token, pair), shape [N, d/2]."""
    positions = np.asarray(positions, dtype=np.float64)
    counts, group_width = rope_pair_groups(d)
    cols = []
    for axis, n in enumerate(counts):
        i = np.arange(n)
        theta = ROPE_BASE ** (-2.0 * i / group_width)
        cols.append(positions[:, axis : axis + 1] * theta[None, :])
    return np.concatenate(cols, axis=1)


def rope_tables(positions: np.ndarray, d: int, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    ang = rope_angles(positions, d)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_rotate(x, positions: np.ndarray | None = None, tables=None) -> Tensor:
    """Rotate channel pairs (2i, 2i+1) of ``x[..., N, d]`` by per-token angles.

    Pass either ``positions`` ([N, 3] of (p, x, y)) or precomputed ``tables``.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    d = x.shape[-1]
    if tables is None:
        tables = rope_tables(positions, d, x.data.dtype)
    cos, sin = tables
    xd = x.data.reshape(x.shape[:-1] + (d // 2, 2))
    a, b = xd[..., 0], xd[..., 1]
    out = np.stack([a * cos - b * sin, a * sin + b * cos], axis=-1).reshape(x.shape)

    def bw(g):
        g = g.reshape(xd.shape)
        g0, g1 = g[..., 0], g[..., 1]
        return (np.stack([g0 * cos + g1 * sin, g1 * cos - g0 * sin], axis=-1).reshape(x.shape),)

    return make_node(out, (x,), bw)


# -- temporal compression -------------------------------------------------------

def patchify_temporal(frames: np.ndarray, factor: int = 4, patch: int = DEFAULT_PATCH) -> np.ndarray:
    """[V, T_px, H_px, W_px, C] -> [V, T_px/factor, H_px/patch, W_px/patch, factor*patch*patch*C].

    Channel order within a token is (frame, row, col, color).
    """
    V, Tp, Hp, Wp, C = frames.shape
    if factor < 1 or Tp % factor:
        raise ValueError(f"frame count {Tp} not divisible by factor {factor}")
    if Hp % patch or Wp % patch:
        raise ValueError(f"frame size {Hp}x{Wp} not divisible by patch {patch}")
    T, H, W = Tp // factor, Hp // patch, Wp // patch
    a = frames.reshape(V, T, factor, H, patch, W, patch, C)
    a = a.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return np.ascontiguousarray(a.reshape(V, T, H, W, factor * patch * patch * C))


def unpatchify_temporal(tokens: np.ndarray, factor: int = 4, patch: int = DEFAULT_PATCH, channels: int = 3) -> np.ndarray:
    V, T, H, W, D = tokens.shape
    if D != factor * patch * patch * channels:
        raise ValueError(f"token width {D} does not match factor/patch/channels")
    a = tokens.reshape(V, T, H, W, factor, patch, patch, channels)
    a = a.transpose(0, 1, 4, 2, 5, 3, 6, 7)
    return np.ascontiguousarray(a.reshape(V, T * factor, H * patch, W * patch, channels))


def compress_temporal(
    frames: np.ndarray,
    factor: int,
    proj: Linear,
    patch: int = DEFAULT_PATCH,
    T_max: int | None = None,
) -> TokenGrid:
    """Pack ``factor`` consecutive frames per view into tokens and project to width d."""
    raw = patchify_temporal(frames, factor, patch)
    V, T, H, W, D = raw.shape
    if proj.weight.shape[0] != D:
        raise ValueError(f"projection expects width {proj.weight.shape[0]}, tokens have {D}")
    d = proj.weight.shape[1]
    out = proj(Tensor(raw.reshape(V * T * H * W, D)))
    return TokenGrid(GridShape(V, T, H, W, d, T_max or T), out)
