"""Toy DiT denoiser over 4D token grids, trained with rectified flow.

Latents are temporally patchified pixels scaled to [-1, 1]:
``x0 = patchify_temporal(2*frames - 1)``. The noise path is
``x_tau = (1 - tau) * x0 + tau * eps`` and the network regresses the
velocity ``eps - x0``. Reference frames condition the model by adding their
patch embeddings at conditioned cells; those cells are held at their clean
latents both in training inputs and after every sampling step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .attention import AttentionConfig, GridContext, make_attention_block
from .autodiff import Adam, LayerNorm, Linear, MLP, Module, Tensor, backward, checkpoint, no_grad, ops
from .grid import GridShape, patchify_temporal, unpatchify_temporal
from .metrics import psnr
from .scenes import Scene4D, homography_augment, make_static_4d

log = logging.getLogger(__name__)

ARCHS = ("fused", "sequential", "parallel")
COND_PATTERNS = ("fixed", "freeze", "both")


@dataclass
class DenoiserConfig:
    blocks: int = 4
    d: int = 64
    heads: int = 4
    arch: str = "fused"
    compression_factor: int = 4
    T_max: int = 8
    patch: int = 4
    channels: int = 3
    mlp_ratio: int = 4
    attn_impl: str = "sparse"
    position_mode: str = "collapse"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")

    @property
    def token_width(self) -> int:
        return self.compression_factor * self.patch * self.patch * self.channels


@dataclass
class FlowSchedule:
    steps: int = 40
    cfg_scale: float = 0.0
    timesteps: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one step")
        if self.timesteps is None:
            self.timesteps = np.linspace(1.0, 0.0, self.steps + 1)
        ts = np.asarray(self.timesteps, dtype=np.float64)
        if len(ts) != self.steps + 1 or not np.all(np.diff(ts) < 0) or ts[0] > 1 or ts[-1] != 0.0 or ts[0] <= 0:
            raise ValueError("timesteps must decrease strictly from (0, 1] to 0")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        self.timesteps = ts


@dataclass
class ConditioningSpec:
    """Reference pixels and the latent cells they pin.

    ``fixed_view`` is the full video of view 0, [T_px, H, W, 3].
    ``freeze_time`` holds, for every view, the frames packed into latent
    step 0, [V, factor, H, W, 3].
    """

    cell_mask: np.ndarray  # [V, T] bool
    fixed_view: np.ndarray | None = None
    freeze_time: np.ndarray | None = None

    @classmethod
    def from_grid(cls, frames: np.ndarray, pattern: str, factor: int) -> ConditioningSpec:
        """Conditioning drawn from a ground-truth pixel grid [V, T_px, H, W, 3]."""
        V, Tp = frames.shape[:2]
        mask = cell_mask_for(pattern, V, Tp // factor)
        fixed = frames[0] if pattern in ("fixed", "both") else None
        freeze = frames[:, :factor] if pattern in ("freeze", "both") else None
        return cls(mask, fixed, freeze)

    def reference_frames(self, V: int, Tp: int, H: int, W: int, factor: int) -> np.ndarray:
        ref = np.zeros((V, Tp, H, W, 3), np.float32)
        if self.fixed_view is not None:
            if self.fixed_view.shape != (Tp, H, W, 3):
                raise ValueError(f"fixed_view shape {self.fixed_view.shape} != {(Tp, H, W, 3)}")
            ref[0] = self.fixed_view
        if self.freeze_time is not None:
            if self.freeze_time.shape != (V, factor, H, W, 3):
                raise ValueError(f"freeze_time shape {self.freeze_time.shape} != {(V, factor, H, W, 3)}")
            ref[:, :factor] = self.freeze_time
        return ref


def cell_mask_for(pattern: str, V: int, T: int) -> np.ndarray:
    m = np.zeros((V, T), bool)
    if pattern in ("fixed", "both"):
        m[0, :] = True
    if pattern in ("freeze", "both"):
        m[:, 0] = True
    if pattern not in COND_PATTERNS + ("none",):
        raise ValueError(f"unknown conditioning pattern {pattern!r}")
    return m


def to_latents(frames: np.ndarray, factor: int, patch: int) -> np.ndarray:
    """Pixel grid [V, T_px, H, W, 3] in [0, 1] -> latents [V, T, h, w, C]."""
    return patchify_temporal(frames.astype(np.float32) * 2 - 1, factor, patch)


def from_latents(lat: np.ndarray, factor: int, patch: int) -> np.ndarray:
    return np.clip((unpatchify_temporal(lat, factor, patch) + 1) / 2, 0, 1)


def timestep_embedding(tau: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal embedding of tau*1000, [B] -> [B, d]."""
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(tau, np.float64)[:, None] * 1000.0 * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1).astype(np.float32)


class DiTBlock(Module):
    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        self.attn = make_attention_block(cfg.arch, cfg.d, cfg.heads, rng)
        self.norm_mlp = LayerNorm(cfg.d)
        self.mlp = MLP(cfg.d, cfg.mlp_ratio * cfg.d, cfg.d, rng)

    def forward(self, x: Tensor, ctx: GridContext) -> Tensor:
        x = self.attn(x, ctx)
        return ops.add(x, self.mlp(self.norm_mlp(x)))


class Denoiser(Module):
    """Velocity network: patch embedding, DiT blocks, zero-initialized output projection."""

    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        C = cfg.token_width
        self.embed = Linear(C, cfg.d, rng)
        self.cond_embed = Linear(C, cfg.d, rng)
        self.time_mlp = MLP(cfg.d, cfg.d, cfg.d, rng)
        self.blocks = [DiTBlock(cfg, rng) for _ in range(cfg.blocks)]
        self.norm_out = LayerNorm(cfg.d)
        self.final = Linear(cfg.d, C, rng, zero=True)
        # per-channel, time-dependent pass-through of the noised input; with token
        # width above d the blocks alone cannot carry the noise to the output
        self.skip_gate = Linear(cfg.d, C, rng, zero=True)
        self.assign_names("denoiser")
        self._ctx_cache: dict = {}

    def context(self, V: int, T: int, H: int, W: int) -> GridContext:
        key = (V, T, H, W)
        if key not in self._ctx_cache:
            cfg = self.cfg
            shape = GridShape(V, T, H, W, cfg.d, max(cfg.T_max, T))
            self._ctx_cache[key] = GridContext(shape, AttentionConfig(cfg.heads, cfg.d // cfg.heads), cfg.position_mode, cfg.attn_impl)
        return self._ctx_cache[key]

    def forward(self, x, tau, cond: np.ndarray | None, cell_mask: np.ndarray | None) -> Tensor:
        """x, cond: [B, V, T, h, w, C] latents; tau: [B]; cell_mask: [B, V, T]."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        B, V, T, H, W, C = x.shape
        if C != self.cfg.token_width:
            raise ValueError(f"token width {C} != {self.cfg.token_width}")
        ctx = self.context(V, T, H, W)
        N = V * T * H * W
        h = self.embed(ops.reshape(x, (B, N, C)))
        if cell_mask is not None and np.any(cell_mask):
            if cond is None or cond.shape != x.shape:
                raise ValueError("conditioning latents must match the grid shape")
            if cell_mask.shape != (B, V, T):
                raise ValueError(f"cell_mask shape {cell_mask.shape} != {(B, V, T)}")
            tok_mask = np.broadcast_to(cell_mask[:, :, :, None, None], (B, V, T, H, W)).reshape(B, N, 1)
            ce = self.cond_embed(Tensor(cond.reshape(B, N, C)))
            h = ops.add(h, ops.mul(ce, tok_mask.astype(np.float32)))
        temb = self.time_mlp(Tensor(timestep_embedding(np.asarray(tau).reshape(B), self.cfg.d)))
        h = ops.add(h, ops.reshape(temb, (B, 1, self.cfg.d)))
        for blk in self.blocks:
            h = blk(h, ctx)
        out = ops.reshape(self.final(self.norm_out(h)), (B, V, T, H, W, C))
        gate = ops.reshape(self.skip_gate(temb), (B, 1, 1, 1, 1, C))
        return ops.add(out, ops.mul(gate, x))

    def velocity(self, x: np.ndarray, tau: float, cond: np.ndarray | None, cell_mask: np.ndarray | None) -> np.ndarray:
        """Single-grid numpy convenience wrapper used by the sampler."""
        with no_grad():
            cm = None if cell_mask is None else cell_mask[None]
            cd = None if cond is None else cond[None]
            return self.forward(x[None], np.array([tau]), cd, cm).data[0]


# -- objective ---------------------------------------------------------------------

def rf_interpolate(clean: np.ndarray, eps: np.ndarray, tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float32).reshape((-1,) + (1,) * (clean.ndim - 1)) if np.ndim(tau) else np.float32(tau)
    return (1 - tau) * clean + tau * eps


def rf_loss(
    model: Callable,
    clean: np.ndarray,
    cell_mask: np.ndarray,
    rng: np.random.Generator | int,
    tau: np.ndarray | None = None,
    eps: np.ndarray | None = None,
) -> Tensor:
    """Rectified-flow velocity regression on unconditioned cells.

    clean: [B, V, T, h, w, C]; cell_mask: [B, V, T]. ``model(x, tau, cond, mask)``
    returns a Tensor of the same shape as ``clean``.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    B = clean.shape[0]
    if eps is None:
        eps = rng.standard_normal(clean.shape).astype(np.float32)
    if tau is None:
        tau = rng.uniform(0.0, 1.0, B).astype(np.float32)
    x = rf_interpolate(clean, eps, tau)
    cm = cell_mask[:, :, :, None, None, None]
    x = np.where(cm, clean, x).astype(np.float32)
    target = (eps - clean).astype(np.float32)
    pred = model(x, tau, clean, cell_mask)
    weights = np.broadcast_to(~cm, clean.shape)
    if not weights.any():
        raise ValueError("every cell is conditioned; nothing to supervise")
    diff = ops.sub(pred, Tensor(target))
    return ops.masked_mean(ops.square(diff), weights)


# -- sampling -------------------------------------------------------------------------

def rf_sample(
    model: Callable[[np.ndarray, float, np.ndarray | None, np.ndarray | None], np.ndarray],
    shape: tuple[int, ...],
    cond: np.ndarray | None,
    cell_mask: np.ndarray | None,
    schedule: FlowSchedule,
    seed: int,
) -> tuple[np.ndarray, dict]:
    """Euler integration of the learned velocity from tau=1 to tau=0.

    ``model(x, tau, cond, cell_mask)`` returns the velocity as an array. With
    ``cfg_scale > 0`` an unconditional pass (empty cell mask) is mixed in as
    ``v_u + s * (v_c - v_u)``. Conditioned cells are reset to ``cond`` after
    every step.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(np.float32)
    pin = None
    if cell_mask is not None and cell_mask.any():
        pin = np.broadcast_to(cell_mask.reshape(cell_mask.shape + (1,) * (len(shape) - cell_mask.ndim)), shape)
        x = np.where(pin, cond, x).astype(np.float32)
    evals = 0
    ts = schedule.timesteps
    for i in range(schedule.steps):
        t_cur, t_next = float(ts[i]), float(ts[i + 1])
        v = model(x, t_cur, cond, cell_mask)
        evals += 1
        if schedule.cfg_scale > 0:
            empty = None if cell_mask is None else np.zeros_like(cell_mask)
            vu = model(x, t_cur, cond, empty)
            evals += 1
            v = vu + schedule.cfg_scale * (v - vu)
        x = (x - (t_cur - t_next) * v).astype(np.float32)
        if pin is not None:
            x = np.where(pin, cond, x).astype(np.float32)
    return x, {"steps": schedule.steps, "model_evals": evals, "cfg_scale": schedule.cfg_scale}


# -- training ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    iters: int = 1000
    lr: float = 3e-4
    warmup: int = 100
    batch: int = 1
    seed: int = 0
    reverse_views: bool = True
    drop_cond_for_static: bool = True
    p_homography: float = 0.2
    p_static: float = 0.2
    p_uncond: float = 0.1
    log_every: int = 50


class NonFiniteLoss(RuntimeError):
    pass


def _training_sample(scenes: list[Scene4D], cfg: DenoiserConfig, tc: TrainConfig, rng: np.random.Generator):
    """One (pixel grid, conditioning pattern) draw with the data augmentations."""
    sc = scenes[int(rng.integers(len(scenes)))]
    frames = sc.images
    V, Tp = frames.shape[:2]
    static = sc.static
    u = rng.uniform()
    if u < tc.p_homography:
        frames = homography_augment(frames[0], V, int(rng.integers(2**31)))
    elif u < tc.p_homography + tc.p_static:
        frames = make_static_4d(frames[:, 0], Tp).images
        static = True
    if tc.reverse_views and rng.uniform() < 0.5:
        frames = frames[::-1]
    pattern = COND_PATTERNS[int(rng.integers(3))]
    T = Tp // cfg.compression_factor
    mask = cell_mask_for(pattern, V, T)
    if static and tc.drop_cond_for_static:
        # a pinned first column makes static grids a trivial copy along time
        mask[:, 0] = False
        mask[0, :] = True
    if rng.uniform() < tc.p_uncond:
        mask[:] = False
    return np.ascontiguousarray(frames), mask


def train_denoiser(
    scenes: list[Scene4D],
    cfg: DenoiserConfig,
    tc: TrainConfig,
    model: Denoiser | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> tuple[Denoiser, list[float]]:
    if not scenes:
        raise ValueError("training needs at least one scene")
    model = model or Denoiser(cfg, seed=tc.seed)
    opt = Adam(model.parameters(), lr=tc.lr, warmup=tc.warmup)
    rng = np.random.default_rng([tc.seed, 1])
    losses = []
    for it in range(tc.iters):
        batch, masks = [], []
        for _ in range(tc.batch):
            frames, mask = _training_sample(scenes, cfg, tc, rng)
            batch.append(to_latents(frames, cfg.compression_factor, cfg.patch))
            masks.append(mask)
        clean = np.stack(batch)
        cm = np.stack(masks)
        opt.zero_grad()
        loss = rf_loss(model, clean, cm, rng)
        val = loss.item()
        if not np.isfinite(val):
            raise NonFiniteLoss(f"non-finite loss {val} at iteration {it}")
        backward(loss)
        opt.step()
        losses.append(val)
        if callback:
            callback(it, val)
        if tc.log_every and (it % tc.log_every == 0 or it == tc.iters - 1):
            log.info("diffusion iter %d loss %.5f", it, val)
    return model, losses


def sample_grid(model: Denoiser, frames_gt: np.ndarray | None, cond: ConditioningSpec, grid_px: tuple[int, int, int, int], schedule: FlowSchedule, seed: int):
    """Sample a pixel grid [V, T_px, H, W, 3] given reference frames."""
    cfg = model.cfg
    V, Tp, H, W = grid_px
    f, p = cfg.compression_factor, cfg.patch
    ref = cond.reference_frames(V, Tp, H, W, f)
    cond_lat = to_latents(ref, f, p)
    lat, info = rf_sample(model.velocity, cond_lat.shape, cond_lat, cond.cell_mask, schedule, seed)
    return from_latents(lat, f, p), info


def grid_psnr(model: Denoiser, scenes: list[Scene4D], schedule: FlowSchedule, seed: int, pattern: str = "both") -> float:
    """Mean PSNR over the generated (unconditioned) cells of held-out grids."""
    cfg = model.cfg
    f = cfg.compression_factor
    vals = []
    for i, sc in enumerate(scenes):
        V, Tp, H, W = sc.images.shape[:4]
        cond = ConditioningSpec.from_grid(sc.images, pattern, f)
        out, _ = sample_grid(model, sc.images, cond, (V, Tp, H, W), schedule, seed + i)
        free = ~np.repeat(cond.cell_mask, f, axis=1)
        vals.append(psnr(out[free], sc.images[free]))
    return float(np.mean(vals))


# -- persistence ----------------------------------------------------------------------

def save_denoiser(path, model: Denoiser) -> None:
    from .io import write_config

    checkpoint.save(path, model.state_dict())
    write_config(str(path) + ".cfg", {"denoiser": asdict(model.cfg)})


def load_denoiser(path) -> Denoiser:
    from .io import read_config

    cfg = DenoiserConfig(**read_config(str(path) + ".cfg")["denoiser"])
    model = Denoiser(cfg)
    model.load_state_dict(checkpoint.load(path))
    return model


# -- 1-D toy flow ------------------------------------------------------------------------
# Noise N(0, 1) at tau=1, data N(mu, sigma^2) at tau=0.

@dataclass(frozen=True)
class Gaussian1D:
    mu: float = 2.0
    sigma: float = 0.5


def toy_optimal_velocity(x: np.ndarray, tau: np.ndarray | float, target: Gaussian1D) -> np.ndarray:
    """E[eps - x0 | x_tau = x] under independent coupling of noise and data."""
    tau = np.asarray(tau, dtype=np.float64)
    mu, s2 = target.mu, target.sigma**2
    var = (1 - tau) ** 2 * s2 + tau**2
    gain = (tau - (1 - tau) * s2) / var
    return -mu + gain * (np.asarray(x, np.float64) - (1 - tau) * mu)


def toy_transport(eps: np.ndarray, target: Gaussian1D) -> np.ndarray:
    """Closed-form monotone map from noise to data."""
    return target.mu + target.sigma * np.asarray(eps, np.float64)


class ToyVelocity(Module):
    """Two-hidden-layer MLP on (x, tau) features."""

    def __init__(self, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.inp = Linear(4, hidden, rng)
        self.mid = Linear(hidden, hidden, rng)
        self.out = Linear(hidden, 1, rng)

    @staticmethod
    def features(x: np.ndarray, tau: np.ndarray) -> np.ndarray:
        x = np.asarray(x, np.float32).reshape(-1)
        tau = np.broadcast_to(np.asarray(tau, np.float32), x.shape)
        return np.stack([x, tau, x * tau, np.sin(np.pi * tau)], axis=1).astype(np.float32)

    def forward(self, x, tau) -> Tensor:
        h = ops.gelu(self.inp(Tensor(self.features(x, tau))))
        h = ops.gelu(self.mid(h))
        return ops.reshape(self.out(h), (-1,))

    def velocity(self, x: np.ndarray, tau: float, cond=None, cell_mask=None) -> np.ndarray:
        with no_grad():
            return self.forward(x, tau).data.reshape(np.shape(x))


def train_toy_flow(target: Gaussian1D, steps: int = 3000, batch: int = 256, lr: float = 3e-3, seed: int = 0) -> tuple[ToyVelocity, list[float]]:
    model = ToyVelocity(seed=seed)
    opt = Adam(model.parameters(), lr=lr, warmup=100, decay_steps=steps)
    rng = np.random.default_rng([seed, 2])
    losses = []
    for step in range(steps):
        x0 = (target.mu + target.sigma * rng.standard_normal(batch)).astype(np.float32)
        eps = rng.standard_normal(batch).astype(np.float32)
        tau = rng.uniform(0, 1, batch).astype(np.float32)
        xt = (1 - tau) * x0 + tau * eps
        opt.zero_grad()
        loss = ops.mse(model(xt, tau), Tensor(eps - x0))
        backward(loss)
        opt.step()
        losses.append(loss.item())
    return model, losses


def toy_sample_stats(model: Callable, n: int, steps: int, seed: int) -> tuple[float, float]:
    x, _ = rf_sample(model, (n,), None, None, FlowSchedule(steps), seed)
    return float(np.mean(x)), float(np.var(x))
