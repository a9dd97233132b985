"""Feedforward 4D Gaussian reconstruction from a synchronized multi-view video.

A small alternating-attention backbone sees the source frames of a time
chunk, one learned camera token per frame. Each unit runs frame attention,
global attention across the views of one timestep, and temporal attention
across timesteps for a fixed view and token slot. Temporal attention starts
with a zero output projection so a fresh (or static-stage) model treats every
timestep independently.

After the last unit the camera tokens of every timestep are overwritten by
those of the first timestep, so each view gets one camera for the whole
chunk. Heads then predict cameras, per-pixel depth and per-pixel Gaussian
attributes; depth unprojected through the predicted camera gives the
Gaussian centroids.

Everything lives in a canonical frame: camera 0 is the identity and the unit
of length is the mean distance of foreground points from camera 0.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .attention import AttentionConfig, attention_dense
from .autodiff import Adam, LayerNorm, Linear, MLP, Module, Parameter, Tensor, backward, checkpoint, no_grad, ops
from .camera import Camera, rotmat_to_quat
from .scenes import FAR_DEPTH, Scene4D
from .splat import GaussianSet, quat_to_rotmat_t, rasterize

log = logging.getLogger(__name__)

GAUSSIAN_CHANNELS = 14  # 3 offset, 1 opacity, 3 scale, 4 rotation, 3 color
MAX_VIEWS = 16
DEPTH_FLOOR = 1e-3
OPACITY_EPS = 1e-6
SCALE_RAW_RANGE = (-8.0, 2.0)
OFFSET_BOUND = 0.05  # fraction of the (unit) canonical scene scale
COLOR_RANGE = 0.5
FG_DEPTH = FAR_DEPTH / 2  # pixels nearer than this carry scene content
INIT_DEPTH = 1.0


@dataclass
class ReconConfig:
    patch: int = 4
    d: int = 64
    blocks: int = 4
    heads: int = 4
    lambda_perceptual: float = 0.1
    source_views: int = 4
    timesteps: int = 4
    image_size: int = 32
    w_camera: float = 1.0
    w_depth: float = 0.5
    w_alpha: float = 1.0

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if self.image_size % self.patch:
            raise ValueError("image_size must be a multiple of patch")

    @property
    def patches(self) -> int:
        return (self.image_size // self.patch) ** 2


@dataclass
class BackboneState:
    image_tokens: Tensor  # [V, T, P, d]
    camera_tokens: Tensor  # [V, T, d]
    pixels: np.ndarray | None = None  # [V, T, P, patch*patch*3] raw patches for the dense heads

    @property
    def V(self) -> int:
        return self.camera_tokens.shape[0]

    @property
    def T(self) -> int:
        return self.camera_tokens.shape[1]


# -- layers ---------------------------------------------------------------------------

class Attention(Module):
    """Unmasked multi-head attention over the second-to-last axis."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, zero_out: bool = False):
        self.norm = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng, zero=zero_out)
        self._cfg = AttentionConfig(heads, d // heads)

    def forward(self, x: Tensor) -> Tensor:
        d = x.shape[-1]
        qkv = self.qkv(self.norm(x))
        y = attention_dense(qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :], self._cfg)
        return ops.add(x, self.out(y))


class FeedForward(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.norm = LayerNorm(d)
        self.mlp = MLP(d, 4 * d, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(x, self.mlp(self.norm(x)))


class AlternatingUnit(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.frame = Attention(d, heads, rng)
        self.frame_ff = FeedForward(d, rng)
        self.glob = Attention(d, heads, rng)
        self.glob_ff = FeedForward(d, rng)
        self.temporal = Attention(d, heads, rng, zero_out=True)

    def forward(self, x: Tensor) -> Tensor:
        V, T, L, d = x.shape
        x = self.frame_ff(self.frame(x))  # attention inside each [L] frame
        g = ops.reshape(ops.permute(x, (1, 0, 2, 3)), (T, V * L, d))
        g = self.glob_ff(self.glob(g))
        x = ops.permute(ops.reshape(g, (T, V, L, d)), (1, 0, 2, 3))
        if T == 1:
            return x  # a single timestep attends only to itself; zero-init out makes this exact anyway
        tt = ops.permute(x, (0, 2, 1, 3))  # [V, L, T, d]
        tt = self.temporal(tt)
        return ops.permute(tt, (0, 2, 1, 3))


def patchify_frames(images: np.ndarray, patch: int) -> np.ndarray:
    """[V, T, H, W, 3] -> [V, T, P, patch*patch*3], patches row-major."""
    V, T, H, W, C = images.shape
    h, w = H // patch, W // patch
    x = images.reshape(V, T, h, patch, w, patch, C).transpose(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(V, T, h * w, patch * patch * C)


def unpatchify_maps(x: Tensor, H: int, W: int, patch: int, channels: int) -> Tensor:
    """[..., P, patch*patch*channels] -> [..., H, W, channels]."""
    lead = x.shape[:-2]
    h, w = H // patch, W // patch
    nd = len(lead)
    y = ops.reshape(x, lead + (h, w, patch, patch, channels))
    y = ops.permute(y, tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3, nd + 4))
    return ops.reshape(y, lead + (H, W, channels))


class ReconModel(Module):
    def __init__(self, cfg: ReconConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        d, p = cfg.d, cfg.patch
        self.patch_embed = Linear(p * p * 3, d, rng)
        self.pos_embed = Parameter(rng.normal(0.0, 0.02, (cfg.patches, d)))
        self.camera_token = Parameter(rng.normal(0.0, 0.02, (d,)))
        self.view_slot = Parameter(np.zeros((MAX_VIEWS, d)))
        self.units = [AlternatingUnit(d, cfg.heads, rng) for _ in range(cfg.blocks)]
        self.norm_out = LayerNorm(d)
        self.camera_head = MLP(d, d, 8, rng)
        pix = p * p * 3
        self.depth_head = MLP(d + pix, d, p * p, rng)
        self.gaussian_head = MLP(d + pix, d, p * p * GAUSSIAN_CHANNELS, rng, zero_out=True)
        # start near the identity camera with focal ~ image width and depth ~ INIT_DEPTH
        self.camera_head.fc2.bias.data[:] = [1, 0, 0, 0, 0, 0, 0, np.log(np.expm1(1.0))]
        self.depth_head.fc2.bias.data[:] = np.log(np.expm1(INIT_DEPTH))
        self.assign_names("recon")

    def temporal_parameters(self) -> list[Parameter]:
        return [p for u in self.units for p in u.temporal.parameters()]

    def stage_parameters(self, stage: str) -> list[Parameter]:
        temporal = {id(p) for p in self.temporal_parameters()}
        if stage == "static":
            return [p for p in self.parameters() if id(p) not in temporal]
        if stage == "dynamic":
            return self.temporal_parameters() + self.gaussian_head.parameters()
        raise ValueError(f"unknown stage {stage!r}")

    # -- backbone --

    def backbone_forward(self, images: np.ndarray) -> BackboneState:
        images = np.asarray(images, np.float32)
        if images.ndim != 5 or images.shape[-1] != 3:
            raise ValueError(f"expected images [V, T, H, W, 3], got {images.shape}")
        V, T, H, W, _ = images.shape
        if H != self.cfg.image_size or W != self.cfg.image_size:
            raise ValueError(f"frame extent {H}x{W} != configured {self.cfg.image_size}")
        if V > MAX_VIEWS:
            raise ValueError(f"at most {MAX_VIEWS} views")
        d = self.cfg.d
        pixels = patchify_frames(images, self.cfg.patch)
        x = ops.add(self.patch_embed(Tensor(pixels)), self.pos_embed)
        cam = ops.add(ops.reshape(self.camera_token, (1, 1, 1, d)), ops.reshape(self.view_slot[:V], (V, 1, 1, d)))
        cam = ops.mul(cam, np.ones((V, T, 1, d), np.float32))
        x = ops.concat([cam, x], axis=2)
        for unit in self.units:
            x = unit(x)
        x = self.norm_out(x)
        return BackboneState(x[:, :, 1:, :], x[:, :, 0, :], pixels)

    # -- heads --

    def camera_raw(self, state: BackboneState) -> Tensor:
        return self.camera_head(state.camera_tokens)

    def _dense_input(self, state: BackboneState) -> Tensor:
        # token plus its raw pixels: the high-resolution skip a DPT head would get
        return ops.concat([state.image_tokens, Tensor(state.pixels)], axis=-1)

    def depth_maps(self, state: BackboneState) -> Tensor:
        H = W = self.cfg.image_size
        raw = unpatchify_maps(self.depth_head(self._dense_input(state)), H, W, self.cfg.patch, 1)
        return ops.add(ops.softplus(ops.reshape(raw, raw.shape[:-1])), DEPTH_FLOOR)

    def gaussian_raw(self, state: BackboneState) -> Tensor:
        H = W = self.cfg.image_size
        return unpatchify_maps(self.gaussian_head(self._dense_input(state)), H, W, self.cfg.patch, GAUSSIAN_CHANNELS)


def replace_camera_tokens(state: BackboneState) -> BackboneState:
    """Every timestep of a view takes the camera token of its first timestep."""
    if state.T == 1:
        return state
    first = state.camera_tokens[:, 0:1, :]
    cams = ops.mul(first, np.ones((1, state.T, 1), np.float32))
    return BackboneState(state.image_tokens, cams, state.pixels)


# -- camera decoding ---------------------------------------------------------------------

def normalize_quaternion(q: Tensor) -> Tensor:
    """Unit quaternions along the last axis; zero rows become the identity."""
    n2 = ops.sum(ops.square(q), axis=-1, keepdims=True)
    degenerate = n2.data < 1e-16
    if degenerate.any():
        warnings.warn("zero quaternion replaced by the identity rotation", RuntimeWarning, stacklevel=2)
        ident = np.zeros(q.shape, np.float32)
        ident[..., 0] = 1
        q = ops.where(np.broadcast_to(degenerate, q.shape), Tensor(ident), q)
        n2 = ops.sum(ops.square(q), axis=-1, keepdims=True)
    return ops.div(q, ops.sqrt(n2))


@dataclass
class CameraTensors:
    """Differentiable cameras for V views: q [V, 4], t [V, 3], focal [V]."""

    q: Tensor
    t: Tensor
    focal: Tensor
    width: int
    height: int

    def rotmats(self) -> Tensor:
        return quat_to_rotmat_t(self.q)

    def to_cameras(self) -> list[Camera]:
        out = []
        for v in range(self.q.shape[0]):
            q = self.q.data[v].astype(np.float64)
            out.append(Camera(q / np.linalg.norm(q), self.t.data[v], float(self.focal.data[v]), (self.width / 2, self.height / 2), self.width, self.height))
        return out


def camera_head(raw: Tensor, width: int, height: int | None = None) -> CameraTensors:
    """Decode 8 raw values per view: quaternion (4), translation (3), focal (1)."""
    q = normalize_quaternion(raw[..., 0:4])
    focal = ops.scale(ops.softplus(raw[..., 7]), float(width))
    return CameraTensors(q, raw[..., 4:7], focal, width, height or width)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def canonicalize(cameras: list[Camera], scale: float = 1.0) -> list[Camera]:
    """Rigidly move (and optionally rescale) a rig so camera 0 is the identity at the origin."""
    ref = cameras[0]
    q0_inv = ref.rotation * np.array([1, -1, -1, -1])
    out = []
    for i, c in enumerate(cameras):
        if i == 0:
            q, t = np.array([1.0, 0, 0, 0]), np.zeros(3)
        else:
            q = quat_multiply(c.rotation, q0_inv)
            R = Camera(q / np.linalg.norm(q), np.zeros(3), 1.0, (0, 0), 1, 1).R
            t = (c.translation - R @ ref.translation) / scale
        out.append(Camera(q, t, c.focal, c.principal, c.width, c.height))
    return out


def canonicalize_tensors(cams: CameraTensors) -> tuple[Tensor, Tensor]:
    """Rotation matrices [V, 3, 3] and translations [V, 3] relative to view 0 (view 0 exactly identity)."""
    R = cams.rotmats()
    V = R.shape[0]
    eye = Tensor(np.eye(3, dtype=np.float32)[None])
    zero = Tensor(np.zeros((1, 3), np.float32))
    if V == 1:
        return eye, zero
    R0 = R[0]
    Rr = ops.matmul(R[1:], ops.transpose(R0))  # [V-1, 3, 3]
    t0 = cams.t[0]
    tr = ops.sub(cams.t[1:], ops.reshape(ops.matmul(Rr, ops.reshape(t0, (3, 1))), (V - 1, 3)))
    return ops.concat([eye, Rr], axis=0), ops.concat([zero, tr], axis=0)


# -- Gaussian decoding ------------------------------------------------------------------------

def pixel_coordinates(H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.meshgrid(np.arange(H, dtype=np.float32), np.arange(W, dtype=np.float32), indexing="ij")
    return u, v


def unproject_tensors(depth: Tensor, R: Tensor, t: Tensor, focal: Tensor) -> Tensor:
    """Per-view depth [V, H, W] through cameras (R [V,3,3], t [V,3], focal [V]) -> world points [V, H, W, 3]."""
    V, H, W = depth.shape
    u, v = pixel_coordinates(H, W)
    inv_f = ops.reshape(ops.div(1.0, focal), (V, 1, 1))
    x = ops.mul(ops.mul(depth, (u - W / 2)[None]), inv_f)
    y = ops.mul(ops.mul(depth, (v - H / 2)[None]), inv_f)
    pc = ops.stack([x, y, depth], axis=-1)  # [V, H, W, 3]
    pc = ops.sub(pc, ops.reshape(t, (V, 1, 1, 3)))
    # world = R^T (pc - t), row-vector form pc @ R
    return ops.reshape(ops.matmul(ops.reshape(pc, (V, H * W, 3)), R), (V, H, W, 3))


def gaussian_head(raw: Tensor, pixel_rgb: np.ndarray, centers: Tensor, depth: Tensor, focal: Tensor) -> GaussianSet:
    """Activate 14 raw channels per pixel into Gaussians.

    raw [..., 14], pixel_rgb [..., 3], centers [..., 3] (unprojected), depth [...],
    focal broadcastable to depth. Leading axes are flattened into one Gaussian axis.
    """
    if raw.shape[-1] != GAUSSIAN_CHANNELS:
        raise ValueError(f"gaussian head emits {GAUSSIAN_CHANNELS} channels, got {raw.shape[-1]}")
    n = int(np.prod(raw.shape[:-1]))
    raw = ops.reshape(raw, (n, GAUSSIAN_CHANNELS))
    offset = ops.scale(ops.tanh(raw[:, 0:3]), OFFSET_BOUND)
    opacity = ops.clip(ops.sigmoid(raw[:, 3]), OPACITY_EPS, 1 - OPACITY_EPS)
    footprint = ops.reshape(ops.div(depth, focal), (n, 1))
    scales = ops.mul(ops.exp(ops.clip(raw[:, 4:7], *SCALE_RAW_RANGE)), footprint)
    q = ops.add(raw[:, 7:11], np.array([1, 0, 0, 0], np.float32))
    rotations = normalize_quaternion(q)
    rgb = np.asarray(pixel_rgb, np.float32).reshape(n, 3)
    colors = ops.clip(ops.add(ops.scale(ops.tanh(raw[:, 11:14]), COLOR_RANGE), rgb), 0.0, 1.0)
    return GaussianSet(ops.add(ops.reshape(centers, (n, 3)), offset), scales, rotations, opacity, colors)


@dataclass
class ReconOutput:
    gaussians: list[GaussianSet]  # one per timestep
    cameras: CameraTensors  # raw decoded (pre-canonical) cameras
    R: Tensor  # canonical rotations [V, 3, 3]
    t: Tensor  # canonical translations [V, 3]
    depth: Tensor  # [V, T, H, W]
    state: BackboneState


def reconstruct_chunk(model: ReconModel, images: np.ndarray, replace_cameras: bool = True) -> ReconOutput:
    """Gaussians for every timestep of a [V, T, H, W, 3] source chunk."""
    V, T, H, W, _ = images.shape
    state = model.backbone_forward(images)
    if replace_cameras:
        state = replace_camera_tokens(state)
    cam_raw = model.camera_raw(state)[:, 0, :]  # identical across t after replacement
    cams = camera_head(cam_raw, W, H)
    R, t = canonicalize_tensors(cams)
    depth = model.depth_maps(state)  # [V, T, H, W]
    graw = model.gaussian_raw(state)  # [V, T, H, W, 14]
    sets = []
    for ti in range(T):
        d_t = depth[:, ti]
        centers = unproject_tensors(d_t, R, t, cams.focal)
        f = ops.reshape(cams.focal, (V, 1, 1))
        f = ops.mul(f, np.ones((V, H, W), np.float32))
        sets.append(gaussian_head(graw[:, ti], images[:, ti], centers, d_t, f))
    return ReconOutput(sets, cams, R, t, depth, state)


# -- ground truth in the canonical frame ----------------------------------------------------

@dataclass
class CanonicalFrame:
    reference: Camera
    scale: float

    def camera(self, cam: Camera) -> Camera:
        return canonicalize([self.reference, cam], self.scale)[1]


def canonical_frame(cameras: list[Camera], depths: np.ndarray) -> CanonicalFrame:
    """Frame anchored at cameras[0]; unit length = mean distance of foreground points from its origin.

    depths: [V, T, H, W] ground-truth depth of the views in ``cameras``.
    """
    ref = cameras[0]
    dists = []
    for v, cam in enumerate(cameras):
        uv = cam.pixel_grid()
        for dmap in depths[v]:
            fg = dmap < FG_DEPTH
            if fg.any():
                pts = cam.unproject(uv[fg], dmap[fg].astype(np.float64))
                dists.append(np.linalg.norm(pts - ref.center, axis=-1))
    scale = float(np.mean(np.concatenate(dists))) if dists else 1.0
    return CanonicalFrame(ref, scale)


# -- losses --------------------------------------------------------------------------------

def image_gradients(x) -> tuple[Tensor, Tensor]:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, np.float32))
    gx = ops.sub(x[:, 1:], x[:, :-1])
    gy = ops.sub(x[1:], x[:-1])
    return gx, gy


def recon_loss(rendered, target, lambda_perceptual: float = 0.1) -> Tensor:
    """MSE plus a gradient-difference term; images [H, W, C]."""
    r = rendered if isinstance(rendered, Tensor) else Tensor(np.asarray(rendered, np.float32))
    tg = np.asarray(target, r.dtype)
    if r.shape != tg.shape:
        raise ValueError(f"extent mismatch: {r.shape} vs {tg.shape}")
    loss = ops.mse(r, Tensor(tg))
    if lambda_perceptual:
        rx, ry = image_gradients(r)
        tx, ty = image_gradients(tg)
        grad = ops.add(ops.mean(ops.abs(ops.sub(rx, tx))), ops.mean(ops.abs(ops.sub(ry, ty))))
        loss = ops.add(loss, ops.scale(grad, lambda_perceptual))
    return loss


def camera_loss(out: ReconOutput, gt: list[Camera]) -> Tensor:
    """Squared error of canonical rotations, translations and normalized focal for views >= 1."""
    V = out.R.shape[0]
    W = gt[0].width
    Rg = np.stack([c.R for c in gt]).astype(np.float32)
    tg = np.stack([c.translation for c in gt]).astype(np.float32)
    fg = np.array([c.focal / W for c in gt], np.float32)
    lf = ops.mean(ops.square(ops.sub(ops.scale(out.cameras.focal, 1.0 / W), fg)))
    if V == 1:
        return lf
    lr = ops.mean(ops.square(ops.sub(out.R[1:], Rg[1:])))
    lt = ops.mean(ops.square(ops.sub(out.t[1:], tg[1:])))
    return ops.add(ops.add(lr, lt), lf)


def depth_loss(pred: Tensor, gt_depth: np.ndarray, scale: float) -> Tensor:
    """L1 on log depth in canonical units, foreground and background weighted equally.

    Background pixels carry the far sentinel. Without the balancing the few
    foreground pixels barely register against the background.
    """
    gt_depth = np.asarray(gt_depth, np.float64)
    target = (gt_depth / scale).astype(np.float32)
    err = ops.abs(ops.sub(ops.log(pred), np.log(target)))
    fg = gt_depth < FG_DEPTH
    parts = [ops.masked_mean(err, m.astype(np.float32)) for m in (fg, ~fg) if m.any()]
    return parts[0] if len(parts) == 1 else ops.scale(ops.add(*parts), 0.5)


# -- training ------------------------------------------------------------------------------

@dataclass
class ReconTrainConfig:
    iters: int = 500
    lr: float = 1e-3
    warmup: int = 50
    seed: int = 0
    targets_per_step: int = 1
    p_static: float = 0.25
    log_every: int = 50


class NonFiniteLoss(RuntimeError):
    pass


def split_views(V: int, n_sources: int) -> tuple[list[int], list[int]]:
    """Even-spaced source views, remaining views as held-out targets."""
    step = max(1, V // n_sources)
    src = list(range(0, V, step))[:n_sources]
    return src, [v for v in range(V) if v not in src]


def _chunk(scene: Scene4D, frames: list[int], static: bool) -> tuple[np.ndarray, np.ndarray]:
    imgs, deps = scene.images[:, frames], scene.depths[:, frames]
    if static:
        imgs = np.repeat(imgs[:, :1], len(frames), axis=1)
        deps = np.repeat(deps[:, :1], len(frames), axis=1)
    return imgs, deps


def training_loss(model: ReconModel, scene: Scene4D, frames: list[int], static: bool, sources: list[int], targets: list[int], rng: np.random.Generator, n_targets: int = 1) -> tuple[Tensor, dict]:
    cfg = model.cfg
    imgs, deps = _chunk(scene, frames, static)
    src_cams = [scene.cameras[v] for v in sources]
    frame = canonical_frame(src_cams, deps[sources])
    out = reconstruct_chunk(model, imgs[sources])
    bg = scene.background
    parts = {}
    photo = None
    chosen = rng.choice(len(targets), size=min(n_targets, len(targets)), replace=False)
    for ti in range(len(frames)):
        for j in chosen:
            tv = targets[j]
            cam = frame.camera(scene.cameras[tv])
            r = rasterize(out.gaussians[ti], cam, bg)
            term = recon_loss(r.image, imgs[tv, ti], cfg.lambda_perceptual)
            if cfg.w_alpha:
                cover = (deps[tv, ti] < FG_DEPTH).astype(np.float32)
                term = ops.add(term, ops.scale(ops.mse(r.alpha, Tensor(cover)), cfg.w_alpha))
            photo = term if photo is None else ops.add(photo, term)
    photo = ops.scale(photo, 1.0 / (len(frames) * len(chosen)))
    gt_cams = canonicalize(src_cams, frame.scale)
    lc = camera_loss(out, gt_cams)
    ld = depth_loss(out.depth, deps[sources], frame.scale)
    total = ops.add(photo, ops.add(ops.scale(lc, cfg.w_camera), ops.scale(ld, cfg.w_depth)))
    parts.update(photo=photo.item(), camera=lc.item(), depth=ld.item())
    return total, parts


def train_recon(
    scenes: list[Scene4D],
    cfg: ReconConfig,
    stage: str,
    tc: ReconTrainConfig,
    model: ReconModel | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> tuple[ReconModel, list[float]]:
    """One training stage.

    ``static``: single-timestep chunks, temporal layers left untouched.
    ``dynamic``: ``cfg.timesteps``-frame chunks (some duplicated from one
    frame), only temporal attention and the Gaussian head are updated.
    """
    if not scenes:
        raise ValueError("training needs at least one scene")
    model = model or ReconModel(cfg, seed=tc.seed)
    opt = Adam(model.stage_parameters(stage), lr=tc.lr, warmup=tc.warmup)
    rng = np.random.default_rng([tc.seed, 3 if stage == "static" else 4])
    V = scenes[0].V
    sources, targets = split_views(V, cfg.source_views)
    if not targets:
        raise ValueError(f"{V} views with {cfg.source_views} sources leaves no held-out target view")
    losses = []
    for it in range(tc.iters):
        scene = scenes[int(rng.integers(len(scenes)))]
        Tp = scene.T
        if stage == "static":
            frames, static = [int(rng.integers(Tp))], True
        else:
            T = min(cfg.timesteps, Tp)
            start = int(rng.integers(Tp - T + 1))
            frames, static = list(range(start, start + T)), bool(rng.uniform() < tc.p_static)
        model.zero_grad()
        loss, parts = training_loss(model, scene, frames, static, sources, targets, rng, tc.targets_per_step)
        val = loss.item()
        if not np.isfinite(val):
            raise NonFiniteLoss(f"non-finite reconstruction loss {val} at {stage} iteration {it}: {parts}")
        backward(loss)
        opt.step()
        losses.append(val)
        if callback:
            callback(it, val)
        if tc.log_every and (it % tc.log_every == 0 or it == tc.iters - 1):
            log.info("recon %s iter %d loss %.5f %s", stage, it, val, {k: round(v, 5) for k, v in parts.items()})
    return model, losses


# -- inference and evaluation ---------------------------------------------------------------

def reconstruct(model: ReconModel, images: np.ndarray) -> tuple[list[GaussianSet], list[Camera]]:
    """Numpy Gaussians per timestep of a [V, T_px, H, W, 3] source video, processed in chunks."""
    V, Tp = images.shape[:2]
    step = model.cfg.timesteps
    sets: list[GaussianSet] = []
    cams: list[Camera] = []
    with no_grad():
        for s in range(0, Tp, step):
            out = reconstruct_chunk(model, images[:, s : s + step])
            sets.extend(g.numpy() for g in out.gaussians)
            if not cams:
                cams = canonical_cameras(out)
    return sets, cams


def canonical_cameras(out: ReconOutput) -> list[Camera]:
    raw = out.cameras
    cams = []
    for v in range(out.R.shape[0]):
        q = rotmat_to_quat(out.R.data[v].astype(np.float64))
        cams.append(Camera(q, out.t.data[v], float(raw.focal.data[v]), (raw.width / 2, raw.height / 2), raw.width, raw.height))
    return cams


def render_views(gaussians: list[GaussianSet], cameras: list[Camera], background) -> np.ndarray:
    """[len(cameras), T, H, W, 3] renders of each timestep's Gaussians."""
    out = []
    for cam in cameras:
        out.append([np.clip(rasterize(g, cam, background).image.data, 0, 1) for g in gaussians])
    return np.asarray(out, np.float32)


def depth_warp_baseline(scene: Scene4D, sources: list[int], target: int) -> np.ndarray:
    """Forward-warp the nearest source view into ``target`` using ground-truth depth.

    Foreground pixels are splatted to their nearest target pixel with a
    z-buffer; uncovered pixels show the background colour. Returns [T, H, W, 3].
    """
    tcam = scene.cameras[target]
    nearest = min(sources, key=lambda s: np.linalg.norm(scene.cameras[s].center - tcam.center))
    scam = scene.cameras[nearest]
    T, H, W = scene.images.shape[1:4]
    uv = scam.pixel_grid()
    out = np.empty((T, H, W, 3), np.float32)
    for t in range(T):
        img = np.broadcast_to(np.asarray(scene.background, np.float32), (H, W, 3)).copy()
        zbuf = np.full((H, W), np.inf)
        dmap = scene.depths[nearest, t]
        fg = dmap < FG_DEPTH
        pts = scam.unproject(uv[fg], dmap[fg].astype(np.float64))
        cols = scene.images[nearest, t][fg]
        pix, z = tcam.project(pts)
        j = np.rint(pix[:, 0]).astype(int)
        i = np.rint(pix[:, 1]).astype(int)
        ok = (z > 0) & (i >= 0) & (i < H) & (j >= 0) & (j < W)
        for k in np.nonzero(ok)[0][np.argsort(-z[ok], kind="stable")]:
            # far-to-near so nearer points overwrite
            if z[k] <= zbuf[i[k], j[k]]:
                zbuf[i[k], j[k]] = z[k]
                img[i[k], j[k]] = cols[k]
        out[t] = img
    return out


@dataclass
class NovelViewScores:
    recon_psnr: float
    baseline_psnr: float

    @property
    def margin(self) -> float:
        return self.recon_psnr - self.baseline_psnr


def evaluate_novel_views(model: ReconModel, scenes: list[Scene4D], source_images: list[np.ndarray] | None = None) -> NovelViewScores:
    """Mean PSNR over held-out target views for the model and the depth-warp baseline.

    ``source_images`` optionally replaces each scene's source-view pixels (for
    instance with generated grids); cameras and scale stay ground truth.
    """
    from .metrics import psnr

    rec, base = [], []
    for i, scene in enumerate(scenes):
        sources, targets = split_views(scene.V, model.cfg.source_views)
        imgs = scene.images[sources] if source_images is None else source_images[i]
        sets, _ = reconstruct(model, imgs)
        frame = canonical_frame([scene.cameras[s] for s in sources], scene.depths[sources])
        cams = [frame.camera(scene.cameras[t]) for t in targets]
        renders = render_views(sets, cams, scene.background)
        for k, tv in enumerate(targets):
            warped = depth_warp_baseline(scene, sources, tv)
            for t in range(scene.T):
                rec.append(psnr(renders[k, t], scene.images[tv, t]))
                base.append(psnr(warped[t], scene.images[tv, t]))
    return NovelViewScores(float(np.mean(rec)), float(np.mean(base)))


# -- persistence -----------------------------------------------------------------------------

def save_recon(path, model: ReconModel) -> None:
    from .io import write_config

    checkpoint.save(path, model.state_dict())
    write_config(str(path) + ".cfg", {"recon": asdict(model.cfg)})


def load_recon(path) -> ReconModel:
    from .io import read_config

    cfg = ReconConfig(**read_config(str(path) + ".cfg")["recon"])
    model = ReconModel(cfg)
    model.load_state_dict(checkpoint.load(path))
    return model
