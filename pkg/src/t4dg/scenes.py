"""Synthetic 4D ground truth: animated Gaussian blobs seen by an orbiting rig,
plus the 2D-homography and static-duplication augmentations."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import checkpoint, no_grad
from .camera import Camera, look_at_camera
from .io import read_config, read_ppm, write_config, write_ppm
from .splat import GaussianSet, rasterize

FAR_DEPTH = 100.0


@dataclass
class SceneConfig:
    """Sampling distributions for generate_dataset."""

    size: int = 32
    radius: float = 4.0
    elevation_deg: float = 20.0
    min_blobs: int = 1
    max_blobs: int = 3
    center_range: float = 0.7
    path_std: tuple[float, float, float] = (0.5, 0.25, 0.1)  # linear, quadratic, cubic
    scale_range: tuple[float, float] = (0.25, 0.45)
    opacity_range: tuple[float, float] = (0.75, 1.0)
    color_range: tuple[float, float] = (0.15, 1.0)
    background: tuple[float, float, float] = (0.1, 0.1, 0.12)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class BlobSceneSpec:
    path_coeffs: np.ndarray  # [K, 4, 3]: center(t) = sum_i c_i t^i
    colors: np.ndarray  # [K, 3]
    scales: np.ndarray  # [K]
    opacities: np.ndarray  # [K]
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.path_coeffs = np.asarray(self.path_coeffs, np.float64).reshape(-1, 4, 3)
        self.colors = np.asarray(self.colors, np.float64).reshape(-1, 3)
        self.scales = np.asarray(self.scales, np.float64).reshape(-1)
        self.opacities = np.asarray(self.opacities, np.float64).reshape(-1)
        self.background = np.asarray(self.background, np.float64).reshape(3)
        if np.any(self.scales <= 0):
            raise ValueError("blob scales must be positive")
        if np.any((self.opacities <= 0) | (self.opacities > 1)):
            raise ValueError("blob opacity must lie in (0, 1]")

    @property
    def K(self) -> int:
        return len(self.scales)

    def centers_at(self, t: float) -> np.ndarray:
        powers = np.array([1.0, t, t * t, t * t * t])
        return np.einsum("i,kij->kj", powers, self.path_coeffs)

    def gaussians_at(self, t: float) -> GaussianSet:
        K = self.K
        rot = np.tile([1.0, 0.0, 0.0, 0.0], (K, 1))
        return GaussianSet(self.centers_at(t), np.repeat(self.scales[:, None], 3, axis=1), rot, self.opacities, self.colors)


@dataclass
class Scene4D:
    images: np.ndarray  # [V, T_px, H, W, 3] in [0, 1]
    depths: np.ndarray  # [V, T_px, H, W]
    cameras: list[Camera]
    spec: BlobSceneSpec | None = None
    static: bool = False

    @property
    def V(self) -> int:
        return self.images.shape[0]

    @property
    def T(self) -> int:
        return self.images.shape[1]

    @property
    def background(self) -> np.ndarray:
        return self.spec.background if self.spec is not None else np.zeros(3)

    def select_views(self, idx) -> Scene4D:
        idx = list(idx)
        return Scene4D(self.images[idx], self.depths[idx], [self.cameras[i] for i in idx], self.spec, self.static)


def frame_times(T_pixel: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, T_pixel) if T_pixel > 1 else np.zeros(1)


def make_orbit_cameras(
    V: int,
    radius: float = 4.0,
    elevation_deg: float = 20.0,
    look_at=(0.0, 0.0, 0.0),
    width: int = 32,
    height: int = 32,
    focal: float | None = None,
    azimuth_offset_deg: float = 0.0,
) -> list[Camera]:
    """V cameras evenly spaced in azimuth on a horizontal circle, view 0 at azimuth 0."""
    if V < 1 or radius <= 0:
        raise ValueError("need V >= 1 and radius > 0")
    look_at = np.asarray(look_at, dtype=np.float64)
    el = np.deg2rad(elevation_deg)
    cams = []
    for v in range(V):
        az = np.deg2rad(azimuth_offset_deg) + 2 * np.pi * v / V
        offset = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), -np.cos(el) * np.cos(az)])
        cams.append(look_at_camera(look_at + offset, look_at, width, height, focal))
    return cams


def render_scene(spec: BlobSceneSpec, camera: Camera, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Image and expected depth of the scene at time t.

    Depth is the alpha-weighted mean depth of the blobs covering a pixel,
    FAR_DEPTH where nothing does.
    """
    if spec.K == 0:
        img = np.broadcast_to(spec.background, (camera.height, camera.width, 3)).astype(np.float32)
        return img.copy(), np.full((camera.height, camera.width), FAR_DEPTH, np.float32)
    with no_grad():
        res = rasterize(spec.gaussians_at(t), camera, spec.background)
    acc = res.alpha.data.astype(np.float64)
    d = res.depth.data.astype(np.float64)
    depth = np.where(acc > 1e-6, d / np.maximum(acc, 1e-12), FAR_DEPTH)
    return res.image.data.astype(np.float32), depth.astype(np.float32)


def sample_spec(rng: np.random.Generator, cfg: SceneConfig) -> BlobSceneSpec:
    K = int(rng.integers(cfg.min_blobs, cfg.max_blobs + 1))
    coeffs = np.zeros((K, 4, 3))
    coeffs[:, 0] = rng.uniform(-cfg.center_range, cfg.center_range, (K, 3))
    for i, s in enumerate(cfg.path_std, start=1):
        coeffs[:, i] = rng.normal(0.0, s, (K, 3))
    return BlobSceneSpec(
        coeffs,
        rng.uniform(*cfg.color_range, (K, 3)),
        rng.uniform(*cfg.scale_range, K),
        rng.uniform(*cfg.opacity_range, K),
        np.asarray(cfg.background),
    )


def render_grid(spec: BlobSceneSpec, cameras: list[Camera], T_pixel: int) -> tuple[np.ndarray, np.ndarray]:
    ts = frame_times(T_pixel)
    H, W = cameras[0].height, cameras[0].width
    imgs = np.zeros((len(cameras), T_pixel, H, W, 3), np.float32)
    deps = np.zeros((len(cameras), T_pixel, H, W), np.float32)
    for v, cam in enumerate(cameras):
        for i, t in enumerate(ts):
            imgs[v, i], deps[v, i] = render_scene(spec, cam, float(t))
    return imgs, deps


def generate_dataset(n_scenes: int, V: int, T_pixel: int, seed: int, cfg: SceneConfig | None = None) -> list[Scene4D]:
    """Deterministic list of blob scenes; scene i draws from the stream (seed, i)."""
    cfg = cfg or SceneConfig()
    cams = make_orbit_cameras(V, cfg.radius, cfg.elevation_deg, width=cfg.size, height=cfg.size)
    out = []
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, i])
        spec = sample_spec(rng, cfg)
        imgs, deps = render_grid(spec, cams, T_pixel)
        out.append(Scene4D(imgs, deps, cams, spec))
    return out


# -- augmentations -------------------------------------------------------------------

def homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 H with dst ~ H @ src for four point pairs (h33 = 1)."""
    A, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.asarray(A, float), np.asarray(b, float))
    return np.append(h, 1.0).reshape(3, 3)


def warp_image(img: np.ndarray, Hm: np.ndarray) -> np.ndarray:
    """Warp so that output(p) = input(H^-1 p), bilinear, edge-clamped."""
    h, w = img.shape[:2]
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    pts = np.stack([u.ravel(), v.ravel(), np.ones(u.size)])
    src = np.linalg.inv(Hm) @ pts
    sx = np.clip(src[0] / src[2], 0, w - 1)
    sy = np.clip(src[1] / src[2], 0, h - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[:, None]
    fy = (sy - y0)[:, None]
    flat = img.reshape(h * w, -1).astype(np.float64)
    out = (
        flat[y0 * w + x0] * (1 - fx) * (1 - fy)
        + flat[y0 * w + x1] * fx * (1 - fy)
        + flat[y1 * w + x0] * (1 - fx) * fy
        + flat[y1 * w + x1] * fx * fy
    )
    return out.reshape(img.shape).astype(img.dtype)


def random_homography(rng: np.random.Generator, w: int, h: int, max_shift: float = 0.1) -> np.ndarray:
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    while True:
        jitter = rng.uniform(-max_shift, max_shift, (4, 2)) * np.array([w, h])
        Hm = homography_from_points(corners, corners + jitter)
        if np.isfinite(Hm).all() and abs(np.linalg.det(Hm)) > 1e-6 and np.linalg.cond(Hm) < 1e6:
            return Hm


def homography_augment(video: np.ndarray, n_views: int, seed: int, max_shift: float = 0.1) -> np.ndarray:
    """Pseudo multi-view video [n_views, T, H, W, 3] from one video [T, H, W, 3].

    View 0 is the input; every other view applies one fixed random homography
    (corners moved by at most ``max_shift`` of the extent) to all frames.
    """
    rng = np.random.default_rng(seed)
    T, h, w = video.shape[:3]
    out = np.empty((n_views,) + video.shape, dtype=video.dtype)
    out[0] = video
    for v in range(1, n_views):
        Hm = random_homography(rng, w, h, max_shift)
        for t in range(T):
            out[v, t] = warp_image(video[t], Hm)
    return out


def make_static_4d(frames: np.ndarray, T_pixel: int, cameras: list[Camera] | None = None, depths: np.ndarray | None = None) -> Scene4D:
    """Duplicate a freeze-time capture [V, H, W, 3] across T_pixel timesteps."""
    frames = np.asarray(frames)
    imgs = np.repeat(frames[:, None], T_pixel, axis=1)
    if depths is None:
        deps = np.full(imgs.shape[:-1], FAR_DEPTH, np.float32)
    else:
        deps = np.repeat(np.asarray(depths)[:, None], T_pixel, axis=1)
    return Scene4D(imgs, deps, list(cameras or []), None, static=True)


# -- archive -----------------------------------------------------------------------

def save_scene(path, scene: Scene4D) -> None:
    """Directory with ``meta`` (config text), per-frame PPM images and depth containers."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    H, W = scene.images.shape[2:4]
    sections: dict[str, dict] = {"scene": {"V": scene.V, "T": scene.T, "width": W, "height": H, "static": scene.static}}
    for i, cam in enumerate(scene.cameras):
        sections[f"camera{i}"] = cam.to_dict()
    if scene.spec is not None:
        s = scene.spec
        sections["spec"] = {
            "K": s.K,
            "path_coeffs": s.path_coeffs,
            "colors": s.colors,
            "scales": s.scales,
            "opacities": s.opacities,
            "background": s.background,
        }
    write_config(path / "meta", sections)
    for v in range(scene.V):
        for t in range(scene.T):
            write_ppm(path / f"v{v:02d}_t{t:02d}.ppm", scene.images[v, t])
            checkpoint.save(path / f"v{v:02d}_t{t:02d}.depth.t4dg", {"depth": scene.depths[v, t]})


def load_scene(path) -> Scene4D:
    path = Path(path)
    meta = read_config(path / "meta")
    info = meta["scene"]
    V, T = info["V"], info["T"]
    cams = []
    i = 0
    while f"camera{i}" in meta:
        c = meta[f"camera{i}"]
        cams.append(Camera.from_dict(c))
        i += 1
    spec = None
    if "spec" in meta:
        s = meta["spec"]
        spec = BlobSceneSpec(
            np.atleast_1d(s["path_coeffs"]), np.atleast_1d(s["colors"]), np.atleast_1d(s["scales"]),
            np.atleast_1d(s["opacities"]), np.atleast_1d(s["background"]),
        )
    imgs = np.stack([np.stack([read_ppm(path / f"v{v:02d}_t{t:02d}.ppm") for t in range(T)]) for v in range(V)])
    deps = np.stack(
        [np.stack([checkpoint.load(path / f"v{v:02d}_t{t:02d}.depth.t4dg")["depth"] for t in range(T)]) for v in range(V)]
    )
    return Scene4D(imgs, deps, cams, spec, bool(info.get("static", False)))


def save_dataset(path, scenes: list[Scene4D]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, sc in enumerate(scenes):
        save_scene(path / f"scene_{i:04d}", sc)


def load_dataset(path) -> list[Scene4D]:
    return [load_scene(p) for p in sorted(Path(path).glob("scene_*")) if p.is_dir()]
