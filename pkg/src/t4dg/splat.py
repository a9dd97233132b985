"""Differentiable 3D Gaussian splat rasterizer.

Projection (EWA) is written with autodiff primitives, so gradients reach the
Gaussian fields through it automatically. Compositing is a single custom op:
it builds the list of (pixel, Gaussian) contributions inside each Gaussian's
3-sigma ellipse, composites them front to back per pixel and, on the way
back, reverses that recurrence in closed form from the retained lists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, backward, make_node, no_grad, ops
from .camera import Camera

NEAR = 0.01
COV_FLOOR = 0.3
ALPHA_MAX = 0.999
T_MIN = 1e-4
SIGMA_CUTOFF = 3.0


@dataclass
class GaussianSet:
    """N Gaussians; fields are numpy arrays or Tensors."""

    centers: object  # [N, 3]
    scales: object  # [N, 3] positive
    rotations: object  # [N, 4] unit quaternion (w, x, y, z)
    opacities: object  # [N]
    colors: object  # [N, 3]

    def __len__(self) -> int:
        return int(_data(self.centers).shape[0])

    def numpy(self) -> GaussianSet:
        return GaussianSet(*(np.asarray(_data(f), dtype=np.float64) for f in self.fields()))

    def fields(self) -> tuple:
        return (self.centers, self.scales, self.rotations, self.opacities, self.colors)

    @staticmethod
    def concat(sets: list[GaussianSet]) -> GaussianSet:
        if all(not isinstance(f, Tensor) for s in sets for f in s.fields()):
            return GaussianSet(*(np.concatenate([np.asarray(s.fields()[i]) for s in sets]) for i in range(5)))
        return GaussianSet(*(ops.concat([s.fields()[i] for s in sets], axis=0) for i in range(5)))


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class Projected2D:
    mean2d: np.ndarray  # [2]
    cov2d: np.ndarray  # [2, 2]
    depth: float
    visible: bool


# -- projection ------------------------------------------------------------------

def quat_to_rotmat_t(q: Tensor) -> Tensor:
    """Differentiable quaternion [N, 4] -> rotation [N, 3, 3] (input assumed unit)."""
    w, x, y, z = (q[:, i] for i in range(4))

    def two(a, b):
        return ops.scale(ops.mul(a, b), 2.0)

    xx, yy, zz = two(x, x), two(y, y), two(z, z)
    xy, xz, yz = two(x, y), two(x, z), two(y, z)
    wx, wy, wz = two(w, x), two(w, y), two(w, z)
    one = 1.0
    entries = [
        ops.sub(one, ops.add(yy, zz)), ops.sub(xy, wz), ops.add(xz, wy),
        ops.add(xy, wz), ops.sub(one, ops.add(xx, zz)), ops.sub(yz, wx),
        ops.sub(xz, wy), ops.add(yz, wx), ops.sub(one, ops.add(xx, yy)),
    ]
    return ops.reshape(ops.stack(entries, axis=-1), (q.shape[0], 3, 3))


def project_tensors(centers, scales, rotations, cam: Camera):
    """EWA projection for N Gaussians.

    Returns (mean2d [M, 2], cov2d entries [M, 3] as (a, b, c) of [[a, b], [b, c]],
    depth [M], visible index array) for the M Gaussians with depth > NEAR.
    """
    centers = centers if isinstance(centers, Tensor) else Tensor(centers)
    scales = scales if isinstance(scales, Tensor) else Tensor(scales)
    rotations = rotations if isinstance(rotations, Tensor) else Tensor(rotations)
    dt = centers.dtype.type
    Rc = cam.R.astype(dt)
    p = ops.add(ops.matmul(centers, Rc.T), cam.translation.astype(dt))
    z_all = p.data[:, 2]
    vis = np.nonzero(z_all > NEAR)[0]
    if len(vis) < len(z_all):
        p = p[vis]
        scales = scales[vis]
        rotations = rotations[vis]
    px, py, pz = p[:, 0], p[:, 1], p[:, 2]
    f = cam.focal
    inv_z = ops.div(1.0, pz)
    u = ops.add(ops.scale(ops.mul(px, inv_z), f), cam.principal[0])
    v = ops.add(ops.scale(ops.mul(py, inv_z), f), cam.principal[1])
    mean2d = ops.stack([u, v], axis=-1)

    Rg = quat_to_rotmat_t(rotations)
    M = ops.matmul(Rc, ops.mul(Rg, ops.reshape(scales, (-1, 1, 3))))  # camera-frame R*S
    fz = ops.scale(inv_z, f)
    zero = Tensor(np.zeros(len(vis), dt))
    J = ops.reshape(
        ops.stack(
            [fz, zero, ops.neg(ops.mul(fz, ops.mul(px, inv_z))), zero, fz, ops.neg(ops.mul(fz, ops.mul(py, inv_z)))],
            axis=-1,
        ),
        (-1, 2, 3),
    )
    JM = ops.matmul(J, M)  # [M, 2, 3]
    a = ops.add(ops.sum(ops.square(JM[:, 0, :]), axis=-1), COV_FLOOR)
    b = ops.sum(ops.mul(JM[:, 0, :], JM[:, 1, :]), axis=-1)
    c = ops.add(ops.sum(ops.square(JM[:, 1, :]), axis=-1), COV_FLOOR)
    cov = ops.stack([a, b, c], axis=-1)
    return mean2d, cov, pz, vis


def project(g: GaussianSet, cam: Camera) -> list[Projected2D]:
    """Per-Gaussian projection record (numpy); invisible Gaussians carry no values."""
    gs = g.numpy()
    with no_grad():
        mean2d, cov, depth, vis = project_tensors(gs.centers, gs.scales, gs.rotations, cam)
    out = [Projected2D(np.full(2, np.nan), np.full((2, 2), np.nan), float("nan"), False) for _ in range(len(gs))]
    for j, i in enumerate(vis):
        a, b, c = cov.data[j]
        out[i] = Projected2D(mean2d.data[j].copy(), np.array([[a, b], [b, c]]), float(depth.data[j]), True)
    return out


# -- compositing ---------------------------------------------------------------

def _conic(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b, c = cov[:, 0], cov[:, 1], cov[:, 2]
    det = a * c - b * b
    ok = np.isfinite(det) & (det > 0) & (a > 0)
    safe = np.where(ok, det, 1.0)
    return np.stack([c / safe, -b / safe, a / safe], axis=-1), ok


def _pairs(mean2d, cov, ok, H, W):
    """Contribution list inside each Gaussian's 3-sigma ellipse, in input order."""
    a, b, c = cov[:, 0], cov[:, 1], cov[:, 2]
    lam = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0))
    r = np.where(ok, np.ceil(SIGMA_CUTOFF * np.sqrt(np.maximum(lam, 0))), 0)
    mean2d = np.where(ok[:, None], mean2d, 0)
    x0 = np.clip(np.floor(mean2d[:, 0] - r), 0, W).astype(np.int64)
    x1 = np.clip(np.ceil(mean2d[:, 0] + r) + 1, 0, W).astype(np.int64)
    y0 = np.clip(np.floor(mean2d[:, 1] - r), 0, H).astype(np.int64)
    y1 = np.clip(np.ceil(mean2d[:, 1] + r) + 1, 0, H).astype(np.int64)
    bw = np.where(ok, np.maximum(x1 - x0, 0), 0)
    bh = np.where(ok, np.maximum(y1 - y0, 0), 0)
    counts = bw * bh
    total = int(counts.sum())
    gid = np.repeat(np.arange(len(counts)), counts)
    starts = np.cumsum(counts) - counts
    local = np.arange(total) - np.repeat(starts, counts)
    bwr = np.repeat(bw, counts)
    px = np.repeat(x0, counts) + local % np.maximum(bwr, 1)
    py = np.repeat(y0, counts) + local // np.maximum(bwr, 1)
    return gid, px, py


def composite(mean2d, cov, depth, opacity, color, height: int, width: int, background) -> tuple[Tensor, dict]:
    """Front-to-back alpha compositing of projected Gaussians.

    Inputs must already be sorted front to back. Returns a Tensor
    [H, W, 5] holding (r, g, b, alpha-weighted depth, accumulated alpha) and
    a stats dict with the final transmittance and skipped count.
    """
    ins = [t if isinstance(t, Tensor) else Tensor(t) for t in (mean2d, cov, depth, opacity, color)]
    out_dtype = np.result_type(*(t.data for t in ins))
    m2, cv, dz, op, col = (t.data.astype(np.float64) for t in ins)
    n = m2.shape[0]
    bg = np.asarray(background, dtype=np.float64)
    H, W = height, width
    conic, ok = _conic(cv)

    gid, px, py = _pairs(m2, cv, ok, H, W)
    dx = px - m2[gid, 0]
    dy = py - m2[gid, 1]
    ca, cb, cc = conic[gid, 0], conic[gid, 1], conic[gid, 2]
    q = ca * dx * dx + 2 * cb * dx * dy + cc * dy * dy
    keep = q <= SIGMA_CUTOFF**2
    gid, px, py, dx, dy, q = gid[keep], px[keep], py[keep], dx[keep], dy[keep], q[keep]
    ca, cb, cc = ca[keep], cb[keep], cc[keep]
    pix = py * W + px
    order = np.argsort(pix, kind="stable")
    gid, pix, dx, dy, q = gid[order], pix[order], dx[order], dy[order], q[order]
    ca, cb, cc = ca[order], cb[order], cc[order]

    gauss = np.exp(-0.5 * q)
    raw = op[gid] * gauss
    alpha = np.minimum(raw, ALPHA_MAX)
    clamped = raw > ALPHA_MAX
    la = np.log1p(-alpha)

    n_pairs = len(pix)
    seg_start = np.ones(n_pairs, bool)
    if n_pairs:
        seg_start[1:] = pix[1:] != pix[:-1]
    seg_id = np.cumsum(seg_start) - 1
    first = np.nonzero(seg_start)[0]

    def seg_cumsum(x):
        cs = np.cumsum(x)
        base = (cs - x)[first]
        return cs - base[seg_id]

    T_before = np.exp(seg_cumsum(la) - la)
    inc = T_before >= T_MIN
    w = alpha * T_before * inc

    npx = H * W
    acc_rgb = np.stack([np.bincount(pix, w * col[gid, ch], minlength=npx) for ch in range(3)], axis=-1)
    acc_d = np.bincount(pix, w * dz[gid], minlength=npx)
    acc_a = np.bincount(pix, w, minlength=npx)
    T_final = np.exp(np.bincount(pix, la * inc, minlength=npx))
    rgb = acc_rgb + T_final[:, None] * bg[None, :]
    packed = np.concatenate([rgb, acc_d[:, None], acc_a[:, None]], axis=-1).reshape(H, W, 5)
    stats = {"T_final": T_final.reshape(H, W), "skipped": int((~ok).sum()), "pairs": int(inc.sum())}

    def bw(g):
        g = np.asarray(g, dtype=np.float64).reshape(npx, 5)
        gC, gD, gA = g[:, :3], g[:, 3], g[:, 4]
        gCp = gC[pix]
        s = (gCp * col[gid]).sum(-1) + gD[pix] * dz[gid] + gA[pix]
        ws = w * s
        suffix = np.bincount(pix, ws, minlength=npx)[pix] - seg_cumsum(ws)
        bg_term = (gC @ bg) * T_final
        d_alpha = inc * (T_before * s - (suffix + bg_term[pix]) / (1 - alpha))
        d_raw = np.where(clamped, 0.0, d_alpha)
        d_op = np.bincount(gid, d_raw * gauss, minlength=n)
        d_q = d_raw * (-0.5 * raw)
        dmx = -d_q * (2 * ca * dx + 2 * cb * dy)
        dmy = -d_q * (2 * cb * dx + 2 * cc * dy)
        d_mean = np.stack([np.bincount(gid, dmx, minlength=n), np.bincount(gid, dmy, minlength=n)], axis=-1)
        d_conic = np.stack(
            [
                np.bincount(gid, d_q * dx * dx, minlength=n),
                np.bincount(gid, d_q * 2 * dx * dy, minlength=n),
                np.bincount(gid, d_q * dy * dy, minlength=n),
            ],
            axis=-1,
        )
        # conic = inverse(cov); chain rule through the 2x2 inverse
        A, B, C = conic[:, 0], conic[:, 1], conic[:, 2]
        gA_, gB_, gC_ = d_conic[:, 0], d_conic[:, 1], d_conic[:, 2]
        # d(Sigma^-1) = -Sigma^-1 dSigma Sigma^-1 ; gradient wrt symmetric entries (a, b, c)
        d_cov_a = -(A * A * gA_ + A * B * gB_ + B * B * gC_)
        d_cov_c = -(B * B * gA_ + B * C * gB_ + C * C * gC_)
        d_cov_b = -(2 * A * B * gA_ + (A * C + B * B) * gB_ + 2 * B * C * gC_)
        d_cov = np.stack([d_cov_a, d_cov_b, d_cov_c], axis=-1) * ok[:, None]
        d_depth = np.bincount(gid, gD[pix] * w, minlength=n)
        d_col = np.stack([np.bincount(gid, gC[pix, ch] * w, minlength=n) for ch in range(3)], axis=-1)
        grads = (d_mean, d_cov, d_depth, d_op, d_col)
        return tuple(gr.astype(t.dtype, copy=False) for gr, t in zip(grads, ins))

    return make_node(packed.astype(out_dtype), ins, bw), stats


@dataclass
class RenderResult:
    image: Tensor  # [H, W, 3]
    depth: Tensor  # [H, W] alpha-weighted depth (not normalized)
    alpha: Tensor  # [H, W] accumulated weight, equals 1 - T_final
    T_final: np.ndarray
    skipped: int


def rasterize(gaussians: GaussianSet, cam: Camera, background=(0.0, 0.0, 0.0)) -> RenderResult:
    """Render Gaussians through ``cam``.

    Visible Gaussians (depth > NEAR) are sorted by depth with ties broken by
    input index and composited front to back over ``background``.
    """
    H, W = cam.height, cam.width
    if len(gaussians) == 0:
        bg = np.broadcast_to(np.asarray(background, np.float64), (H, W, 3)).astype(np.float32)
        z = np.zeros((H, W), np.float32)
        return RenderResult(Tensor(bg), Tensor(z), Tensor(z), np.ones((H, W)), 0)
    mean2d, cov, depth, vis = project_tensors(gaussians.centers, gaussians.scales, gaussians.rotations, cam)
    opac = gaussians.opacities if isinstance(gaussians.opacities, Tensor) else Tensor(gaussians.opacities)
    col = gaussians.colors if isinstance(gaussians.colors, Tensor) else Tensor(gaussians.colors)
    if len(vis) < len(gaussians):
        opac, col = opac[vis], col[vis]
    order = np.argsort(depth.data, kind="stable")
    if not np.array_equal(order, np.arange(len(order))):
        mean2d, cov, depth, opac, col = (t[order] for t in (mean2d, cov, depth, opac, col))
    packed, stats = composite(mean2d, cov, depth, opac, col, H, W, background)
    return RenderResult(packed[..., :3], packed[..., 3], packed[..., 4], stats["T_final"], stats["skipped"])


def rasterize_backward(gaussians: GaussianSet, cam: Camera, grad_image: np.ndarray, background=(0.0, 0.0, 0.0)) -> dict[str, np.ndarray]:
    """Gradients of sum(image * grad_image) w.r.t. every Gaussian field."""
    names = ("centers", "scales", "rotations", "opacities", "colors")
    leaves = [Tensor(np.asarray(_data(f), np.float64), requires_grad=True) for f in gaussians.fields()]
    res = rasterize(GaussianSet(*leaves), cam, background)
    loss = ops.sum(ops.mul(res.image, Tensor(np.asarray(grad_image, np.float64))))
    backward(loss)
    return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in zip(names, leaves)}
