"""Independent reference implementations used by the tests.

None of these import the code under test beyond plain data containers.
They trade speed for obviousness: explicit loops, float64 throughout.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


# -- attention ------------------------------------------------------------------------

def brute_force_fused_attention(q, k, v, coords, heads):
    """Per-query, per-key loop over tokens with the same-view-or-same-time rule.

    q, k, v: [N, d]; coords: [N, 4] rows (v, t, x, y).
    """
    q, k, v = (np.asarray(a, np.float64) for a in (q, k, v))
    N, d = q.shape
    dh = d // heads
    out = np.zeros((N, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(N):
            keys = [j for j in range(N) if coords[i][0] == coords[j][0] or coords[i][1] == coords[j][1]]
            logits = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in keys])
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[i, sl] = sum(wj * v[j, sl] for wj, j in zip(w, keys))
    return out


def enumerate_frame_pairs(V, T):
    """All (query frame, key frame) pairs allowed by the rule, by exhaustive enumeration."""
    frames = list(itertools.product(range(V), range(T)))
    return [(a, b) for a in frames for b in frames if a[0] == b[0] or a[1] == b[1]]


def inclusion_exclusion_keys(V, T, H, W):
    """|same view| + |same time| - |same view and time|, in tokens."""
    P = H * W
    return T * P + V * P - P


def enumerate_collisions_sum(V, T):
    """Unordered pairs of distinct (v, t) cells sharing v + t."""
    cells = list(itertools.product(range(V), range(T)))
    return sum(1 for a, b in itertools.combinations(cells, 2) if sum(a) == sum(b))


# -- rotary ---------------------------------------------------------------------------

def rope_reference(x, pos, base=10000.0):
    """Rotate pairs of x [N, d] by positions pos [N, 3], splitting pairs evenly over the 3 axes.

    Pairs are numbered 0..d/2-1; pair j belongs to axis j // g where g = ceil(d/6)
    and uses frequency base^(-(j mod g)/g).
    """
    x = np.asarray(x, np.float64)
    N, d = x.shape
    g = -(-d // 6)
    out = x.copy()
    for j in range(d // 2):
        axis, m = divmod(j, g)
        theta = pos[:, axis] * base ** (-m / g)
        c, s = np.cos(theta), np.sin(theta)
        a, b = x[:, 2 * j], x[:, 2 * j + 1]
        out[:, 2 * j] = a * c - b * s
        out[:, 2 * j + 1] = a * s + b * c
    return out


# -- splatting ---------------------------------------------------------------------------

def _quat_rot(q):
    w, x, y, z = np.asarray(q, np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def naive_rasterize(centers, scales, rotations, opacities, colors, R, t, focal, principal, H, W, background,
                    near=0.01, floor=0.3, alpha_max=0.999, t_min=1e-4, cutoff=3.0):
    """Pixel-by-pixel EWA splatting, one Gaussian at a time in depth order."""
    cx, cy = principal
    recs = []
    for i in range(len(centers)):
        p = R @ np.asarray(centers[i], np.float64) + t
        if p[2] <= near:
            continue
        J = np.array([[focal / p[2], 0, -focal * p[0] / p[2] ** 2], [0, focal / p[2], -focal * p[1] / p[2] ** 2]])
        S = np.diag(scales[i])
        M = R @ _quat_rot(rotations[i]) @ S
        cov = J @ M @ M.T @ J.T + floor * np.eye(2)
        mean = np.array([focal * p[0] / p[2] + cx, focal * p[1] / p[2] + cy])
        recs.append((p[2], i, mean, np.linalg.inv(cov)))
    recs.sort(key=lambda r: (r[0], r[1]))
    img = np.zeros((H, W, 3))
    for y in range(H):
        for x in range(W):
            T = 1.0
            acc = np.zeros(3)
            for _, i, mean, conic in recs:
                dlt = np.array([x, y]) - mean
                q = dlt @ conic @ dlt
                if q > cutoff**2:
                    continue
                if T < t_min:
                    break
                a = min(opacities[i] * math.exp(-0.5 * q), alpha_max)
                acc += T * a * np.asarray(colors[i])
                T *= 1 - a
            img[y, x] = acc + T * np.asarray(background)
    return img


# -- rectified flow -----------------------------------------------------------------------

def gaussian_rf_velocity(x, tau, mu, sigma):
    """Exact marginal velocity E[eps - x0 | x_tau = x] for x0 ~ N(mu, sigma^2), eps ~ N(0, 1)."""
    a, b = 1.0 - tau, tau
    var = a * a * sigma**2 + b * b
    mean = a * mu
    # E[x0 | x] and E[eps | x] by Gaussian conditioning
    ex0 = mu + a * sigma**2 / var * (x - mean)
    eeps = b / var * (x - mean)
    return eeps - ex0


def euler_gaussian_moments(mu, sigma, steps):
    """Mean and variance after Euler-integrating the exact velocity from tau=1 to 0.

    The field is affine in x, so N(m, s^2) stays Gaussian and the moments
    follow a scalar recurrence.
    """
    m, s2 = 0.0, 1.0
    taus = np.linspace(1.0, 0.0, steps + 1)
    for t0, t1 in zip(taus[:-1], taus[1:]):
        a, b = 1.0 - t0, t0
        var = a * a * sigma**2 + b * b
        slope = b / var - a * sigma**2 / var
        offset = -(mu) + a * sigma**2 / var * a * mu - b / var * a * mu
        dt = t0 - t1
        # x <- x - dt * (slope * x + offset)
        m = m - dt * (slope * m + offset)
        s2 = s2 * (1 - dt * slope) ** 2
    return m, s2


# -- metrics ------------------------------------------------------------------------------

def psnr_formula(a, b):
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return 10 * math.log10(1.0 / mse)
