"""PSNR and SSIM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
LUMA = np.array([0.299, 0.587, 0.114])


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"extent mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check(a, b)
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / err))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _to_gray(x: np.ndarray) -> np.ndarray:
    return x @ LUMA if x.ndim == 3 else x


def _valid_filter(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(x, (k, k))
    return np.einsum("ijkl,kl->ij", view, win)


def ssim(a, b) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows of the luma images."""
    a, b = _check(a, b)
    a, b = _to_gray(a), _to_gray(b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if np.array_equal(a, b):
        return 1.0
    win = gaussian_window()
    mu_a = _valid_filter(a, win)
    mu_b = _valid_filter(b, win)
    saa = _valid_filter(a * a, win) - mu_a**2
    sbb = _valid_filter(b * b, win) - mu_b**2
    sab = _valid_filter(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (saa + sbb + SSIM_C2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    names: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    def add(self, name: str, pred, gt) -> None:
        self.names.append(name)
        self.psnr.append(psnr(pred, gt))
        self.ssim.append(ssim(pred, gt))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_csv(self) -> str:
        rows = ["frame,psnr,ssim"]
        rows += [f"{n},{p:.6f},{s:.6f}" for n, p, s in zip(self.names, self.psnr, self.ssim)]
        rows.append(f"mean,{self.mean_psnr:.6f},{self.mean_ssim:.6f}")
        return "\n".join(rows) + "\n"
