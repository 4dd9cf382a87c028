"""Image quality and statistics primitives.

All functions take float images in ``[0, 1]`` shaped ``(H, W)`` or ``(H, W, 3)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .si_finder import LUMA, VAR_EPS

MSSSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
WIN_SIZE = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03
PSNR_CAP = 99.0


@dataclass
class QualityReport:
    msssim: float
    l1: float
    psnr: float
    bpp_estimated: float = float("nan")
    bpp_coded: float = float("nan")
    image: str = ""
    model: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "QualityReport":
        return cls(**json.loads(line))


def _gray(img: np.ndarray, channels: str) -> list[np.ndarray]:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return [a]
    if channels == "luma":
        return [a @ LUMA]
    return [a[..., k] for k in range(a.shape[-1])]


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = correlate1d(correlate1d(a, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[r:a.shape[0] - r, r:a.shape[1] - r]


def _ssim_terms(a: np.ndarray, b: np.ndarray, g: np.ndarray, data_range: float):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    s_aa = _filter_valid(a * a, g) - mu_a**2
    s_bb = _filter_valid(b * b, g) - mu_b**2
    s_ab = _filter_valid(a * b, g) - mu_a * mu_b
    cs = (2 * s_ab + c2) / (s_aa + s_bb + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def num_scales(shape: tuple[int, int], max_scales: int = 5, win: int = WIN_SIZE) -> int:
    """Largest scale count whose coarsest image still fits one window."""
    m = min(shape)
    n = 0
    while n < max_scales and m >= win:
        n += 1
        m //= 2
    return n


def ms_ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, channels: str = "luma",
            max_scales: int = 5) -> float:
    """Multi-scale SSIM (Gaussian window, valid filtering, 2x2 average pooling).

    Scales that do not fit the image are dropped and the remaining weights are
    renormalized to sum to one. Negative contrast-structure terms are clipped
    at zero before exponentiation.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    n = num_scales(a.shape[:2], max_scales)
    if n == 0:
        raise ValueError(f"image {a.shape[:2]} too small for one {WIN_SIZE}x{WIN_SIZE} window")
    w = MSSSIM_WEIGHTS[:n] / MSSSIM_WEIGHTS[:n].sum()
    g = gaussian_window()
    vals = []
    for ga, gb in zip(_gray(a, channels), _gray(b, channels)):
        cs_list = []
        for s in range(n):
            ssim_s, cs_s = _ssim_terms(ga, gb, g, data_range)
            cs_list.append(cs_s)
            if s < n - 1:
                h, wd = (ga.shape[0] // 2) * 2, (ga.shape[1] // 2) * 2
                ga = ga[:h, :wd].reshape(h // 2, 2, wd // 2, 2).mean(axis=(1, 3))
                gb = gb[:h, :wd].reshape(h // 2, 2, wd // 2, 2).mean(axis=(1, 3))
        terms = np.maximum(np.array(cs_list[:-1] + [ssim_s]), 0.0)
        vals.append(float(np.prod(terms**w)))
    return float(np.mean(vals))


def l1(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(a, float) - np.asarray(b, float))))


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(data_range**2 / mse))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a0 = a - a.mean()
    b0 = b - b.mean()
    if (a0 @ a0) / a.size < VAR_EPS or (b0 @ b0) / b.size < VAR_EPS:
        return 0.0
    return float(np.clip((a0 @ b0) / np.sqrt((a0 @ a0) * (b0 @ b0)), -1, 1))


def avg_patch_pearson(x: np.ndarray, y_syn: np.ndarray, patch_hw=(20, 24), channels: str = "luma") -> float:
    """Mean Pearson over co-located non-overlapping patches (flat patches count as 0).

    Both images are reflect-padded to a multiple of the patch size, as in the matcher.
    """
    from .si_finder import pad_to_patches, to_match_space

    x = np.asarray(x, dtype=np.float64)
    y_syn = np.asarray(y_syn, dtype=np.float64)
    if x.shape != y_syn.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y_syn.shape}")
    t = "luma" if channels == "luma" else "identity"
    xm = pad_to_patches(to_match_space(x, t), patch_hw)
    ym = pad_to_patches(to_match_space(y_syn, t), patch_hw)
    ph, pw = patch_hw
    vals = [
        _pearson(xm[i:i + ph, j:j + pw].ravel(), ym[i:i + ph, j:j + pw].ravel())
        for i in range(0, xm.shape[0], ph)
        for j in range(0, xm.shape[1], pw)
    ]
    return float(np.mean(vals))


def improvement_ratio(msssim_with_si, msssim_without):
    """Percentage MS-SSIM gain of the side-information model; arrays give the mean of per-image ratios."""
    w = np.asarray(msssim_with_si, dtype=np.float64)
    wo = np.asarray(msssim_without, dtype=np.float64)
    if np.any(wo == 0):
        raise ZeroDivisionError("MS-SSIM without side information is zero")
    r = 100.0 * (w / wo - 1.0)
    return float(np.mean(r)) if r.ndim else float(r)


def quality_report(x: np.ndarray, x_hat: np.ndarray, **kw) -> QualityReport:
    return QualityReport(msssim=ms_ssim(x, x_hat), l1=l1(x, x_hat), psnr=psnr(x, x_hat), **kw)
