"""SI-Finder: dense patch search that builds the synthetic side image.

For each non-overlapping ``patch_h x patch_w`` tile of ``x_dec`` the matcher
scans every (stride-spaced) window of ``y_dec``, scores it by Pearson
correlation, optionally weighted by a Gaussian prior centred on the tile's own
position, and copies the winning window from the original ``y`` into ``y_syn``.

Images here are numpy arrays ``(H, W)`` or ``(H, W, C)`` with values in [0, 1].
Both inputs are reflect-padded to a multiple of the patch size first; the
synthetic image is cropped back to the size of ``x_dec``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

LUMA = np.array([0.299, 0.587, 0.114])
# per-pixel variance below this is treated as a flat patch
VAR_EPS = 1e-10
# scores are snapped to this grid before the argmax so that float noise in
# different correlation routes cannot reorder exact ties
SCORE_DECIMALS = 9


@dataclass(frozen=True)
class MatcherConfig:
    patch_h: int = 20
    patch_w: int = 24
    search_stride: int = 1
    color_transform: str = "luma"  # or "identity"
    mask_enabled: bool = True
    # standard deviations in pixels; None means half the image extent
    mask_sigma_x: float | None = None
    mask_sigma_y: float | None = None

    def __post_init__(self):
        if self.patch_h < 2 or self.patch_w < 2:
            raise ValueError("patch must be at least 2x2")
        if self.search_stride < 1:
            raise ValueError("search_stride must be >= 1")
        if self.color_transform not in ("luma", "identity"):
            raise ValueError(f"unknown color transform {self.color_transform!r}")
        for s in (self.mask_sigma_x, self.mask_sigma_y):
            if s is not None and s <= 0:
                raise ValueError("mask sigmas must be positive")

    def sigmas(self, image_hw: tuple[int, int]) -> tuple[float, float]:
        H, W = image_hw
        sx = self.mask_sigma_x if self.mask_sigma_x is not None else W / 2
        sy = self.mask_sigma_y if self.mask_sigma_y is not None else H / 2
        return float(sx), float(sy)


@dataclass
class PatchAssignment:
    """Source top-left offset in (padded) Y for every tile of X, row-major grid."""

    offsets: np.ndarray  # (gh, gw, 2) int: (row, col)
    scores: np.ndarray  # (gh, gw) raw Pearson of the chosen window
    patch_hw: tuple[int, int]
    x_shape: tuple[int, int]  # unpadded x_dec size
    y_shape: tuple[int, int]  # unpadded y size
    extra: dict = field(default_factory=dict)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.offsets.shape[:2]

    def own_positions(self) -> np.ndarray:
        gh, gw = self.grid_shape
        ph, pw = self.patch_hw
        r, c = np.meshgrid(np.arange(gh) * ph, np.arange(gw) * pw, indexing="ij")
        return np.stack([r, c], axis=-1)

    @classmethod
    def identity(cls, image_hw, patch_hw) -> "PatchAssignment":
        ph, pw = patch_hw
        gh, gw = -(-image_hw[0] // ph), -(-image_hw[1] // pw)
        a = cls(np.zeros((gh, gw, 2), int), np.ones((gh, gw)), tuple(patch_hw), tuple(image_hw), tuple(image_hw))
        a.offsets = a.own_positions()
        return a


def to_match_space(img: np.ndarray, transform: str) -> np.ndarray:
    """``(H, W, C')`` float64 array the correlation runs on."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a[..., None]
    if transform == "luma" and a.shape[-1] == 3:
        return (a @ LUMA)[..., None]
    return a


def pad_to_patches(img: np.ndarray, patch_hw) -> np.ndarray:
    ph, pw = patch_hw
    H, W = img.shape[:2]
    pad = [(0, (-H) % ph), (0, (-W) % pw)] + [(0, 0)] * (img.ndim - 2)
    if pad[0][1] == 0 and pad[1][1] == 0:
        return img
    mode = "reflect" if pad[0][1] < H and pad[1][1] < W else "symmetric"
    return np.pad(img, pad, mode=mode)


def pearson_patch_corr(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two equal-shape patches; 0 if either is flat."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"patch shapes differ: {a.shape} vs {b.shape}")
    a0 = a - a.mean()
    b0 = b - b.mean()
    va, vb = (a0 @ a0) / a.size, (b0 @ b0) / b.size
    if va < VAR_EPS or vb < VAR_EPS:
        return 0.0
    return float(np.clip((a0 @ b0) / np.sqrt((a0 @ a0) * (b0 @ b0)), -1.0, 1.0))


def gaussian_mask(center, positions_rc, sigmas) -> np.ndarray:
    """Separable Gaussian weight of each candidate position around ``center``.

    ``positions_rc`` is a pair of 1-D arrays (candidate rows, candidate cols);
    the result has shape ``(len(rows), len(cols))`` and equals 1 at the centre.
    """
    sx, sy = sigmas
    if sx <= 0 or sy <= 0:
        raise ValueError("sigmas must be positive")
    rows, cols = (np.asarray(p, dtype=np.float64) for p in positions_rc)
    r0, c0 = center
    wy = np.exp(-((rows - r0) ** 2) / (2 * sy**2))
    wx = np.exp(-((cols - c0) ** 2) / (2 * sx**2))
    return np.outer(wy, wx)


def _candidates(y_hw, patch_hw, stride):
    ph, pw = patch_hw
    return np.arange(0, y_hw[0] - ph + 1, stride), np.arange(0, y_hw[1] - pw + 1, stride)


def _tiles(x: np.ndarray, patch_hw):
    ph, pw = patch_hw
    gh, gw = x.shape[0] // ph, x.shape[1] // pw
    # (gh, gw, ph, pw, C)
    return x.reshape(gh, ph, gw, pw, -1).transpose(0, 2, 1, 3, 4)


def correlation_surfaces(xm: np.ndarray, ym: np.ndarray, patch_hw, stride: int = 1) -> np.ndarray:
    """Pearson of every tile of ``xm`` against every candidate window of ``ym``.

    Inputs are padded match-space arrays ``(H, W, C)``. Returns
    ``(gh, gw, n_rows, n_cols)``. Numerators come from FFT correlation, window
    statistics from summed-area tables.
    """
    ph, pw = patch_hw
    n = ph * pw * xm.shape[-1]
    tiles = _tiles(xm, patch_hw)
    gh, gw = tiles.shape[:2]
    t0 = tiles - tiles.mean(axis=(2, 3, 4), keepdims=True)
    t_ss = (t0**2).sum(axis=(2, 3, 4))  # (gh, gw)

    kern = t0.reshape(gh * gw, ph, pw, -1)[:, ::-1, ::-1, :]
    num = fftconvolve(ym[None], kern, mode="valid", axes=(1, 2)).sum(axis=-1)
    num = num.reshape(gh, gw, *num.shape[1:])

    def box(a):
        s = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
        s[1:, 1:] = a.cumsum(0).cumsum(1)
        return s[ph:, pw:] - s[:-ph, pw:] - s[ph:, :-pw] + s[:-ph, :-pw]

    s1 = box(ym.sum(axis=-1))
    s2 = box((ym**2).sum(axis=-1))
    y_ss = np.maximum(s2 - s1**2 / n, 0.0)

    rows, cols = _candidates(ym.shape[:2], patch_hw, stride)
    num = num[:, :, rows][:, :, :, cols]
    y_ss = y_ss[rows][:, cols]

    flat_t = t_ss / n < VAR_EPS
    flat_y = y_ss / n < VAR_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = num / np.sqrt(t_ss[:, :, None, None] * y_ss[None, None])
    corr[flat_t] = 0.0
    corr[:, :, flat_y] = 0.0
    return np.clip(corr, -1.0, 1.0)


def correlation_surfaces_naive(xm: np.ndarray, ym: np.ndarray, patch_hw, stride: int = 1) -> np.ndarray:
    """Direct per-window Pearson (centre every window explicitly, no sum tables or FFT)."""
    ph, pw = patch_hw
    gh, gw = xm.shape[0] // ph, xm.shape[1] // pw
    rows, cols = _candidates(ym.shape[:2], patch_hw, stride)
    win = np.lib.stride_tricks.sliding_window_view(ym, (ph, pw), axis=(0, 1))[rows][:, cols]
    win = win.reshape(len(rows), len(cols), -1)
    w0 = win - win.mean(axis=-1, keepdims=True)
    w_ss = (w0**2).sum(axis=-1)
    n = win.shape[-1]
    out = np.zeros((gh, gw, len(rows), len(cols)))
    for i in range(gh):
        for j in range(gw):
            a = xm[i * ph:(i + 1) * ph, j * pw:(j + 1) * pw].transpose(2, 0, 1).ravel()
            a0 = a - a.mean()
            a_ss = a0 @ a0
            if a_ss / n < VAR_EPS:
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                c = (w0 @ a0) / np.sqrt(a_ss * w_ss)
            c[w_ss / n < VAR_EPS] = 0.0
            out[i, j] = np.clip(c, -1.0, 1.0)
    return out


def _select(corr: np.ndarray, patch_hw, stride, y_hw, cfg: MatcherConfig, x_hw) -> PatchAssignment:
    ph, pw = patch_hw
    gh, gw = corr.shape[:2]
    rows, cols = _candidates(y_hw, patch_hw, stride)
    sig = cfg.sigmas(x_hw)
    offsets = np.zeros((gh, gw, 2), dtype=int)
    scores = np.zeros((gh, gw))
    for i in range(gh):
        for j in range(gw):
            c = corr[i, j]
            if cfg.mask_enabled:
                s = (c + 1.0) * gaussian_mask((i * ph, j * pw), (rows, cols), sig)
            else:
                s = c
            k = int(np.argmax(np.round(s, SCORE_DECIMALS)))
            u, v = divmod(k, len(cols))
            offsets[i, j] = rows[u], cols[v]
            scores[i, j] = c[u, v]
    return PatchAssignment(offsets, scores, (ph, pw), tuple(x_hw), tuple(y_hw))


def _prepare(x_dec, y_dec, cfg: MatcherConfig):
    x_dec = np.asarray(x_dec)
    y_dec = np.asarray(y_dec)
    ph, pw = cfg.patch_h, cfg.patch_w
    for name, a in (("x_dec", x_dec), ("y_dec", y_dec)):
        if a.shape[0] < ph or a.shape[1] < pw:
            raise ValueError(f"{name} of size {a.shape[:2]} is smaller than one {ph}x{pw} patch")
    xm = pad_to_patches(to_match_space(x_dec, cfg.color_transform), (ph, pw))
    ym = pad_to_patches(to_match_space(y_dec, cfg.color_transform), (ph, pw))
    if xm.shape[-1] != ym.shape[-1]:
        raise ValueError("x_dec and y_dec have different channel counts")
    return xm, ym, x_dec.shape[:2], y_dec.shape[:2]


def find_assignment(x_dec, y_dec, cfg: MatcherConfig = MatcherConfig()) -> PatchAssignment:
    """Best (optionally prior-weighted) Y window for every X tile.

    Ties in the score resolve to the smallest row-major candidate index.
    """
    xm, ym, x_hw, y_hw = _prepare(x_dec, y_dec, cfg)
    patch = (cfg.patch_h, cfg.patch_w)
    corr = correlation_surfaces(xm, ym, patch, cfg.search_stride)
    a = _select(corr, patch, cfg.search_stride, ym.shape[:2], cfg, x_hw)
    a.y_shape = tuple(y_hw)
    return a


def find_assignment_naive(x_dec, y_dec, cfg: MatcherConfig = MatcherConfig()) -> PatchAssignment:
    """Brute-force reference for :func:`find_assignment` (slow, for checking only)."""
    xm, ym, x_hw, y_hw = _prepare(x_dec, y_dec, cfg)
    patch = (cfg.patch_h, cfg.patch_w)
    corr = correlation_surfaces_naive(xm, ym, patch, cfg.search_stride)
    a = _select(corr, patch, cfg.search_stride, ym.shape[:2], cfg, x_hw)
    a.y_shape = tuple(y_hw)
    return a


def assemble_ysyn(y: np.ndarray, f: PatchAssignment) -> np.ndarray:
    """Mosaic of windows copied from the original ``y`` at the tile positions of X."""
    y = np.asarray(y)
    if tuple(y.shape[:2]) != tuple(f.y_shape):
        raise ValueError(f"y has size {y.shape[:2]}, assignment was computed for {f.y_shape}")
    ph, pw = f.patch_hw
    yp = pad_to_patches(y, (ph, pw))
    gh, gw = f.grid_shape
    out = np.zeros((gh * ph, gw * pw) + y.shape[2:], dtype=y.dtype)
    for i in range(gh):
        for j in range(gw):
            r, c = f.offsets[i, j]
            if r < 0 or c < 0 or r + ph > yp.shape[0] or c + pw > yp.shape[1]:
                raise ValueError(f"offset {(r, c)} leaves the side image")
            out[i * ph:(i + 1) * ph, j * pw:(j + 1) * pw] = yp[r:r + ph, c:c + pw]
    H, W = f.x_shape
    return out[:H, :W]


def synthesize(x_dec, y_dec, y, cfg: MatcherConfig = MatcherConfig()):
    """``(y_syn, assignment)`` for one image pair."""
    f = find_assignment(x_dec, y_dec, cfg)
    return assemble_ysyn(y, f), f


def correlation_map(x_dec, y_dec, tile: tuple[int, int], cfg: MatcherConfig = MatcherConfig()):
    """Raw and prior-weighted score surfaces for one tile ``(i, j)``."""
    xm, ym, x_hw, _ = _prepare(x_dec, y_dec, cfg)
    ph, pw = cfg.patch_h, cfg.patch_w
    i, j = tile
    corr = correlation_surfaces(xm[i * ph:(i + 1) * ph, j * pw:(j + 1) * pw], ym, (ph, pw), cfg.search_stride)[0, 0]
    rows, cols = _candidates(ym.shape[:2], (ph, pw), cfg.search_stride)
    masked = (corr + 1.0) * gaussian_mask((i * ph, j * pw), (rows, cols), cfg.sigmas(x_hw))
    return corr, masked


def dump_debug(x_dec, y_dec, y, out_dir, tile=(0, 0), cfg: MatcherConfig = MatcherConfig()) -> list:
    """Write correlation maps and y_syn with/without the prior as PNG files."""
    from pathlib import Path

    from .imageio import write_png

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corr, masked = correlation_map(x_dec, y_dec, tile, cfg)
    written = []

    def norm(a):
        a = a - a.min()
        return a / a.max() if a.max() > 0 else a

    for name, arr in (("corr_map_nomask.png", norm(corr)), ("corr_map_mask.png", norm(masked))):
        write_png(out / name, np.repeat(arr[..., None], 3, axis=-1))
        written.append(out / name)
    for mask in (False, True):
        c = MatcherConfig(**{**cfg.__dict__, "mask_enabled": mask})
        ysyn, f = synthesize(x_dec, y_dec, y, c)
        name = f"ysyn_{'mask' if mask else 'nomask'}.png"
        write_png(out / name, ysyn)
        written.append(out / name)
        np.savetxt(out / f"offsets_{'mask' if mask else 'nomask'}.txt", f.offsets.reshape(-1, 2), fmt="%d")
    return written
