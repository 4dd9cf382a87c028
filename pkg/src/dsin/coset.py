"""Modulo coset coding of 8-bit pixels with decoder-side information.

The encoder only sends ``x mod M``. The decoder knows that the true pixel
lies within ``correlation_bound`` of its side-information pixel ``y`` and
picks the coset member closest to ``y``. Recovery is exact whenever
``|x - y| <= bound`` and ``2 * bound < M``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CosetConfig:
    modulus: int = 8
    alphabet_max: int = 255
    correlation_bound: int = 3

    def __post_init__(self):
        if self.modulus < 2:
            raise ValueError(f"modulus must be >= 2, got {self.modulus}")
        if self.correlation_bound < 0:
            raise ValueError("correlation_bound must be non-negative")
        if self.alphabet_max < self.modulus - 1:
            raise ValueError("alphabet_max must be >= modulus - 1")

    @property
    def uniquely_decodable(self) -> bool:
        return 2 * self.correlation_bound < self.modulus

    @property
    def bits_per_symbol(self) -> int:
        return math.ceil(math.log2(self.modulus))

    def validate(self) -> None:
        """Raise if the correlation contract cannot guarantee exact recovery."""
        if not self.uniquely_decodable:
            raise ValueError(
                f"2*{self.correlation_bound} >= {self.modulus}: cosets are not uniquely decodable"
            )


def _check_range(v, cfg: CosetConfig, name: str):
    arr = np.asarray(v)
    if arr.size and (arr.min() < 0 or arr.max() > cfg.alphabet_max):
        raise ValueError(f"{name} outside [0, {cfg.alphabet_max}]")


def coset_encode(x: int, cfg: CosetConfig) -> int:
    _check_range(x, cfg, "x")
    return int(x) % cfg.modulus


def coset_members(s: int, cfg: CosetConfig) -> np.ndarray:
    """All alphabet values congruent to ``s`` modulo M, ascending."""
    if not 0 <= s < cfg.modulus:
        raise ValueError(f"coset symbol {s} outside [0, {cfg.modulus})")
    return np.arange(s, cfg.alphabet_max + 1, cfg.modulus)


def coset_decode(s: int, y: int, cfg: CosetConfig) -> int:
    """Coset member nearest to ``y``; ties go to the smaller member."""
    _check_range(y, cfg, "y")
    members = coset_members(int(s), cfg)
    # argmin returns the first (smallest) member on a distance tie
    return int(members[np.argmin(np.abs(members - int(y)))])


def _decode_array(s: np.ndarray, y: np.ndarray, cfg: CosetConfig) -> np.ndarray:
    m = cfg.modulus
    s = s.astype(np.int64)
    y = y.astype(np.int64)
    # nearest member at or below y, and the next one up
    lo = y - ((y - s) % m)
    hi = lo + m
    lo_ok = lo >= 0
    hi_ok = hi <= cfg.alphabet_max
    d_lo = np.where(lo_ok, y - lo, np.iinfo(np.int64).max)
    d_hi = np.where(hi_ok, hi - y, np.iinfo(np.int64).max)
    return np.where(d_lo <= d_hi, lo, hi)


def coset_encode_image(img: np.ndarray, cfg: CosetConfig) -> np.ndarray:
    """Symbol plane of the same shape as ``img`` (each channel independent)."""
    img = np.asarray(img)
    _check_range(img, cfg, "img")
    return (img.astype(np.int64) % cfg.modulus).astype(np.uint8 if cfg.modulus <= 256 else np.int64)


def coset_decode_image(plane: np.ndarray, si_img: np.ndarray, cfg: CosetConfig) -> np.ndarray:
    plane = np.asarray(plane)
    si_img = np.asarray(si_img)
    if plane.shape != si_img.shape:
        raise ValueError(f"shape mismatch: symbols {plane.shape} vs side information {si_img.shape}")
    if plane.size and (plane.min() < 0 or plane.max() >= cfg.modulus):
        raise ValueError("symbol plane holds values outside [0, M)")
    _check_range(si_img, cfg, "si_img")
    return _decode_array(plane, si_img, cfg).astype(si_img.dtype)


def coset_bit_cost(shape: tuple[int, ...], cfg: CosetConfig) -> int:
    return int(np.prod(shape)) * cfg.bits_per_symbol


def toy_report(cfg: CosetConfig | None = None) -> dict:
    """Replay the 110/113 walk-through and the exhaustive 8-bit check."""
    cfg = cfg or CosetConfig()
    s = coset_encode(110, cfg)
    x_rec = coset_decode(s, 113, cfg)
    xs, ys = np.meshgrid(np.arange(cfg.alphabet_max + 1), np.arange(cfg.alphabet_max + 1), indexing="ij")
    close = np.abs(xs - ys) <= cfg.correlation_bound
    xs, ys = xs[close], ys[close]
    rec = coset_decode_image(coset_encode_image(xs, cfg), ys, cfg)
    n_ok = int((rec == xs).sum())
    return {
        "symbol": s,
        "decoded": x_rec,
        "walkthrough_ok": s == 6 and x_rec == 110,
        "pairs": int(xs.size),
        "exact": n_ok,
        "bits_per_symbol": cfg.bits_per_symbol,
        "exhaustive_ok": n_ok == xs.size,
    }
