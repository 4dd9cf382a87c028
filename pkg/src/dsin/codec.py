"""Compressive auto-encoder: analysis transform, scalar quantizer, synthesis
transform and a factorized categorical entropy model.

Images are float tensors in ``[0, 1]`` laid out ``(N, 3, H, W)``. Latents are
``(N, c, h, w)`` with ``h = ceil(H / f)``, ``w = ceil(W / f)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PROB_FLOOR = 1e-9
HEAD_GAIN = 10.0  # init scale of the encoder projection


@dataclass
class CodecConfig:
    downsample_factor: int = 8
    latent_channels: int = 8
    num_centers: int = 6
    base_width: int = 32
    target_bpp: float = 0.1
    center_range: float = 2.0

    def __post_init__(self):
        f = self.downsample_factor
        if f < 2 or f & (f - 1):
            raise ValueError(f"downsample_factor must be a power of 2, got {f}")
        if self.num_centers < 2:
            raise ValueError("num_centers must be >= 2")
        if self.target_bpp <= 0:
            raise ValueError("target_bpp must be positive")

    @property
    def num_stages(self) -> int:
        return int(math.log2(self.downsample_factor))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentGrid:
    """Quantized latent ``Z̄``: symbol indices plus the center values they map to."""

    symbols: torch.Tensor  # (N, c, h, w) int64
    values: torch.Tensor  # (N, c, h, w) float, centers[symbols] (+ straight-through path)
    image_size: tuple[int, int]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.symbols.shape)

    @property
    def num_pixels(self) -> int:
        return self.image_size[0] * self.image_size[1]


class ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), 0.2))


class Encoder(nn.Module):
    """Stride-2 conv + residual block per stage, then a 3x3 projection to ``c`` channels."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        w = cfg.base_width
        stages = []
        cin = 3
        for _ in range(cfg.num_stages):
            stages += [nn.Conv2d(cin, w, 5, stride=2, padding=2), nn.LeakyReLU(0.2), ResBlock(w)]
            cin = w
        self.body = nn.Sequential(*stages)
        self.head = nn.Conv2d(w, cfg.latent_channels, 3, padding=1)
        # default init leaves every latent between the two middle centers; start them spread out
        with torch.no_grad():
            self.head.weight.mul_(HEAD_GAIN)
            self.head.bias.mul_(HEAD_GAIN)
        # soft bound a little past the outer centers: the straight-through gradient
        # would otherwise push saturated latents outwards without limit
        self.bound = cfg.center_range * (1 + 1 / max(cfg.num_centers - 1, 1))

    def forward(self, x):
        h = self.head(self.body(x - 0.5))
        return self.bound * torch.tanh(h / self.bound)


class Decoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        w = cfg.base_width
        self.head = nn.Conv2d(cfg.latent_channels, w, 3, padding=1)
        stages = []
        for i in range(cfg.num_stages):
            last = i == cfg.num_stages - 1
            stages += [ResBlock(w), nn.ConvTranspose2d(w, 3 if last else w, 5, stride=2, padding=2, output_padding=1)]
            if not last:
                stages.append(nn.LeakyReLU(0.2))
        self.body = nn.Sequential(*stages)

    def forward(self, zbar):
        return self.body(F.leaky_relu(self.head(zbar), 0.2)) + 0.5


class EntropyModel(nn.Module):
    """Per-channel categorical distribution over the ``L`` quantizer centers."""

    def __init__(self, channels: int, num_centers: int):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(channels, num_centers))

    def probs(self) -> torch.Tensor:
        p = torch.softmax(self.logits, dim=-1).clamp_min(PROB_FLOOR)
        return p / p.sum(dim=-1, keepdim=True)

    def log2_probs(self) -> torch.Tensor:
        return torch.log2(self.probs())

    def symbol_bits(self, symbols: torch.Tensor) -> torch.Tensor:
        """Bits for every symbol of an ``(N, c, h, w)`` grid, same shape."""
        lp = self.log2_probs()  # (c, L)
        n, c, h, w = symbols.shape
        idx = symbols.permute(1, 0, 2, 3).reshape(c, -1)
        bits = -torch.gather(lp, 1, idx)
        return bits.reshape(c, n, h, w).permute(1, 0, 2, 3)


def pad_to_multiple(x: torch.Tensor, multiple: int) -> torch.Tensor:
    """Reflect-pad height/width up to the next multiple (no-op when divisible)."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


def check_centers(centers: torch.Tensor) -> None:
    c = centers.detach()
    d = c[1:] - c[:-1]
    if torch.any(d == 0):
        raise ValueError("quantizer centers must be distinct")
    if torch.any(d < 0):
        raise ValueError("quantizer centers must be sorted ascending")


def quantize(z: torch.Tensor, centers: torch.Tensor, image_size=None) -> LatentGrid:
    """Nearest-center scalar quantization with a straight-through gradient.

    The forward value is ``centers[idx]``; the Jacobian with respect to ``z`` is
    the identity and centers receive the gradient of the values they emit.
    """
    check_centers(centers)
    # searchsorted over midpoints: a value exactly on a midpoint goes to the lower index
    mids = (centers[1:] + centers[:-1]).detach() / 2
    idx = torch.searchsorted(mids.contiguous(), z.detach().contiguous(), right=False)
    values = centers[idx] + (z - z.detach())
    if image_size is None:
        image_size = tuple(z.shape[-2:]) if z.dim() >= 2 else (1, z.shape[-1])
    return LatentGrid(symbols=idx, values=values, image_size=tuple(int(s) for s in image_size))


def interpolated_bits(z: torch.Tensor, centers: torch.Tensor, log2_probs: torch.Tensor) -> torch.Tensor:
    """Per-latent code length, piecewise linear in ``z`` between adjacent centers.

    ``z`` is ``(N, c, h, w)``, ``log2_probs`` is ``(c, L)``. Equals the exact
    cost at every center.
    """
    L = centers.numel()
    zc = z.clamp(float(centers[0]), float(centers[-1]))
    k = (torch.searchsorted(centers.contiguous(), zc.detach().contiguous()) - 1).clamp(0, L - 2)
    lo, hi = centers[k], centers[k + 1]
    t = (zc - lo) / (hi - lo)
    n, c, h, w = z.shape
    cost = -log2_probs[None, :, None, None, :].expand(n, c, h, w, L)
    b0 = torch.gather(cost, -1, k.unsqueeze(-1)).squeeze(-1)
    b1 = torch.gather(cost, -1, (k + 1).unsqueeze(-1)).squeeze(-1)
    return (1 - t) * b0 + t * b1


class AutoEncoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        L = cfg.num_centers
        self.centers = nn.Parameter(torch.linspace(-cfg.center_range, cfg.center_range, L))
        self.entropy = EntropyModel(cfg.latent_channels, L)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if torch.isnan(x).any():
            raise ValueError("NaN in input image")
        return self.encoder(pad_to_multiple(x, self.cfg.downsample_factor))

    def quantize(self, z: torch.Tensor, image_size) -> LatentGrid:
        return quantize(z, self.centers, image_size)

    def decode(self, zbar: LatentGrid, clamp: bool = False) -> torch.Tensor:
        H, W = zbar.image_size
        f = self.cfg.downsample_factor
        h, w = zbar.values.shape[-2:]
        if h != -(-H // f) or w != -(-W // f) or zbar.values.shape[1] != self.cfg.latent_channels:
            raise ValueError(
                f"latent grid {tuple(zbar.values.shape)} inconsistent with image size {H}x{W} and f={f}"
            )
        out = self.decoder(zbar.values)[..., :H, :W]
        return out.clamp(0, 1) if clamp else out

    def rate_bits(self, zbar: LatentGrid, z: torch.Tensor | None = None) -> torch.Tensor:
        """Total bits per image, shape ``(N,)``.

        The value is the exact model cross-entropy of the hard symbols. When the
        real latent ``z`` is given, a surrogate contributes the gradient with
        respect to ``z`` (its value cancels out): the symbol cost linearly
        interpolated between the two centers bracketing each latent, so the
        pull is towards the cheaper neighbour and vanishes outside the centers.
        """
        bits = self.entropy.symbol_bits(zbar.symbols).sum(dim=(1, 2, 3))
        if z is not None:
            soft = interpolated_bits(z, self.centers.detach(), self.entropy.log2_probs().detach()).sum(dim=(1, 2, 3))
            bits = bits + (soft - soft.detach())
        return bits

    def rate_bpp(self, zbar: LatentGrid, z: torch.Tensor | None = None) -> torch.Tensor:
        return self.rate_bits(zbar, z) / zbar.num_pixels

    def forward(self, x: torch.Tensor):
        """Returns ``(x_dec, zbar, z)``; ``x_dec`` is unclamped."""
        z = self.encode(x)
        zbar = self.quantize(z, x.shape[-2:])
        return self.decode(zbar), zbar, z

    @torch.no_grad()
    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        """Inference-mode pass used for the side image: clamped, no gradients."""
        x_dec, _, _ = self.forward(x)
        return x_dec.clamp(0, 1)


def rate(zbar: LatentGrid, em: EntropyModel) -> tuple[float, float]:
    """``(bits, bpp)`` of a quantized grid under the entropy model."""
    with torch.no_grad():
        bits = float(em.symbol_bits(zbar.symbols).sum())
    return bits, bits / zbar.num_pixels


def empirical_entropy_bits(symbols: np.ndarray, num_centers: int) -> float:
    """Per-channel histogram entropy times count: lower bound for any factorized model."""
    s = np.asarray(symbols)
    total = 0.0
    for ch in range(s.shape[1]):
        counts = np.bincount(s[:, ch].ravel(), minlength=num_centers).astype(float)
        p = counts[counts > 0] / counts.sum()
        total += -(counts[counts > 0] * np.log2(p)).sum()
    return total
