"""Fusion network: dilated 3x3 convolutions over ``[x_dec, y_syn]``."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

LEAK = 0.2


@dataclass
class SiNetConfig:
    width: int = 32
    kernel: int = 3
    dilations: list[int] = field(default_factory=lambda: [1, 2, 4, 8, 4, 2, 1])
    residual: bool = True
    input_skip: bool = True  # the output conv also sees [x_dec, y_syn] directly

    def __post_init__(self):
        if not self.dilations:
            raise ValueError("dilation schedule must be non-empty")
        if any(d < 1 for d in self.dilations):
            raise ValueError("dilations must be >= 1")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")

    def receptive_field(self) -> int:
        """Receptive field (pixels per axis) of the whole stack incl. the output conv."""
        k = self.kernel - 1
        return 1 + sum(k * d for d in self.dilations) + k

    def to_dict(self) -> dict:
        return asdict(self)


class SiNet(nn.Module):
    def __init__(self, cfg: SiNetConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or SiNetConfig()
        layers = []
        cin = 6
        k = cfg.kernel
        for d in cfg.dilations:
            conv = nn.Conv2d(cin, cfg.width, k, padding=d * (k // 2), dilation=d)
            # He init keeps the activation scale through the stack (the default shrinks it per layer)
            nn.init.kaiming_normal_(conv.weight, a=LEAK, nonlinearity="leaky_relu")
            nn.init.zeros_(conv.bias)
            layers.append(conv)
            cin = cfg.width
        self.layers = nn.ModuleList(layers)
        self.out = nn.Conv2d(cfg.width + (6 if cfg.input_skip else 0), 3, k, padding=k // 2)
        # starts as the identity on x_dec when residual
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x_dec: torch.Tensor, y_syn: torch.Tensor) -> torch.Tensor:
        if x_dec.shape != y_syn.shape:
            raise ValueError(f"x_dec {tuple(x_dec.shape)} and y_syn {tuple(y_syn.shape)} differ")
        inp = torch.cat([x_dec, y_syn], dim=1)
        h = inp
        for conv in self.layers:
            h = F.leaky_relu(conv(h), LEAK)
        out = self.out(torch.cat([h, inp], dim=1) if self.cfg.input_skip else h)
        return x_dec + out if self.cfg.residual else out


def fuse(x_dec: torch.Tensor, y_syn: torch.Tensor, net: SiNet) -> torch.Tensor:
    return net(x_dec, y_syn)
