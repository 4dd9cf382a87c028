"""Full network: auto-encoder, SI-Finder and SI-Net, plus the checkpoint format.

``si_mode`` selects how the decoder uses Y:

``off``    auto-encoder only (the no-side-information baseline)
``syn``    SI-Finder builds ``y_syn`` from Y, SI-Net fuses it with ``x_dec``
``raw``    Y is concatenated with ``x_dec`` as is (no SI-Finder)
``zeros``  SI-Net runs on an all-zero side image (extra layers, no information)
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .codec import AutoEncoder, CodecConfig
from .si_finder import MatcherConfig, PatchAssignment, assemble_ysyn, find_assignment
from .si_net import SiNet, SiNetConfig

SI_MODES = ("off", "syn", "raw", "zeros")
CHECKPOINT_FORMAT = 1


@dataclass
class ModelConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    sinet: SiNetConfig = field(default_factory=SiNetConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    si_mode: str = "syn"

    def __post_init__(self):
        if self.si_mode not in SI_MODES:
            raise ValueError(f"si_mode must be one of {SI_MODES}")

    def to_dict(self) -> dict:
        return {
            "codec": self.codec.to_dict(),
            "sinet": self.sinet.to_dict(),
            "matcher": dict(self.matcher.__dict__),
            "si_mode": self.si_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            codec=CodecConfig(**d.get("codec", {})),
            sinet=SiNetConfig(**d.get("sinet", {})),
            matcher=MatcherConfig(**d.get("matcher", {})),
            si_mode=d.get("si_mode", "syn"),
        )


def to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(H, W, 3)`` array -> ``(1, 3, H, W)`` tensor."""
    return torch.as_tensor(np.ascontiguousarray(np.asarray(img).transpose(2, 0, 1)), dtype=dtype)[None]


def to_numpy(t: torch.Tensor) -> np.ndarray:
    """``(1, 3, H, W)`` tensor -> ``(H, W, 3)`` float64 array."""
    return t.detach()[0].permute(1, 2, 0).double().cpu().numpy()


class DSIN(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.ae = AutoEncoder(cfg.codec)
        self.sinet = SiNet(cfg.sinet) if cfg.si_mode != "off" else None

    @property
    def uses_si(self) -> bool:
        return self.cfg.si_mode != "off"

    def side_image(self, x_dec: torch.Tensor, y: torch.Tensor | None, matcher: MatcherConfig | None = None):
        """Side input of SI-Net for each batch item and the assignments used.

        Nothing here is differentiable: Y goes through the auto-encoder without
        gradients and the patch assignment is an argmax.
        """
        mode = self.cfg.si_mode
        if mode == "zeros":
            return torch.zeros_like(x_dec), None
        if y is None:
            raise ValueError(f"si_mode={mode!r} needs a side image")
        if mode == "raw":
            if y.shape != x_dec.shape:
                raise ValueError("raw side image must match the size of X")
            return y.to(x_dec.dtype).detach(), None
        matcher = matcher or self.cfg.matcher
        with torch.no_grad():
            was_training = self.ae.training
            self.ae.eval()
            y_dec = self.ae.reconstruct(y.to(x_dec.dtype))
            self.ae.train(was_training)
        outs, assigns = [], []
        for b in range(x_dec.shape[0]):
            xd = to_numpy(x_dec[b:b + 1].clamp(0, 1))
            f = find_assignment(xd, to_numpy(y_dec[b:b + 1]), matcher)
            ys = assemble_ysyn(to_numpy(y[b:b + 1]), f)
            outs.append(to_tensor(ys, x_dec.dtype))
            assigns.append(f)
        return torch.cat(outs).to(x_dec.device), assigns

    def fuse(self, x_dec, side):
        return self.sinet(x_dec, side)

    def forward(self, x: torch.Tensor, y: torch.Tensor | None = None, assignment: list[PatchAssignment] | None = None):
        """Training-mode pass. Returns a dict with x_dec, x_hat, zbar, z, y_syn, assignment."""
        x_dec, zbar, z = self.ae(x)
        out = {"x_dec": x_dec, "zbar": zbar, "z": z, "x_hat": x_dec, "y_syn": None, "assignment": None}
        if not self.uses_si:
            return out
        if assignment is not None:
            side = torch.cat([to_tensor(assemble_ysyn(to_numpy(y[b:b + 1]), f), x_dec.dtype)
                              for b, f in enumerate(assignment)])
        else:
            side, assignment = self.side_image(x_dec, y)
        out["y_syn"] = side
        out["assignment"] = assignment
        out["x_hat"] = self.fuse(x_dec, side)
        return out

    @torch.no_grad()
    def reconstruct(self, x: np.ndarray, y: np.ndarray | None = None) -> dict:
        """Evaluation pass on numpy images; outputs clamped to [0, 1].

        Without ``y`` a model that needs a side image returns ``x_hat = x_dec``.
        """
        self.eval()
        xt = to_tensor(x)
        yt = to_tensor(y) if y is not None else None
        if yt is None and self.cfg.si_mode in ("syn", "raw"):
            x_dec, zbar, z = self.ae(xt)
            out = {"x_dec": x_dec, "x_hat": x_dec, "zbar": zbar, "y_syn": None, "assignment": None}
        else:
            out = self.forward(xt, yt if self.uses_si else None)
        res = {
            "x_dec": to_numpy(out["x_dec"].clamp(0, 1)),
            "x_hat": to_numpy(out["x_hat"].clamp(0, 1)),
            "symbols": out["zbar"].symbols,
            "bpp": float(self.ae.rate_bpp(out["zbar"])[0]),
            "y_syn": to_numpy(out["y_syn"]) if out["y_syn"] is not None else None,
            "assignment": out["assignment"][0] if out["assignment"] else None,
        }
        return res


# ----------------------------------------------------------------------------
# checkpoint container: one .npz holding the config JSON, every parameter and a
# sha256 over both

def _state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def model_hash(config: dict, arrays: dict[str, np.ndarray]) -> bytes:
    h = hashlib.sha256()
    h.update(json.dumps(config, sort_keys=True).encode())
    for k in sorted(arrays):
        a = np.ascontiguousarray(arrays[k])
        h.update(k.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.digest()


def checkpoint_hash(model: DSIN) -> bytes:
    return model_hash(model.cfg.to_dict(), _state_arrays(model))


def save_checkpoint(model: DSIN, path, extra: dict | None = None) -> bytes:
    cfg = model.cfg.to_dict()
    arrays = _state_arrays(model)
    digest = model_hash(cfg, arrays)
    meta = {"format": CHECKPOINT_FORMAT, "config": cfg, "hash": digest.hex(), "extra": extra or {}}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
             **{f"param/{k}": v for k, v in arrays.items()})
    Path(path).write_bytes(buf.getvalue())
    return digest


def load_checkpoint(path) -> DSIN:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        arrays = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {meta.get('format')}")
    if model_hash(meta["config"], arrays).hex() != meta["hash"]:
        raise ValueError(f"checkpoint {path} failed its content hash")
    model = DSIN(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    model.checkpoint_meta = meta
    return model
