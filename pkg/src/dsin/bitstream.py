"""``.dsin`` files: fixed header plus a range-coded latent payload.

Layout (all integers unsigned 64-bit little-endian)::

    magic      4 bytes  b"DSIN"
    version    u64
    H, W       u64 x2   original image size
    h, w, c    u64 x3   latent grid
    L          u64      number of quantizer centers
    model hash 32 bytes sha256 of the checkpoint
    length     u64      payload bytes
    payload    ``length`` bytes

Symbols are scanned channel-major, then row, then column, each channel
coded with its own static distribution from the checkpoint.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .codec import LatentGrid
from .model import DSIN, checkpoint_hash, to_numpy, to_tensor
from .rangecoder import CorruptStreamError, cross_entropy_bits, range_decode, range_encode

MAGIC = b"DSIN"
VERSION = 1
_FIELDS = struct.Struct("<4s7Q32sQ")
HEADER_BYTES = _FIELDS.size


class BitstreamError(ValueError):
    pass


@dataclass
class DsinHeader:
    height: int
    width: int
    latent_h: int
    latent_w: int
    latent_c: int
    num_centers: int
    model_hash: bytes
    payload_length: int
    version: int = VERSION

    def pack(self) -> bytes:
        return _FIELDS.pack(MAGIC, self.version, self.height, self.width, self.latent_h, self.latent_w,
                            self.latent_c, self.num_centers, self.model_hash, self.payload_length)

    @classmethod
    def unpack(cls, data: bytes) -> "DsinHeader":
        if len(data) < HEADER_BYTES:
            raise BitstreamError("file shorter than the header")
        magic, version, H, W, h, w, c, L, digest, n = _FIELDS.unpack_from(data)
        if magic != MAGIC:
            raise BitstreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise BitstreamError(f"unsupported format version {version}")
        return cls(H, W, h, w, c, L, digest, n, version)


@dataclass
class Bitstream:
    header: DsinHeader
    payload: bytes

    def to_bytes(self) -> bytes:
        return self.header.pack() + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        hdr = DsinHeader.unpack(data)
        payload = data[HEADER_BYTES:]
        if len(payload) < hdr.payload_length:
            raise BitstreamError("payload truncated")
        return cls(hdr, payload[:hdr.payload_length])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Bitstream":
        return cls.from_bytes(Path(path).read_bytes())

    @property
    def num_pixels(self) -> int:
        return self.header.height * self.header.width

    @property
    def bpp(self) -> float:
        """Whole file, header included."""
        return 8 * (HEADER_BYTES + len(self.payload)) / self.num_pixels

    @property
    def payload_bpp(self) -> float:
        return 8 * len(self.payload) / self.num_pixels


def _channel_probs(model: DSIN) -> np.ndarray:
    with torch.no_grad():
        return model.ae.entropy.probs().double().numpy()


def _position_probs(model: DSIN, c: int, h: int, w: int) -> np.ndarray:
    p = _channel_probs(model)
    return np.repeat(p[:c], h * w, axis=0)


def encode_symbols(symbols: np.ndarray, model: DSIN) -> bytes:
    """``(c, h, w)`` symbol grid -> payload."""
    c, h, w = symbols.shape
    return range_encode(symbols.reshape(-1), _position_probs(model, c, h, w))


def estimated_bits(symbols: np.ndarray, model: DSIN) -> float:
    c, h, w = symbols.shape
    return cross_entropy_bits(symbols.reshape(-1), _position_probs(model, c, h, w))


def compress_file(x: np.ndarray, model: DSIN) -> Bitstream:
    """Encode an ``(H, W, 3)`` float image. Only the encoder half is used."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ValueError("expected an (H, W, 3) image")
    model.eval()
    with torch.no_grad():
        xt = to_tensor(x)
        z = model.ae.encode(xt)
        zbar = model.ae.quantize(z, x.shape[:2])
    sym = zbar.symbols[0].numpy()
    payload = encode_symbols(sym, model)
    c, h, w = sym.shape
    hdr = DsinHeader(x.shape[0], x.shape[1], h, w, c, model.cfg.codec.num_centers, checkpoint_hash(model), len(payload))
    return Bitstream(hdr, payload)


def decode_latents(b: Bitstream, model: DSIN) -> LatentGrid:
    hdr = b.header
    if hdr.model_hash != checkpoint_hash(model):
        raise BitstreamError("bitstream was written by a different model (hash mismatch)")
    cc = model.cfg.codec
    if hdr.num_centers != cc.num_centers or hdr.latent_c != cc.latent_channels:
        raise BitstreamError("header latent layout does not match the model")
    n = hdr.latent_c * hdr.latent_h * hdr.latent_w
    try:
        flat = range_decode(b.payload, n, _position_probs(model, hdr.latent_c, hdr.latent_h, hdr.latent_w))
    except CorruptStreamError as e:
        raise BitstreamError(str(e)) from e
    sym = torch.tensor(flat, dtype=torch.int64).reshape(1, hdr.latent_c, hdr.latent_h, hdr.latent_w)
    with torch.no_grad():
        values = model.ae.centers.detach()[sym]
    return LatentGrid(sym, values, (hdr.height, hdr.width))


def decompress_file(b: Bitstream, model: DSIN, si: np.ndarray | None = None) -> np.ndarray:
    """``X_dec`` without side information, ``X_hat`` with it. Output clamped to [0, 1].

    The latent payload is fully decoded before ``si`` is looked at.
    """
    zbar = decode_latents(b, model)
    model.eval()
    with torch.no_grad():
        x_dec = model.ae.decode(zbar)
        if si is None or not model.uses_si:
            return to_numpy(x_dec.clamp(0, 1))
        si = np.asarray(si, dtype=np.float64)
        if si.ndim != 3 or si.shape[-1] != 3:
            raise ValueError("side image must be (H, W, 3)")
        if model.cfg.si_mode == "raw" and si.shape[:2] != (b.header.height, b.header.width):
            raise ValueError("raw side image must have the size of X")
        m = model.cfg.matcher
        if si.shape[0] < m.patch_h or si.shape[1] < m.patch_w:
            raise ValueError(f"side image {si.shape[:2]} smaller than one {m.patch_h}x{m.patch_w} patch")
        side, _ = model.side_image(x_dec, to_tensor(si))
        return to_numpy(model.fuse(x_dec, side).clamp(0, 1))
