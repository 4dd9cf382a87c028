import numpy as np
import pytest
import torch

from dsin.bitstream import (
    HEADER_BYTES, Bitstream, BitstreamError, DsinHeader, compress_file, decode_latents, decompress_file,
    estimated_bits,
)
from dsin.codec import CodecConfig
from dsin.model import DSIN, ModelConfig, load_checkpoint, save_checkpoint
from dsin.si_net import SiNetConfig


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    m = DSIN(ModelConfig(codec=CodecConfig(base_width=8), sinet=SiNetConfig(width=8)))
    with torch.no_grad():
        m.ae.entropy.logits.copy_(torch.randn_like(m.ae.entropy.logits))
    return m.eval()


@pytest.fixture
def image(rng):
    return rng.random((60, 90, 3))


def test_header_roundtrip():
    h = DsinHeader(64, 96, 8, 12, 8, 6, bytes(range(32)), 123)
    b = h.pack()
    assert len(b) == HEADER_BYTES == 4 + 7 * 8 + 32 + 8
    assert b[:4] == b"DSIN"
    assert DsinHeader.unpack(b) == h


def test_header_errors():
    h = DsinHeader(64, 96, 8, 12, 8, 6, bytes(32), 0).pack()
    with pytest.raises(BitstreamError):
        DsinHeader.unpack(b"XXXX" + h[4:])
    with pytest.raises(BitstreamError):
        DsinHeader.unpack(h[:20])
    bad_version = h[:4] + (99).to_bytes(8, "little") + h[12:]
    with pytest.raises(BitstreamError):
        DsinHeader.unpack(bad_version)


def test_roundtrip_matches_direct_decode(model, image):
    bs = compress_file(image, model)
    again = Bitstream.from_bytes(bs.to_bytes())
    assert again == bs
    zbar = decode_latents(again, model)
    r = model.reconstruct(image, None)
    assert torch.equal(zbar.symbols, r["symbols"])
    out = decompress_file(again, model)
    assert out.shape == image.shape
    assert np.array_equal(out, r["x_dec"])


def test_with_side_information(model, image, rng):
    bs = compress_file(image, model)
    y = rng.random((60, 90, 3))
    out = decompress_file(bs, model, y)
    assert np.allclose(out, model.reconstruct(image, y)["x_hat"], atol=1e-6)
    with pytest.raises(ValueError):
        decompress_file(bs, model, y[:10, :10])


def test_coded_size_close_to_estimate(model, image):
    bs = compress_file(image, model)
    sym = model.reconstruct(image)["symbols"][0].numpy()
    est = estimated_bits(sym, model)
    assert 8 * len(bs.payload) <= est * 1.02 + 64
    assert bs.payload_bpp == 8 * len(bs.payload) / (60 * 90)
    assert bs.bpp == pytest.approx(bs.payload_bpp + 8 * HEADER_BYTES / (60 * 90))


def test_hash_mismatch(model, image):
    bs = compress_file(image, model)
    other = DSIN(model.cfg)
    with pytest.raises(BitstreamError):
        decompress_file(bs, other)


def test_truncated_file(model, image, tmp_path):
    bs = compress_file(image, model)
    p = tmp_path / "a.dsin"
    bs.save(p)
    data = p.read_bytes()
    with pytest.raises(BitstreamError):
        Bitstream.from_bytes(data[:-3])
    cut = Bitstream(DsinHeader(**{**bs.header.__dict__, "payload_length": 2}), bs.payload[:2])
    with pytest.raises(BitstreamError):
        decompress_file(cut, model)


def test_checkpoint_roundtrip(model, image, tmp_path):
    digest = save_checkpoint(model, tmp_path / "m.npz")
    m2 = load_checkpoint(tmp_path / "m.npz")
    bs = compress_file(image, model)
    assert bs.header.model_hash == digest
    assert np.array_equal(decompress_file(bs, m2), decompress_file(bs, model))
    assert compress_file(image, m2).to_bytes() == bs.to_bytes()


def test_checkpoint_tamper_detected(model, tmp_path):
    save_checkpoint(model, tmp_path / "m.npz")
    with np.load(tmp_path / "m.npz") as z:
        arrays = {k: z[k] for k in z.files}
    k = next(k for k in arrays if k.startswith("param/"))
    arrays[k] = arrays[k] + 1
    np.savez(tmp_path / "t.npz", **arrays)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "t.npz")


def test_bad_input_shape(model):
    with pytest.raises(ValueError):
        compress_file(np.zeros((10, 10)), model)
