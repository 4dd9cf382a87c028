"""
Train a small codec, write a .dsin file, decode it with and without Y
====================================================================

A few hundred iterations on synthetic pairs is enough to see the pieces work
together; the numbers are far from a converged model.
"""
import sys
from pathlib import Path

import numpy as np

from dsin.bitstream import Bitstream, HEADER_BYTES, compress_file, decompress_file
from dsin.codec import CodecConfig
from dsin.data import PairSpec, make_pairs
from dsin.metrics import ms_ssim
from dsin.model import ModelConfig, load_checkpoint, save_checkpoint
from dsin.si_net import SiNetConfig
from dsin.training import TrainConfig, train_stage

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/roundtrip_demo")
out.mkdir(parents=True, exist_ok=True)
iters = int(sys.argv[2]) if len(sys.argv) > 2 else 400

spec = PairSpec(max_shift=(4, 12), gain=(0.9, 1.1), noise_sigma=0.02)
train = make_pairs(32, spec, seed=0).pairs()
x, y = make_pairs(1, spec, seed=1, split="test").pairs()[0]

codec = CodecConfig(base_width=16, latent_channels=6, target_bpp=0.15)
pre, _ = train_stage(train, ModelConfig(codec=codec, si_mode="off"), TrainConfig(iterations=iters, lr=1e-3))
model, log = train_stage(train, ModelConfig(codec=codec, sinet=SiNetConfig(width=16)),
                         TrainConfig(stage="joint", iterations=iters // 2, lr=1e-3), init=pre)
print(f"joint stage: last loss {log[-1]['loss']:.4f}, bpp {log[-1]['bpp']:.4f}")

# the checkpoint hash goes into every file header
save_checkpoint(model, out / "model.npz")
model = load_checkpoint(out / "model.npz")
bs = compress_file(x, model)
bs.save(out / "x.dsin")
print(f"x.dsin: {HEADER_BYTES} header + {len(bs.payload)} payload bytes -> {bs.payload_bpp:.4f} bpp payload")

bs = Bitstream.load(out / "x.dsin")
x_dec = decompress_file(bs, model)
x_hat = decompress_file(bs, model, si=y)
print(f"MS-SSIM without Y {ms_ssim(x, x_dec):.4f}, with Y {ms_ssim(x, x_hat):.4f}")
print("decoding with Y changes", f"{np.mean(np.abs(x_hat - x_dec) > 1 / 255):.1%}", "of the pixel values")
