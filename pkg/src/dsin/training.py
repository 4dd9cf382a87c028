"""Losses and the two-stage training loop.

Stage ``pretrain`` fits the auto-encoder alone with
``L1(x, x_dec) + beta * max(bpp - target, 0)``. Stage ``joint`` starts from a
pretrained auto-encoder and minimises
``(1 - alpha) * L1(x, x_dec) + alpha * L1(x, x_hat) + beta * max(bpp - target, 0)``
with the SI-Finder recomputed from the current ``x_dec`` every step.

The entropy model is additionally fitted to the current symbols by maximum
likelihood (a term whose gradient reaches only the model logits), with its own
larger learning rate so that it keeps up with the encoder.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .metrics import ms_ssim
from .model import DSIN, ModelConfig, to_tensor

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    alpha: float = 0.7
    beta: float = 0.2
    distortion: str = "L1"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.distortion != "L1":
            raise ValueError("only the L1 distortion is supported for training")


@dataclass
class TrainConfig:
    stage: str = "pretrain"  # pretrain | joint
    iterations: int = 2000
    lr: float = 1e-4
    entropy_lr: float = 1e-2
    sinet_lr: float | None = None  # SI-Net learning rate; None uses lr
    decay_at: float | None = None  # fraction of the run after which every lr drops by decay_factor
    decay_factor: float = 0.1
    sinet_warmup: int = 0  # joint stage: iterations with the codec held fixed while SI-Net trains
    rate_delay: int = 0  # iterations trained on distortion alone (beta = 0)
    rate_warmup: int = 0  # then beta ramps linearly from 0 over this many iterations
    batch_size: int = 1
    seed: int = 0
    log_every: int = 1
    eval_every: int = 250
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.stage not in ("pretrain", "joint"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size != 1:
            raise ValueError("training uses one (X, Y) pair per step")
        if self.decay_at is not None and not 0.0 < self.decay_at <= 1.0:
            raise ValueError("decay_at must lie in (0, 1]")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    pass


def rate_hinge(rate_bpp, target_bpp: float):
    return torch.clamp(rate_bpp - target_bpp, min=0.0)


def loss_pretrain(x, x_dec, rate_bpp, beta: float, target_bpp: float):
    """Mean absolute error plus the hinged rate penalty."""
    return (x - x_dec).abs().mean() + beta * rate_hinge(rate_bpp, target_bpp).mean()


def loss_joint(x, x_dec, x_hat, rate_bpp, weights: LossWeights, target_bpp: float, beta: float | None = None):
    a = weights.alpha
    beta = weights.beta if beta is None else beta
    d_dec = (x - x_dec).abs().mean()
    d_hat = (x - x_hat).abs().mean()
    return (1 - a) * d_dec + a * d_hat + beta * rate_hinge(rate_bpp, target_bpp).mean()


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _sort_centers(model: DSIN) -> None:
    c = model.ae.centers
    with torch.no_grad():
        if torch.any(c[1:] <= c[:-1]):
            s, _ = torch.sort(c)
            # keep them distinct
            s = s + torch.arange(len(s), dtype=s.dtype) * 1e-6
            c.copy_(s)


def make_optimizer(model: DSIN, cfg: TrainConfig):
    ent = list(model.ae.entropy.parameters())
    si = list(model.sinet.parameters()) if model.sinet is not None else []
    ids = {id(p) for p in ent + si}
    rest = [p for p in model.parameters() if id(p) not in ids]
    groups = [{"params": rest, "name": "codec"}, {"params": ent, "lr": cfg.entropy_lr, "name": "entropy"}]
    if si:
        groups.append({"params": si, "lr": cfg.sinet_lr or cfg.lr, "name": "sinet"})
    opt = torch.optim.Adam(groups, lr=cfg.lr)
    for g in opt.param_groups:
        g["base_lr"] = g["lr"]
    return opt


def apply_lr_schedule(opt, cfg: TrainConfig, iteration: int) -> None:
    """Codec groups frozen during ``sinet_warmup`` (when an SI-Net is trained), then step decay past ``decay_at``."""
    past = cfg.decay_at is not None and iteration >= int(cfg.decay_at * cfg.iterations)
    warm = iteration < cfg.sinet_warmup and any(g["name"] == "sinet" for g in opt.param_groups)
    for g in opt.param_groups:
        frozen = warm and g["name"] != "sinet"
        g["lr"] = 0.0 if frozen else g["base_lr"] * (cfg.decay_factor if past else 1.0)


def beta_at(cfg: TrainConfig, iteration: int) -> float:
    """Rate weight schedule: zero during ``rate_delay``, then a linear ramp."""
    t = iteration - cfg.rate_delay
    if t < 0:
        return 0.0
    if cfg.rate_warmup <= 0:
        return cfg.weights.beta
    return cfg.weights.beta * min(1.0, t / cfg.rate_warmup)


def train_step(model: DSIN, opt, x, y, cfg: TrainConfig, beta: float | None = None):
    target = model.cfg.codec.target_bpp
    beta = cfg.weights.beta if beta is None else beta
    out = model(x, y if model.uses_si else None)
    zbar = out["zbar"]
    bpp = model.ae.rate_bpp(zbar, out["z"])
    if cfg.stage == "pretrain" or not model.uses_si:
        loss = loss_pretrain(x, out["x_dec"], bpp, beta, target)
    else:
        loss = loss_joint(x, out["x_dec"], out["x_hat"], bpp, cfg.weights, target, beta)
    fit = model.ae.entropy.symbol_bits(zbar.symbols).sum() / (zbar.num_pixels * x.shape[0])
    opt.zero_grad(set_to_none=True)
    (loss + fit).backward()
    opt.step()
    _sort_centers(model)
    return float(loss.detach()), float(bpp.detach().mean()), out


def pair_order(n: int, iterations: int, seed: int) -> list[int]:
    """Seed-deterministic visiting order: reshuffled every epoch."""
    rng = np.random.default_rng(seed)
    order: list[int] = []
    while len(order) < iterations:
        order.extend(rng.permutation(n).tolist())
    return order[:iterations]


def evaluate_pair(model: DSIN, x: np.ndarray, y: np.ndarray | None) -> dict:
    r = model.reconstruct(x, y if model.uses_si else None)
    return {"msssim": ms_ssim(x, r["x_hat"]), "msssim_dec": ms_ssim(x, r["x_dec"]), "bpp": r["bpp"]}


def train_stage(pairs, model_cfg: ModelConfig, cfg: TrainConfig, init: DSIN | None = None,
                heldout=None, log_path=None):
    """Train one stage and return ``(model, log_records)``.

    ``pairs`` is a list of ``(X, Y)`` float images. For the joint stage
    ``init`` must carry pretrained auto-encoder weights; any SI-Net weights it
    holds are reused when the configs match.
    """
    if cfg.stage == "joint" and init is None:
        raise ValueError("joint stage needs a pretrained auto-encoder")
    if not pairs:
        raise ValueError("no training pairs")
    seed_everything(cfg.seed)
    model = DSIN(model_cfg)
    if init is not None:
        model.ae.load_state_dict(init.ae.state_dict())
        if init.sinet is not None and model.sinet is not None and init.cfg.sinet == model.cfg.sinet:
            model.sinet.load_state_dict(init.sinet.state_dict())
    model.train()
    opt = make_optimizer(model, cfg)
    xs = [to_tensor(x) for x, _ in pairs]
    ys = [to_tensor(y) for _, y in pairs]
    records = []
    fh = open(log_path, "w") if log_path else None
    try:
        for it, k in enumerate(pair_order(len(pairs), cfg.iterations, cfg.seed)):
            apply_lr_schedule(opt, cfg, it)
            loss, bpp, _ = train_step(model, opt, xs[k], ys[k], cfg, beta_at(cfg, it))
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at iteration {it} (pair {k}, bpp {bpp:.4f})")
            rec = {"iteration": it, "loss": loss, "bpp": bpp, "msssim": None}
            last = it == cfg.iterations - 1
            if heldout is not None and (last or (cfg.eval_every and (it + 1) % cfg.eval_every == 0)):
                rec["msssim"] = evaluate_pair(model, *heldout)["msssim"]
                model.train()
            if last or it % cfg.log_every == 0 or rec["msssim"] is not None:
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
    finally:
        if fh:
            fh.close()
    model.eval()
    return model, records


def calibrate_beta(pairs, model_cfg: ModelConfig, init: DSIN | None, warmup_iters: int = 100,
                   lo: float = 0.01, hi: float = 10.0, steps: int = 4, seed: int = 0,
                   tolerance: float = 0.1, lr: float = 1e-4) -> float:
    """Bisection on log(beta): smallest beta whose warm-up run ends within tolerance of target bpp."""
    target = model_cfg.codec.target_bpp
    for _ in range(steps):
        mid = math.sqrt(lo * hi)
        cfg = TrainConfig(stage="pretrain", iterations=warmup_iters, lr=lr, seed=seed, weights=LossWeights(beta=mid))
        m, recs = train_stage(pairs, copy.deepcopy(model_cfg), cfg, init=init)
        tail = np.mean([r["bpp"] for r in recs[-max(1, warmup_iters // 5):]])
        if tail <= target * (1 + tolerance):
            hi = mid
        else:
            lo = mid
    return hi
