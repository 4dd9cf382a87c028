import json
import math

import numpy as np
import pytest
import torch

from conftest import fd_relative_error, smooth_image
from dsin.codec import CodecConfig
from dsin.model import DSIN, ModelConfig, to_tensor
from dsin.si_net import SiNetConfig
from dsin.training import (
    LossWeights, TrainConfig, TrainingDiverged, beta_at, loss_joint, loss_pretrain, pair_order, rate_hinge,
    train_stage,
)

SMALL = dict(codec=CodecConfig(base_width=8, latent_channels=4), sinet=SiNetConfig(width=8))


def crops(seed=0, n=3):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64) for _ in range(n)]


def test_pretrain_loss_arithmetic():
    x = torch.rand(1, 3, 8, 8)
    assert float(loss_pretrain(x, x, torch.tensor([0.05]), 1.0, 0.1)) == 0.0
    assert float(loss_pretrain(x, x + 0.1, torch.tensor([0.1]), 1.0, 0.1)) == pytest.approx(0.1, abs=1e-6)


def test_joint_loss_arithmetic():
    x = torch.zeros(1, 3, 4, 4)
    w = LossWeights(alpha=0.7)
    r = torch.tensor([0.0])
    assert float(loss_joint(x, x + 1, x, r, w, 0.1)) == pytest.approx(0.3)
    assert float(loss_joint(x, x, x + 1, r, w, 0.1)) == pytest.approx(0.7)
    # alpha = 1 keeps only the final output
    assert float(loss_joint(x, x + 5, x + 2, r, LossWeights(alpha=1.0), 0.1)) == pytest.approx(2.0)
    # identical images leave the rate term alone
    assert float(loss_joint(x, x, x, torch.tensor([0.5]), LossWeights(beta=2.0), 0.1)) == pytest.approx(0.8)


def test_joint_weight_ratio():
    x, xd, xh = crops(1)
    xd.requires_grad_(True)
    xh.requires_grad_(True)
    w = LossWeights(alpha=0.7)
    loss_joint(x, xd, xh, torch.zeros(1, dtype=torch.float64), w, 0.1).backward()
    # d|.|/d(x_dec) has magnitude (1 - alpha)/N everywhere, alpha/N for x_hat
    n = x.numel()
    assert torch.allclose(xd.grad.abs(), torch.full_like(xd, 0.3 / n))
    assert torch.allclose(xh.grad.abs(), torch.full_like(xh, 0.7 / n))


@pytest.mark.parametrize("rate, slope", [(0.05, 0.0), (0.08, 0.0), (0.15, 2.5), (0.4, 2.5)])
def test_hinge_finite_difference(rate, slope):
    r = torch.tensor([rate], dtype=torch.float64, requires_grad=True)
    x = torch.zeros(1, 3, 2, 2, dtype=torch.float64)
    loss_pretrain(x, x, r, 2.5, 0.1).backward()
    h = 1e-6
    fd = (float(loss_pretrain(x, x, r.detach() + h, 2.5, 0.1)) - float(loss_pretrain(x, x, r.detach() - h, 2.5, 0.1))) / (2 * h)
    assert float(r.grad) == slope
    assert fd == pytest.approx(slope, abs=1e-6)


def test_hinge_zero_below_target():
    r = torch.tensor([0.01, 0.2, 0.3])
    h = rate_hinge(r, 0.25)
    assert float(h[0]) == float(h[1]) == 0.0
    assert float(h[2]) == pytest.approx(0.05)


def test_loss_pretrain_gradcheck():
    x, xd, _ = crops(2)
    xd = xd.requires_grad_(True)
    r = torch.tensor([0.3], dtype=torch.float64, requires_grad=True)
    assert fd_relative_error(lambda a, b: loss_pretrain(x, a, b, 0.7, 0.1), [xd, r]) < 1e-4
    assert torch.autograd.gradcheck(lambda a, b: loss_pretrain(x, a, b, 0.7, 0.1), (xd, r))


def test_loss_joint_gradcheck():
    x, xd, xh = crops(3)
    xd.requires_grad_(True)
    xh.requires_grad_(True)
    r = torch.tensor([0.3], dtype=torch.float64, requires_grad=True)
    w = LossWeights(alpha=0.7, beta=1.3)
    assert fd_relative_error(lambda a, b, c: loss_joint(x, a, b, c, w, 0.1), [xd, xh, r]) < 1e-4
    assert torch.autograd.gradcheck(lambda a, b, c: loss_joint(x, a, b, c, w, 0.1), (xd, xh, r))


def _joint_grads(model, x, y, assignment=None):
    model.zero_grad(set_to_none=True)
    out = model(x, y, assignment)
    bpp = model.ae.rate_bpp(out["zbar"], out["z"])
    loss_joint(x, out["x_dec"], out["x_hat"], bpp, LossWeights(), 0.01).backward()
    return out, {k: p.grad.clone() for k, p in model.named_parameters() if p.grad is not None}


def test_no_gradient_through_y():
    rng = np.random.default_rng(0)
    torch.manual_seed(0)
    model = DSIN(ModelConfig(**SMALL)).double()
    x = to_tensor(smooth_image(rng), torch.float64)
    y = to_tensor(smooth_image(rng), torch.float64).requires_grad_(True)
    out, g_auto = _joint_grads(model, x, y)
    assert y.grad is None or torch.count_nonzero(y.grad) == 0
    assert not out["y_syn"].requires_grad
    # with the assignment held fixed the Y -> Y_dec path is irrelevant: same gradients
    _, g_fixed = _joint_grads(model, x, y.detach(), out["assignment"])
    assert g_auto.keys() == g_fixed.keys()
    assert all(torch.equal(g_auto[k], g_fixed[k]) for k in g_auto)
    # perturbing Y only where Y_syn never samples it changes nothing
    f = out["assignment"][0]
    used = np.zeros(y.shape[-2:], dtype=bool)
    ph, pw = model.cfg.matcher.patch_h, model.cfg.matcher.patch_w
    for r, c in f.offsets.reshape(-1, 2):
        used[r:r + ph, c:c + pw] = True
    if not used.all():
        y2 = y.detach().clone()
        y2[..., torch.from_numpy(~used)] += 0.3
        _, g_pert = _joint_grads(model, x, y2, out["assignment"])
        assert all(torch.equal(g_auto[k], g_pert[k]) for k in g_auto)


def test_no_rate_gradient_below_target():
    torch.manual_seed(0)
    model = DSIN(ModelConfig(codec=CodecConfig(base_width=8, latent_channels=4, target_bpp=50.0), si_mode="off"))
    x = torch.rand(1, 3, 32, 32)
    out = model(x)
    bpp = model.ae.rate_bpp(out["zbar"], out["z"])
    assert float(bpp.detach()) < 50
    g = torch.autograd.grad(rate_hinge(bpp, 50.0).sum(), [p for p in model.ae.parameters()], allow_unused=True)
    assert all(t is None or torch.count_nonzero(t) == 0 for t in g)


def test_beta_schedule():
    cfg = TrainConfig(rate_delay=10, rate_warmup=20, weights=LossWeights(beta=2.0))
    assert [beta_at(cfg, i) for i in (0, 9, 10, 20, 30, 100)] == [0.0, 0.0, 0.0, 1.0, 2.0, 2.0]
    assert beta_at(TrainConfig(), 0) == 0.2


def test_config_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha=1.2)
    with pytest.raises(ValueError):
        LossWeights(beta=0)
    with pytest.raises(ValueError):
        TrainConfig(stage="finetune")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=4)
    assert isinstance(TrainConfig(weights={"alpha": 0.5}).weights, LossWeights)


def test_pair_order_is_seeded_epochs():
    a = pair_order(5, 12, 3)
    assert a == pair_order(5, 12, 3)
    assert sorted(a[:5]) == sorted(a[5:10]) == list(range(5))
    assert a != pair_order(5, 12, 4)


def test_joint_needs_init():
    with pytest.raises(ValueError):
        train_stage([(np.zeros((16, 16, 3)),) * 2], ModelConfig(**SMALL), TrainConfig(stage="joint", iterations=1))
    with pytest.raises(ValueError):
        train_stage([], ModelConfig(**SMALL), TrainConfig(iterations=1))


def test_divergence_aborts(monkeypatch):
    import dsin.training as tr

    monkeypatch.setattr(tr, "loss_pretrain", lambda *a: torch.tensor(float("nan"), requires_grad=True))
    x = np.zeros((16, 16, 3))
    with pytest.raises(TrainingDiverged, match="iteration 0"):
        train_stage([(x, x)], ModelConfig(**SMALL, si_mode="off"), TrainConfig(iterations=3, lr=1e-3))


def test_overfit_single_pair():
    x = smooth_image(np.random.default_rng(5), 32, 32, sigma=4.0)
    mc = ModelConfig(codec=CodecConfig(base_width=16, latent_channels=8, target_bpp=4.0), si_mode="off")
    _, recs = train_stage([(x, x)], mc, TrainConfig(iterations=500, lr=1e-3, seed=0, eval_every=0))
    first = recs[0]["loss"]
    last = np.mean([r["loss"] for r in recs[-20:]])
    assert last < 0.25 * first


def test_training_deterministic(tmp_path):
    rng = np.random.default_rng(9)
    pairs = [(smooth_image(rng, 48, 48), smooth_image(rng, 48, 48)) for _ in range(3)]
    mc = ModelConfig(**SMALL, si_mode="off")
    tc = TrainConfig(iterations=15, lr=1e-3, seed=4, eval_every=5)
    m1, r1 = train_stage(pairs, mc, tc, heldout=pairs[0], log_path=tmp_path / "a.jsonl")
    m2, r2 = train_stage(pairs, mc, tc, heldout=pairs[0], log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()
    assert all(math.isclose(a["loss"], b["loss"], abs_tol=1e-6) for a, b in zip(r1, r2))
    jc = TrainConfig(stage="joint", iterations=4, lr=1e-3, seed=4)
    j1, s1 = train_stage(pairs, ModelConfig(**SMALL), jc, init=m1)
    j2, s2 = train_stage(pairs, ModelConfig(**SMALL), jc, init=m2)
    assert [r["loss"] for r in s1] == [r["loss"] for r in s2]
    assert all(torch.equal(a, b) for a, b in zip(j1.state_dict().values(), j2.state_dict().values()))
    recs = [json.loads(l) for l in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert len(recs) == 15 and recs[4]["msssim"] is not None and recs[0]["msssim"] is None


def test_lr_schedule_warmup_and_decay():
    from dsin.training import apply_lr_schedule, make_optimizer

    m = DSIN(ModelConfig(codec=CodecConfig(base_width=8, latent_channels=4), sinet=SiNetConfig(width=8), si_mode="syn"))
    cfg = TrainConfig(stage="joint", iterations=100, lr=1e-4, sinet_lr=1e-3, sinet_warmup=10, decay_at=0.8)
    opt = make_optimizer(m, cfg)
    lrs = lambda: {g["name"]: g["lr"] for g in opt.param_groups}
    apply_lr_schedule(opt, cfg, 0)
    assert lrs() == {"codec": 0.0, "entropy": 0.0, "sinet": 1e-3}
    apply_lr_schedule(opt, cfg, 10)
    assert lrs() == {"codec": 1e-4, "entropy": cfg.entropy_lr, "sinet": 1e-3}
    apply_lr_schedule(opt, cfg, 80)
    assert lrs() == pytest.approx({"codec": 1e-5, "entropy": cfg.entropy_lr / 10, "sinet": 1e-4})
    # SI-Net params sit in exactly one group
    ids = [id(p) for g in opt.param_groups for p in g["params"]]
    assert len(ids) == len(set(ids)) == len(list(m.parameters()))


def test_warmup_ignored_without_sinet():
    from dsin.training import apply_lr_schedule, make_optimizer

    m = DSIN(ModelConfig(codec=CodecConfig(base_width=8, latent_channels=4), si_mode="off"))
    cfg = TrainConfig(iterations=100, lr=1e-4, sinet_warmup=50)
    opt = make_optimizer(m, cfg)
    apply_lr_schedule(opt, cfg, 0)
    assert opt.param_groups[0]["lr"] == 1e-4
    with pytest.raises(ValueError, match="decay_at"):
        TrainConfig(decay_at=1.5)
