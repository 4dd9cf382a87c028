import logging

import numpy as np
import pytest
import torch

from conftest import smooth_image
from dsin.codec import CodecConfig
from dsin.data import PairSet
from dsin.evaluation import (
    ABLATIONS, SuiteConfig, ablate, available_external_codecs, check_ablation, common_support, compare_curves,
    config_drift, correlation_sweep, evaluate_model, rd_average, read_reports, reports_to_points, run_config,
    sweep_table, variant_configs, write_reports,
)
from dsin.metrics import QualityReport, ms_ssim
from dsin.model import DSIN, ModelConfig
from dsin.si_net import SiNetConfig


def test_rd_average_against_hand_interpolation():
    per = {"a": [(0.1, 0.5), (0.3, 0.9)], "b": [(0.0, 0.2), (0.2, 0.6), (0.4, 0.6)]}
    c = rd_average(per, grid_points=3)
    assert c.support == (0.1, 0.3)
    assert np.allclose(c.bpp, [0.1, 0.2, 0.3])
    # a: 0.5, 0.7, 0.9 ; b: 0.4, 0.6, 0.6
    assert np.allclose(c.msssim, [0.45, 0.65, 0.75])
    assert c.to_table().splitlines()[1] == "0.100000\t0.450000"


def test_rd_average_dedups_and_sorts():
    per = {"a": [(0.3, 0.9), (0.1, 0.4), (0.1, 0.6)]}
    c = rd_average(per, grid_points=2)
    assert np.allclose(c.msssim, [0.5, 0.9])


def test_rd_average_errors():
    with pytest.raises(ValueError, match="no measurements"):
        rd_average({})
    with pytest.raises(ValueError, match="fewer than two"):
        rd_average({"a": [(0.1, 0.5), (0.1, 0.6)]})
    with pytest.raises(ValueError, match="b"):
        common_support({"a": [(0.1, 0.5), (0.2, 0.6)], "b": [(0.3, 0.5), (0.4, 0.6)]})
    with pytest.raises(ValueError, match="exceeds"):
        rd_average({"a": [(0.1, 0.5), (0.2, 0.6)]}, support=(0.0, 0.2))


def test_compare_curves_share_grid():
    a = {"i": [(0.1, 0.5), (0.5, 0.9)]}
    b = {"i": [(0.2, 0.4), (0.6, 0.8)]}
    ca, cb = compare_curves(a, b, grid_points=5)
    assert ca.support == cb.support == (0.2, 0.5)
    assert np.array_equal(ca.bpp, cb.bpp)
    with pytest.raises(ValueError, match="overlap"):
        compare_curves(a, {"i": [(0.6, 0.1), (0.7, 0.2)]})


def test_reports_round_trip(tmp_path):
    reps = [QualityReport(0.9, 0.01, 30.0, 0.1, 0.11, "img000", "m"), QualityReport(0.8, 0.02, 28.0, 0.2, 0.21, "img000", "n")]
    write_reports(tmp_path / "r.jsonl", reps)
    assert read_reports(tmp_path / "r.jsonl") == reps
    assert reports_to_points(reps) == {"img000": [(0.11, 0.9), (0.21, 0.8)]}


def test_ablation_drift_guard():
    s = SuiteConfig()
    base = run_config(*variant_configs(s, 0.1, "baseline"))
    zeros = run_config(*variant_configs(s, 0.1, "zeros"))
    syn = run_config(*variant_configs(s, 0.1, "syn"))
    nomask = run_config(*variant_configs(s, 0.1, "nomask"))
    raw = run_config(*variant_configs(s, 0.1, "raw"))
    check_ablation("no_si_extra_layers", base, zeros)
    check_ablation("raw_y", syn, raw)
    check_ablation("no_mask", syn, nomask)
    assert config_drift(syn, nomask) == {"model.matcher.mask_enabled"}
    # anything else differing is refused
    bad = run_config(*variant_configs(SuiteConfig(joint_lr=5e-4), 0.1, "nomask"))
    with pytest.raises(ValueError, match="train.lr"):
        check_ablation("no_mask", syn, bad)
    with pytest.raises(ValueError, match="unknown"):
        check_ablation("dropout", syn, nomask)
    assert set(ABLATIONS) == {"no_si_extra_layers", "raw_y", "no_mask"}


def test_ablate_delta():
    s = SuiteConfig()
    rep = lambda m, b: QualityReport(m, 0, 0, b, b, "img000")
    ref = {"config": run_config(*variant_configs(s, 0.1, "syn")), "reports": [rep(0.5, 0.1), rep(0.7, 0.3)]}
    abl = {"config": run_config(*variant_configs(s, 0.1, "nomask")), "reports": [rep(0.45, 0.1), rep(0.68, 0.3)]}
    r = ablate("no_mask", ref, abl)
    assert r["min_delta"] == pytest.approx(-0.05) and r["max_delta"] == pytest.approx(-0.02)
    assert r["max_abs_delta"] == pytest.approx(0.05)


def test_suite_config_round_trip():
    s = SuiteConfig(targets=(0.1, 0.2), channels=(4, 8))
    assert SuiteConfig.from_dict(s.to_dict()) == s
    assert s.codec_for(0.2).latent_channels == 8 and s.codec_for(0.2).target_bpp == 0.2
    assert SuiteConfig(channels=None).codec_for(0.1).latent_channels == 8
    with pytest.raises(ValueError, match="one latent channel count per target"):
        SuiteConfig(targets=(0.1, 0.2))


def test_external_codecs_skip_with_warning(monkeypatch, caplog):
    monkeypatch.setattr("shutil.which", lambda exe: None)
    with caplog.at_level(logging.WARNING):
        assert available_external_codecs() == {}
    assert "skipped" in caplog.text


@pytest.fixture(scope="module")
def tiny_models():
    torch.manual_seed(0)
    small = dict(codec=CodecConfig(base_width=8, latent_channels=4), sinet=SiNetConfig(width=8))
    return DSIN(ModelConfig(**small, si_mode="syn")), DSIN(ModelConfig(**small, si_mode="off"))


def test_evaluate_model_reports(tiny_models):
    rng = np.random.default_rng(0)
    xs = [smooth_image(rng) for _ in range(2)]
    ps = PairSet(xs, [x.copy() for x in xs], [1.0, 1.0], [0, 0])
    with_si, without = tiny_models
    reps = evaluate_model(without, ps, "m")
    assert [r.image for r in reps] == ["img000", "img001"]
    r = without.reconstruct(xs[0])
    assert reps[0].msssim == pytest.approx(ms_ssim(xs[0], r["x_hat"]))
    assert reps[0].bpp_coded >= 0 and np.isfinite(reps[0].bpp_estimated)


def test_correlation_sweep_rows(tiny_models):
    rng = np.random.default_rng(1)
    x = smooth_image(rng)
    bands = {0.3: PairSet([x], [x], [0.31], [0]), 0.9: PairSet([x], [x], [0.9], [0])}
    with_si, without = tiny_models
    rows = correlation_sweep({0.1: {"with": with_si, "without": without}}, bands)
    assert [(r["target_bpp"], r["band"]) for r in rows] == [(0.1, 0.3), (0.1, 0.9)]
    assert rows[0]["generator_corr"] == pytest.approx(0.31)
    assert len(sweep_table(rows).splitlines()) == 3
    with pytest.raises(ValueError, match="counterpart"):
        correlation_sweep({0.1: {"with": with_si}}, bands)
