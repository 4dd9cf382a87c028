"""Experiment driver: averaged RD curves, correlation sweep, ablations and the
desk-scale suite that trains every model they need.
"""
from __future__ import annotations

import copy
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .bitstream import compress_file
from .codec import CodecConfig
from .data import PairSet, PairSpec, base_scenes, make_pairs, with_band
from .metrics import QualityReport, avg_patch_pearson, improvement_ratio, l1, ms_ssim, psnr
from .model import DSIN, ModelConfig, save_checkpoint
from .si_finder import MatcherConfig
from .si_net import SiNetConfig
from .training import LossWeights, TrainConfig, train_stage

log = logging.getLogger(__name__)

GRID_POINTS = 200


# ----------------------------------------------------------------------------
# RD curves

@dataclass
class RDCurve:
    bpp: np.ndarray
    msssim: np.ndarray
    support: tuple[float, float]
    provenance: list = field(default_factory=list)

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.bpp.tolist(), self.msssim.tolist()))

    def to_table(self) -> str:
        return "bpp\tmsssim\n" + "".join(f"{b:.6f}\t{m:.6f}\n" for b, m in self.points)


def _image_curve(points) -> tuple[np.ndarray, np.ndarray]:
    """Sorted, de-duplicated (bpp, score) arrays of one image."""
    pts = sorted((float(b), float(s)) for b, s in points)
    bpps = np.array([p[0] for p in pts])
    vals = np.array([p[1] for p in pts])
    ub, inv = np.unique(bpps, return_inverse=True)
    if len(ub) < len(bpps):
        vals = np.bincount(inv, weights=vals) / np.bincount(inv)
        bpps = ub
    return bpps, vals


def common_support(per_image: dict) -> tuple[float, float]:
    lo = max(min(b for b, _ in pts) for pts in per_image.values())
    hi = min(max(b for b, _ in pts) for pts in per_image.values())
    if not hi > lo:
        worst_lo = max(per_image, key=lambda k: min(b for b, _ in per_image[k]))
        worst_hi = min(per_image, key=lambda k: max(b for b, _ in per_image[k]))
        raise ValueError(f"empty common bpp support [{lo:.4f}, {hi:.4f}]; offending images: {worst_lo}, {worst_hi}")
    return lo, hi


def rd_average(per_image: dict, grid_points: int = GRID_POINTS, support=None, provenance=None) -> RDCurve:
    """Average per-image RD curves on a dense bpp grid.

    ``per_image`` maps an image id to its ``(bpp, msssim)`` points, one per
    trained model. Every image curve is linearly interpolated and resampled
    on ``grid_points`` bpps spanning the intersection of all image supports
    (or ``support`` when given, which must lie inside it).
    """
    if not per_image:
        raise ValueError("no measurements")
    for k, pts in per_image.items():
        if len({float(b) for b, _ in pts}) < 2:
            raise ValueError(f"image {k} has fewer than two distinct bpp points")
    lo, hi = common_support(per_image)
    if support is not None:
        if support[0] < lo - 1e-12 or support[1] > hi + 1e-12:
            raise ValueError(f"requested support {support} exceeds the common support [{lo}, {hi}]")
        lo, hi = support
    grid = np.linspace(lo, hi, grid_points)
    curves = []
    for k in sorted(per_image):
        b, v = _image_curve(per_image[k])
        curves.append(np.interp(grid, b, v))
    return RDCurve(grid, np.mean(curves, axis=0), (lo, hi), list(provenance or []))


def compare_curves(a: dict, b: dict, grid_points: int = GRID_POINTS) -> tuple[RDCurve, RDCurve]:
    """Both methods averaged on the same grid (intersection of all supports)."""
    sa, sb = common_support(a), common_support(b)
    lo, hi = max(sa[0], sb[0]), min(sa[1], sb[1])
    if not hi > lo:
        raise ValueError(f"methods do not overlap in bpp: {sa} vs {sb}")
    return rd_average(a, grid_points, (lo, hi)), rd_average(b, grid_points, (lo, hi))


def reports_to_points(reports: list[QualityReport]) -> dict:
    per = {}
    for r in reports:
        per.setdefault(r.image, []).append((r.bpp_coded, r.msssim))
    return per


def write_reports(path, reports) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def read_reports(path) -> list[QualityReport]:
    with open(path) as fh:
        return [QualityReport.from_json(line) for line in fh if line.strip()]


# ----------------------------------------------------------------------------
# per-model evaluation

def evaluate_model(model: DSIN, pairs: PairSet, model_id: str = "", use_si: bool = True) -> list[QualityReport]:
    """QualityReport per pair; ``bpp_coded`` is the range-coded payload size."""
    reports = []
    for i, (x, y) in enumerate(pairs.pairs()):
        r = model.reconstruct(x, y if (use_si and model.uses_si) else None)
        bs = compress_file(x, model)
        out = r["x_hat"]
        reports.append(QualityReport(
            msssim=ms_ssim(x, out), l1=l1(x, out), psnr=psnr(x, out),
            bpp_estimated=r["bpp"], bpp_coded=bs.payload_bpp, image=f"img{i:03d}", model=model_id,
        ))
    return reports


def side_correlation(model: DSIN, pairs: PairSet) -> list[float]:
    """avg_patch_pearson(X, Y_syn) per pair, with the matcher of ``model``."""
    out = []
    for x, y in pairs.pairs():
        r = model.reconstruct(x, y)
        out.append(avg_patch_pearson(x, r["y_syn"]) if r["y_syn"] is not None else float("nan"))
    return out


# ----------------------------------------------------------------------------
# correlation sweep

def correlation_sweep(models: dict, band_sets: dict) -> list[dict]:
    """Improvement of the side-information model per correlation band and bpp.

    ``models`` maps a target bpp to ``{"with": DSIN, "without": DSIN}``;
    ``band_sets`` maps a band label (its nominal correlation) to a PairSet.
    """
    rows = []
    for bpp in sorted(models):
        pair = models[bpp]
        if pair.get("with") is None or pair.get("without") is None:
            raise ValueError(f"missing with/without counterpart at bpp {bpp}")
        for band in sorted(band_sets):
            ps = band_sets[band]
            w = [rep.msssim for rep in evaluate_model(pair["with"], ps)]
            wo = [rep.msssim for rep in evaluate_model(pair["without"], ps)]
            rows.append({
                "target_bpp": bpp,
                "band": band,
                "generator_corr": float(np.mean(ps.corr)),
                "ysyn_corr": float(np.nanmean(side_correlation(pair["with"], ps))),
                "improvement_pct": improvement_ratio(w, wo),
                "msssim_with": float(np.mean(w)),
                "msssim_without": float(np.mean(wo)),
            })
    return rows


def sweep_table(rows: list[dict]) -> str:
    keys = ["target_bpp", "band", "generator_corr", "ysyn_corr", "improvement_pct", "msssim_with", "msssim_without"]
    lines = ["\t".join(keys)]
    for r in rows:
        lines.append("\t".join(f"{r[k]:.6g}" if isinstance(r[k], float) else str(r[k]) for k in keys))
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# ablations

ABLATIONS = {
    # kind: (reference variant, ablated variant, config fields allowed to differ)
    "no_si_extra_layers": ("baseline", "zeros", {"si_mode"}),
    "raw_y": ("syn", "raw", {"si_mode"}),
    "no_mask": ("syn", "nomask", {"matcher.mask_enabled"}),
}


def _flatten(d: dict, prefix="") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def config_drift(reference: dict, ablated: dict) -> set[str]:
    a, b = _flatten(reference), _flatten(ablated)
    return {k for k in a.keys() | b.keys() if a.get(k) != b.get(k)}


def check_ablation(kind: str, reference: dict, ablated: dict) -> None:
    """Refuse comparisons whose configs differ beyond the ablated component.

    SI-Net settings are ignored when one side has no SI-Net at all.
    """
    if kind not in ABLATIONS:
        raise ValueError(f"unknown ablation {kind!r}")
    allowed = ABLATIONS[kind][2]
    drift = config_drift(reference, ablated)
    if "off" in (reference.get("model", {}).get("si_mode"), ablated.get("model", {}).get("si_mode")):
        drift = {k for k in drift if not k.startswith(("model.sinet.", "model.matcher.", "train.stage", "train.weights.alpha"))}
    extra = {k for k in drift if k.split(".", 1)[-1] not in allowed}
    if extra:
        raise ValueError(f"ablation {kind}: configs also differ in {sorted(extra)}")


def ablate(kind: str, reference: dict, ablated: dict) -> dict:
    """Paired RD comparison. ``reference``/``ablated`` hold ``config`` and ``reports``."""
    check_ablation(kind, reference["config"], ablated["config"])
    ref_c, abl_c = compare_curves(reports_to_points(reference["reports"]), reports_to_points(ablated["reports"]))
    delta = abl_c.msssim - ref_c.msssim
    return {
        "kind": kind,
        "bpp": ref_c.bpp,
        "reference": ref_c.msssim,
        "ablated": abl_c.msssim,
        "delta": delta,
        "max_abs_delta": float(np.max(np.abs(delta))),
        "min_delta": float(np.min(delta)),
        "max_delta": float(np.max(delta)),
    }


# ----------------------------------------------------------------------------
# external codecs (never reimplemented; used only when their binaries exist)

EXTERNAL_CODECS = {"jpeg2000": "opj_compress", "bpg": "bpgenc"}


def available_external_codecs() -> dict:
    found = {}
    for name, exe in EXTERNAL_CODECS.items():
        path = shutil.which(exe)
        if path:
            found[name] = path
        else:
            log.warning("%s baseline skipped: %s not found on PATH", name, exe)
    return found


# ----------------------------------------------------------------------------
# desk suite

VARIANTS = ("baseline", "syn", "zeros", "raw", "nomask")


@dataclass
class SuiteConfig:
    targets: tuple = (0.1, 0.15, 0.22)
    # latent channels per target, so each target asks for a similar share of the
    # maximum code length instead of near-degenerate distributions at the low end
    channels: tuple | None = (4, 6, 8)
    variants: tuple = VARIANTS
    codec: dict = field(default_factory=lambda: {"base_width": 32, "num_centers": 6})
    sinet: dict = field(default_factory=lambda: {"width": 16})
    matcher: dict = field(default_factory=dict)
    pretrain_iters: int = 2000
    joint_iters: int = 1500
    lr: float = 1e-3
    # continuation stage: the codec is fine-tuned slowly while the new SI-Net
    # learns, with the codec held fixed for the first sinet_warmup iterations.
    # decay_at applies to both stages
    joint_lr: float = 1e-4
    sinet_lr: float = 1e-3
    sinet_warmup: int = 750
    decay_at: float | None = 0.8
    beta: float = 0.2
    alpha: float = 0.7
    seed: int = 0
    n_train: int = 96
    n_test: int = 12
    n_band: int = 12
    bands: tuple = (0.3, 0.6, 0.9)
    train_spec: dict = field(default_factory=lambda: {
        "max_shift": (6, 16), "gain": (0.95, 1.05), "bias": (-0.02, 0.02), "occlusion": 0.0,
    })
    train_noise: tuple = (0.0, 0.02, 0.05, 0.1)
    test_noise: float = 0.02

    def __post_init__(self):
        if self.channels is not None and len(self.channels) != len(self.targets):
            raise ValueError("channels must list one latent channel count per target")

    def codec_for(self, target: float) -> CodecConfig:
        d = {**self.codec, "target_bpp": target}
        if self.channels is not None:
            d["latent_channels"] = self.channels[list(self.targets).index(target)]
        return CodecConfig(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteConfig":
        d = dict(d)
        for k in ("targets", "channels", "variants", "bands", "train_noise"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        if "train_spec" in d:
            d["train_spec"] = {k: tuple(v) if isinstance(v, list) else v for k, v in d["train_spec"].items()}
        return cls(**d)


def variant_configs(s: SuiteConfig, target: float, variant: str) -> tuple[ModelConfig, TrainConfig]:
    codec = s.codec_for(target)
    matcher = MatcherConfig(**{**s.matcher, "mask_enabled": variant != "nomask"})
    si_mode = {"baseline": "off", "syn": "syn", "zeros": "zeros", "raw": "raw", "nomask": "syn"}[variant]
    mc = ModelConfig(codec=codec, sinet=SiNetConfig(**s.sinet), matcher=matcher, si_mode=si_mode)
    tc = TrainConfig(stage="pretrain" if variant == "baseline" else "joint", iterations=s.joint_iters, lr=s.joint_lr,
                     sinet_lr=s.sinet_lr, sinet_warmup=s.sinet_warmup, decay_at=s.decay_at, seed=s.seed + 1,
                     weights=LossWeights(alpha=s.alpha, beta=s.beta))
    return mc, tc


def run_config(mc: ModelConfig, tc: TrainConfig) -> dict:
    return {"model": mc.to_dict(), "train": tc.to_dict()}


def _spec(s: SuiteConfig, noise: float) -> PairSpec:
    d = dict(s.train_spec)
    for k in ("max_shift", "min_shift", "gain", "bias", "size"):
        if k in d:
            d[k] = tuple(d[k])
    return PairSpec(noise_sigma=noise, **d)


def suite_data(s: SuiteConfig) -> dict:
    train_sc, test_sc = base_scenes("train"), base_scenes("test")
    train = PairSet()
    per = -(-s.n_train // len(s.train_noise))
    for j, nz in enumerate(s.train_noise):
        ps = make_pairs(per, _spec(s, nz), s.seed * 1000 + j, scenes=train_sc)
        for attr in ("x", "y", "corr", "scene"):
            getattr(train, attr).extend(getattr(ps, attr))
    # interleave noise levels
    order = np.argsort(np.arange(len(train)) % per, kind="stable")[: s.n_train]
    train = PairSet(*[[getattr(train, a)[i] for i in order] for a in ("x", "y", "corr", "scene")])
    test = make_pairs(s.n_test, _spec(s, s.test_noise), s.seed * 1000 + 101, scenes=test_sc)
    # bands are reached by noise alone: flat occluders could push the noise-free correlation under the top band
    bands = {b: make_pairs(s.n_band, with_band(replace(_spec(s, 0.0), occlusion=0.0), b), s.seed * 1000 + 200 + int(100 * b), scenes=test_sc)
             for b in s.bands}
    return {"train": train, "test": test, "bands": bands}


def run_desk_suite(s: SuiteConfig | None = None, out_dir=None, progress=None) -> dict:
    """Train every variant at every target and evaluate them on shared test pairs.

    Per target: one auto-encoder pretraining run, then each variant continues
    from it for the same number of iterations (the baseline keeps training the
    auto-encoder alone). Returns models, configs, reports and timings.
    """
    s = s or SuiteConfig()
    say = progress or log.info
    t0 = time.time()
    data = suite_data(s)
    train_pairs = data["train"].pairs()
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "suite_config.json").write_text(json.dumps(s.to_dict(), indent=2))
    res = {"config": s, "data": data, "models": {}, "configs": {}, "reports": {}, "logs": {}, "timing": {}}
    for target in s.targets:
        mc = ModelConfig(codec=s.codec_for(target), si_mode="off")
        tc = TrainConfig(stage="pretrain", iterations=s.pretrain_iters, lr=s.lr, seed=s.seed, decay_at=s.decay_at,
                         weights=LossWeights(alpha=s.alpha, beta=s.beta))
        t = time.time()
        pre, recs = train_stage(train_pairs, mc, tc)
        res["timing"][(target, "pretrain")] = time.time() - t
        res["logs"][(target, "pretrain")] = recs
        say(f"target {target}: pretrain done in {time.time() - t:.0f}s (bpp {recs[-1]['bpp']:.4f})")
        for v in s.variants:
            vmc, vtc = variant_configs(s, target, v)
            t = time.time()
            model, recs = train_stage(train_pairs, vmc, vtc, init=pre)
            reps = evaluate_model(model, data["test"], model_id=f"{v}@{target}")
            res["timing"][(target, v)] = time.time() - t
            res["models"][(target, v)] = model
            res["configs"][(target, v)] = run_config(vmc, vtc)
            res["reports"][(target, v)] = reps
            res["logs"][(target, v)] = recs
            say(f"target {target}: {v} msssim {np.mean([r.msssim for r in reps]):.4f} "
                f"bpp {np.mean([r.bpp_coded for r in reps]):.4f} ({time.time() - t:.0f}s)")
            if out:
                write_reports(out / f"reports_{v}_{target}.jsonl", reps)
                save_checkpoint(model, out / f"model_{v}_{target}.npz", extra=res["configs"][(target, v)]["train"])
                with open(out / f"log_{v}_{target}.jsonl", "w") as fh:
                    for r in recs:
                        fh.write(json.dumps(r) + "\n")
    res["timing"]["total"] = time.time() - t0
    return res


def variant_reports(res: dict, variant: str) -> list[QualityReport]:
    return [r for t in res["config"].targets for r in res["reports"][(t, variant)]]


def variant_config(res: dict, variant: str) -> dict:
    """Run config without the fields that vary along the curve by design (target bpp, latent channels)."""
    t = res["config"].targets[0]
    c = copy.deepcopy(res["configs"][(t, variant)])
    c["model"]["codec"].pop("target_bpp", None)
    c["model"]["codec"].pop("latent_channels", None)
    return c


def suite_rd(res: dict, variant_a: str = "syn", variant_b: str = "baseline"):
    return compare_curves(reports_to_points(variant_reports(res, variant_a)),
                          reports_to_points(variant_reports(res, variant_b)))


def suite_ablation(res: dict, kind: str) -> dict:
    ref, abl, _ = ABLATIONS[kind]
    return ablate(kind,
                  {"config": variant_config(res, ref), "reports": variant_reports(res, ref)},
                  {"config": variant_config(res, abl), "reports": variant_reports(res, abl)})


def suite_sweep(res: dict, variant: str = "syn") -> list[dict]:
    models = {t: {"with": res["models"][(t, variant)], "without": res["models"][(t, "baseline")]}
              for t in res["config"].targets}
    return correlation_sweep(models, res["data"]["bands"])


def plot_rd(curves: dict, path) -> None:
    """Static SVG of named RD curves."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, c in curves.items():
        ax.plot(c.bpp, c.msssim, label=name)
    ax.set_xlabel("bpp")
    ax.set_ylabel("MS-SSIM")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_sweep(rows: list[dict], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for bpp in sorted({r["target_bpp"] for r in rows}):
        rr = [r for r in rows if r["target_bpp"] == bpp]
        ax.plot([r["ysyn_corr"] for r in rr], [r["improvement_pct"] for r in rr], "o-", label=f"{bpp} bpp")
    ax.set_xlabel("Pearson(X, Y_syn)")
    ax.set_ylabel("MS-SSIM improvement [%]")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
