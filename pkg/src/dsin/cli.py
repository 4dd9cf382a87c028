"""``dsin`` command line.

Every subcommand writes into a run directory (``--out``) holding the resolved
config, a run manifest, JSONL logs, tables and figures.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bitstream import Bitstream, compress_file, decompress_file
from .coset import CosetConfig, toy_report
from .data import PairSpec, build_pairs, data_root, index_frames, make_pairs, read_manifest, write_manifest
from .imageio import read_png, write_png
from .metrics import l1, ms_ssim, psnr, QualityReport
from .model import ModelConfig, load_checkpoint, save_checkpoint

log = logging.getLogger("dsin")


def load_config(path) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def run_dir(args, name: str) -> Path:
    out = Path(args.out or f"runs/{name}-{time.strftime('%Y%m%d-%H%M%S')}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest_json(out: Path, args, config: dict, extra: dict | None = None) -> None:
    import torch

    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": args.seed,
        "config": config,
        "data_root": str(data_root(args.data_root)) if data_root(args.data_root) else None,
        "versions": {"dsin": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "torch": torch.__version__},
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def _pairs_from_args(args, cfg: dict, split: str):
    """Real pairs from a manifest or data root, else synthetic ones."""
    dcfg = dict(cfg.get("data", {}))
    if args.manifest:
        recs = read_manifest(args.manifest)
        return [(read_png(x), read_png(y)) for x, y, _, _ in recs]
    root = data_root(args.data_root)
    if root is not None and dcfg.get("mode", "synthetic") != "synthetic":
        spec = PairSpec(mode=dcfg["mode"], time_offset=dcfg.get("time_offset", 1))
        recs = build_pairs(index_frames(root), spec)
        return [(read_png(x), read_png(y)) for x, y, _, _ in recs]
    n = dcfg.pop("n", 64 if split == "train" else 12)
    for k in ("size", "max_shift", "min_shift", "gain", "bias", "band"):
        if k in dcfg and dcfg[k] is not None:
            dcfg[k] = tuple(dcfg[k])
    return make_pairs(n, PairSpec(**dcfg), args.seed + (0 if split == "train" else 1), split).pairs()


def cmd_train(args) -> int:
    from .training import TrainConfig, train_stage

    cfg = load_config(args.config)
    mc = ModelConfig.from_dict(cfg.get("model", {}))
    tcd = {**cfg.get("train", {}), "seed": args.seed}
    if args.stage:
        tcd["stage"] = args.stage
    if args.iterations:
        tcd["iterations"] = args.iterations
    tc = TrainConfig(**tcd)
    if tc.stage == "pretrain":
        # the auto-encoder trains alone; a pretrain run continued with --init is the baseline
        mc.si_mode = "off"
    init = load_checkpoint(args.init) if args.init else None
    out = run_dir(args, "train")
    pairs = _pairs_from_args(args, cfg, "train")
    write_manifest_json(out, args, {"model": mc.to_dict(), "train": tc.to_dict()}, {"pairs": len(pairs)})
    model, recs = train_stage(pairs, mc, tc, init=init, heldout=pairs[0], log_path=out / "train_log.jsonl")
    digest = save_checkpoint(model, out / "model.npz", extra={"train": tc.to_dict()})
    print(f"checkpoint {out / 'model.npz'} sha256 {digest.hex()[:16]} final bpp {recs[-1]['bpp']:.4f}")
    return 0


def cmd_compress(args) -> int:
    model = load_checkpoint(args.model)
    x = read_png(args.input)
    bs = compress_file(x, model)
    bs.save(args.output)
    print(f"{args.output}: {len(bs.to_bytes())} bytes, {bs.bpp:.4f} bpp ({bs.payload_bpp:.4f} payload)")
    return 0


def cmd_decompress(args) -> int:
    model = load_checkpoint(args.model)
    bs = Bitstream.load(args.input)
    si = read_png(args.si) if args.si else None
    out = decompress_file(bs, model, si)
    write_png(args.output, out)
    print(f"wrote {args.output} ({'with' if si is not None and model.uses_si else 'without'} side information)")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate_model, write_reports
    from .data import PairSet

    model = load_checkpoint(args.model)
    cfg = load_config(args.config)
    out = run_dir(args, "eval")
    pairs = _pairs_from_args(args, cfg, "test")
    ps = PairSet([p[0] for p in pairs], [p[1] for p in pairs], [float("nan")] * len(pairs), [0] * len(pairs))
    reps = evaluate_model(model, ps, model_id=Path(args.model).stem)
    write_reports(out / "reports.jsonl", reps)
    write_manifest_json(out, args, cfg, {"model": args.model, "model_hash": model.checkpoint_meta["hash"]})
    print(f"MS-SSIM {np.mean([r.msssim for r in reps]):.4f}  bpp {np.mean([r.bpp_coded for r in reps]):.4f}  "
          f"({len(reps)} images) -> {out / 'reports.jsonl'}")
    return 0


def cmd_rdcurve(args) -> int:
    from .evaluation import plot_rd, rd_average, read_reports, reports_to_points

    out = run_dir(args, "rdcurve")
    curves = {}
    for spec in args.reports:
        name, _, paths = spec.rpartition("=")
        reps = [r for p in paths.split(",") for r in read_reports(p)]
        curves[name or Path(paths).stem] = rd_average(reports_to_points(reps), args.grid)
    for name, c in curves.items():
        (out / f"rd_{name}.tsv").write_text(c.to_table())
    plot_rd(curves, out / "rd.svg")
    write_manifest_json(out, args, {}, {"inputs": args.reports})
    print(f"{len(curves)} curve(s) -> {out}")
    return 0


def _suite(args):
    from .evaluation import SuiteConfig, run_desk_suite

    cfg = load_config(args.config)
    s = SuiteConfig.from_dict({**cfg.get("suite", {}), "seed": args.seed})
    out = run_dir(args, args.command)
    write_manifest_json(out, args, {"suite": s.to_dict()})
    return run_desk_suite(s, out, progress=print), out


def cmd_sweep(args) -> int:
    from .evaluation import plot_sweep, suite_sweep, sweep_table

    res, out = _suite(args)
    rows = suite_sweep(res)
    (out / "sweep.tsv").write_text(sweep_table(rows))
    plot_sweep(rows, out / "sweep.svg")
    print(sweep_table(rows))
    return 0


def cmd_ablate(args) -> int:
    from .evaluation import suite_ablation

    res, out = _suite(args)
    r = suite_ablation(res, args.kind)
    lines = ["bpp\treference\tablated\tdelta"] + [
        f"{b:.6f}\t{a:.6f}\t{c:.6f}\t{d:.6f}" for b, a, c, d in zip(r["bpp"], r["reference"], r["ablated"], r["delta"])]
    (out / f"ablate_{args.kind}.tsv").write_text("\n".join(lines) + "\n")
    print(f"{args.kind}: delta min {r['min_delta']:+.4f} max {r['max_delta']:+.4f}")
    return 0


def cmd_toy(args) -> int:
    cfg = CosetConfig(**load_config(args.config).get("coset", {}))
    r = toy_report(cfg)
    print(json.dumps(r, indent=2, default=str))
    return 0 if r["exact"] and r["exhaustive_ok"] else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dsin", description="Deep image compression with decoder side information.")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-root", help="dataset root (default: $DSIN_DATA)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("--stage", choices=["pretrain", "joint"])
    t.add_argument("--iterations", type=int)
    t.add_argument("--init", help="checkpoint to start from (required for joint)")
    t.add_argument("--manifest")
    t.add_argument("--out")
    t.set_defaults(fn=cmd_train)

    c = sub.add_parser("compress", help="encode a PNG into a .dsin file")
    c.add_argument("-m", "--model", required=True)
    c.add_argument("-i", "--input", required=True)
    c.add_argument("-o", "--output", required=True)
    c.set_defaults(fn=cmd_compress)

    d = sub.add_parser("decompress", help="decode a .dsin file, optionally with a side image")
    d.add_argument("-m", "--model", required=True)
    d.add_argument("-i", "--input", required=True)
    d.add_argument("-o", "--output", required=True)
    d.add_argument("--si", help="side image Y (PNG)")
    d.set_defaults(fn=cmd_decompress)

    e = sub.add_parser("eval", help="quality reports of one checkpoint")
    e.add_argument("-m", "--model", required=True)
    e.add_argument("--manifest")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("rdcurve", help="average per-image RD curves from report files")
    r.add_argument("reports", nargs="+", help="[name=]a.jsonl,b.jsonl,... (one file per model)")
    r.add_argument("--grid", type=int, default=200)
    r.add_argument("--out")
    r.set_defaults(fn=cmd_rdcurve)

    s = sub.add_parser("sweep", help="train the desk suite and tabulate improvement per correlation band")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sweep)

    a = sub.add_parser("ablate", help="train the desk suite and compare one ablation")
    a.add_argument("--kind", required=True, choices=["no_si_extra_layers", "raw_y", "no_mask"])
    a.add_argument("--out")
    a.set_defaults(fn=cmd_ablate)

    y = sub.add_parser("toy-coset", help="coset coding walkthrough and exhaustive check")
    y.set_defaults(fn=cmd_toy)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, OSError) as e:
        print(f"dsin {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
