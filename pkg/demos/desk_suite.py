"""
The desk-scale experiment suite
===============================

Trains, per target bpp, one auto-encoder and then five variants from it:

    baseline  the auto-encoder alone
    syn       SI-Finder + SI-Net (the full model)
    zeros     SI-Net fed zeros instead of Y_syn (extra layers, no side information)
    raw       SI-Net fed Y as is, no matching
    nomask    SI-Finder without the location prior

and prints the averaged RD comparison, the three ablations and the
correlation sweep. About half an hour on one CPU core.
"""
import sys
from pathlib import Path

from dsin.evaluation import (
    ABLATIONS, SuiteConfig, plot_rd, plot_sweep, run_desk_suite, suite_ablation, suite_rd, suite_sweep,
    sweep_table,
)

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/desk_suite")
res = run_desk_suite(SuiteConfig(), out, progress=print)

with_si, base = suite_rd(res)
d = with_si.msssim - base.msssim
print(f"\nRD on [{with_si.support[0]:.4f}, {with_si.support[1]:.4f}] bpp: with SI minus baseline "
      f"min {d.min():+.4f} mean {d.mean():+.4f}")
plot_rd({"with SI": with_si, "baseline": base}, out / "rd.svg")
(out / "rd_with_si.tsv").write_text(with_si.to_table())
(out / "rd_baseline.tsv").write_text(base.to_table())

for kind, (ref, abl, _) in ABLATIONS.items():
    r = suite_ablation(res, kind)
    print(f"{kind:20s} {abl} - {ref}: delta in [{r['min_delta']:+.4f}, {r['max_delta']:+.4f}]")

rows = suite_sweep(res)
print("\n" + sweep_table(rows))
(out / "sweep.tsv").write_text(sweep_table(rows))
plot_sweep(rows, out / "sweep.svg")
print("total", f"{res['timing']['total'] / 60:.1f} min;", "outputs in", out)
