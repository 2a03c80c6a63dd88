"""Print the directional checks for a finished run directory.

    python scripts/check_run.py runs/desk
"""

import argparse
from pathlib import Path

from popsteer import trends


def check(out: Path) -> dict[str, bool]:
    _, ab = trends.read_csv(out / "ablate.csv", "ablation")
    ps_gini = [float(r[5]) for r in ab[1:]]
    noise_gini = float(ab[-1][6])
    _, de = trends.read_csv(out / "deactivate.csv", "deactivation")
    rho = {side: trends.spearman([int(r[0]) for r in de if r[1] == side], [float(r[2]) for r in de if r[1] == side])
           for side in ("popular", "unpopular")}
    _, sw = trends.read_csv(out / "sweep.csv", "report")
    fr = trends.frontier_check(sw)
    print(f"gini by n_select: {ps_gini}  inversions: {trends.inversions(ps_gini)}")
    print(f"gini at largest n_select: steering {ps_gini[-1]:.6f}  noise {noise_gini:.6f}")
    print(f"spearman popular {rho['popular']:.3f}  unpopular {rho['unpopular']:.3f}")
    print(f"frontier: {fr}")
    return {
        "gini_decreasing": trends.decreasing_with_tolerance(ps_gini),
        "beats_noise": ps_gini[-1] < noise_gini,
        "deactivate_popular": rho["popular"] < 0,
        "deactivate_unpopular": rho["unpopular"] > 0,
        "frontier": fr.passed,
    }


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("run_dir", type=Path)
    for name, ok in check(ap.parse_args().run_dir).items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
