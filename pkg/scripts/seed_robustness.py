"""Re-run the desk pipeline under different seeds and tabulate the directional checks.

    python scripts/seed_robustness.py --config configs/desk.ini --seeds 7 11 13 --out runs/robustness
"""

import argparse
import configparser
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from check_run import check  # noqa: E402

from popsteer.cli import main  # noqa: E402


def run(config: Path, seed: int, out: Path) -> dict[str, bool]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read(config)
    parser["generate"]["seed"] = str(seed)
    for section in ("backbone", "sae"):
        parser[section]["seed"] = str(seed)
    out.mkdir(parents=True, exist_ok=True)
    seeded = out / f"seed{seed}.ini"
    with seeded.open("w") as fh:
        parser.write(fh)
    code = main(["pipeline", "--config", str(seeded), "--out", str(out / f"seed{seed}"), "-q"])
    if code:
        raise SystemExit(f"pipeline failed for seed {seed} (exit {code})")
    print(f"-- seed {seed}")
    return check(out / f"seed{seed}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", type=Path, default=Path("configs/desk.ini"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[7, 11, 13])
    ap.add_argument("--out", type=Path, default=Path("runs/robustness"))
    args = ap.parse_args()
    results = {s: run(args.config, s, args.out) for s in args.seeds}
    names = list(next(iter(results.values())))
    print("seed  " + "  ".join(names))
    for s, res in results.items():
        print(f"{s:<5} " + "  ".join(f"{'pass' if res[n] else 'FAIL':<{len(n)}}" for n in names))
