"""Data-analysis curves on a simulated world: temporal gap, entropy against
reveal delay and per-day action stability."""
import argparse
import json
import sys
from pathlib import Path

from gdfm import cli, presets

WORLD = {**presets.ORDERING_BASE, "n_clicks": 60_000, "horizon_hours": 14 * 24.0}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results/curves")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = out / "config.json"
    config.write_text(json.dumps({**WORLD, "seed": args.seed}, indent=2))
    code = 0
    for which in ("gap", "entropy", "stability"):
        code |= cli.main(["analyze", which, "--config", str(config), "--out", str(out / f"{which}.csv")])
        print(f"wrote {out / which}.csv")
    return code


if __name__ == "__main__":
    sys.exit(main())
