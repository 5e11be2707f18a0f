"""Run one of the preset experiment matrices and write summary.json / table.csv.

    python3 scripts/run_matrix.py ordering --out results/ordering
    python3 scripts/run_matrix.py flip --seeds 0 1 2
"""
import argparse
import json
import sys
from pathlib import Path

from gdfm import cli, presets

MATRICES = {
    "ordering": presets.ordering_matrix,
    "flip": lambda seeds: presets.flip_matrix(seeds=seeds),
    "safety": presets.safety_matrix,
    "ablation": presets.ablation_matrix,
}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("matrix", choices=sorted(MATRICES))
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--out", help="output directory (default results/<matrix>)")
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args(argv)
    build = MATRICES[args.matrix]
    matrix = build(args.seeds) if args.seeds else build()
    out = Path(args.out or f"results/{args.matrix}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "matrix.json").write_text(json.dumps(matrix, indent=2))
    code = cli.main(["suite", "--matrix", str(out / "matrix.json"), "--out", str(out), "--jobs", str(args.jobs)])
    if code == 0:
        runs = json.loads((out / "summary.json").read_text())["runs"]
        for name, entry in runs.items():
            a = entry["auc"]
            print(f"{name:>16}  auc {a['mean']:.4f} +- {a['std']:.4f}  rel {a['rel_mean']:6.1f}%")
    return code


if __name__ == "__main__":
    sys.exit(main())
