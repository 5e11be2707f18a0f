"""Entropy of random channels against how much they shrink TV distance."""
import argparse
import sys

from gdfm import cli


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results/mc_study.csv")
    args = p.parse_args(argv)
    code = 0
    for k, n in ((2, 2), (4, 2), (4, 3)):
        out = args.out.replace(".csv", f"_k{k}_n{n}.csv")
        code |= cli.main(["mc-study", "--trials", str(args.trials), "--k", str(k), "--n", str(n),
                          "--seed", str(args.seed), "--out", out])
        print(f"k={k} n={n}: wrote {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
