"""Command-line entry point.

Exit status: 0 on success, 1 when a run fails, 2 on configuration or input
errors. Every output directory carries a ``meta.json`` (standalone CSV
outputs get a ``.meta.json`` sidecar) with the config hash, seed, tool
version, git revision and input file hashes. Nothing time-dependent is
written, so identical inputs give byte-identical outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis
from .config import ConfigError, load_config, load_matrix
from .core import atomic_write, read_stream_csv, write_stream_csv
from .datagen import gen_stream, gen_world, ingest_criteo
from .engine import Pretrained, RunConfig, run_experiment_suite, run_pretrain, run_stream
from .model import checkpoint_bytes, load_checkpoint_bytes
from .weights import WeightVector

log = logging.getLogger("gdfm")

CKPT_MODELS = ("theta", "theta_delayed", "phi", "aux_dp", "aux_in")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _git_revision():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def _json(doc) -> str:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, dict):
            return {str(k): clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, np.generic):
            return clean(v.item())
        return v
    return json.dumps(clean(doc), indent=1, sort_keys=True) + "\n"


def _input(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"input not found: {path}")
    return path


def metadata(config: RunConfig | None, inputs: dict, seed_source: str = "config") -> dict:
    return {
        "tool": "gdfm",
        "version": __version__,
        "git": _git_revision(),
        "config": None if config is None else config.to_dict(),
        "config_sha256": None if config is None else config.digest(),
        "seed": None if config is None else config.seed,
        "seed_source": seed_source,
        "inputs": {k: {"name": Path(p).name, "sha256": _sha256(p)} for k, p in sorted(inputs.items())},
    }


def _config(path):
    cfg = load_config(_input(path))
    return cfg, ("GDFM_SEED" if "GDFM_SEED" in os.environ else "config")


def _stream_from(args, cfg):
    if getattr(args, "stream", None):
        return read_stream_csv(_input(args.stream)), None
    if cfg.world is None:
        raise ConfigError("no --stream given and the config has no world section")
    world = gen_world(cfg.world_config())
    return gen_stream(world, cfg.n_clicks, cfg.horizon_hours), world


# ------------------------------------------------------------ commands

def cmd_generate(args) -> None:
    cfg, src = _config(args.config)
    if cfg.world is None:
        raise ConfigError(f"{args.config}: generate needs a world section")
    world = gen_world(cfg.world_config())
    stream = gen_stream(world, cfg.n_clicks, cfg.horizon_hours)
    out = Path(args.out)
    write_stream_csv(stream, out / "stream.csv")
    atomic_write(out / "world.json", world.to_json() + "\n")
    atomic_write(out / "meta.json", _json(metadata(cfg, {"config": args.config}, src)))


def cmd_ingest(args) -> None:
    inputs = {"input": _input(args.input)}
    specs, cfg, src = None, None, "config"
    if args.config:
        cfg, src = _config(args.config)
        specs = cfg.specs()
        inputs["config"] = args.config
    try:
        stream, report = ingest_criteo(args.input, args.hash_bins, args.numeric_bins, specs)
    except ValueError as exc:
        raise ConfigError(str(exc))
    out = Path(args.out)
    write_stream_csv(stream, out / "stream.csv")
    atomic_write(out / "ingest.json", _json(vars(report)))
    atomic_write(out / "meta.json", _json(metadata(cfg, inputs, src)))


def cmd_pretrain(args) -> None:
    cfg, src = _config(args.config)
    stream_path = _input(args.stream)
    stream = read_stream_csv(stream_path)
    pre = run_pretrain(stream, cfg)
    out = Path(args.out)
    for name in CKPT_MODELS:
        atomic_write(out / f"{name}.gdfm", checkpoint_bytes(getattr(pre, name), seed=cfg.seed))
    atomic_write(out / "pretrain.json", _json({
        "split_hour": pre.split_hour,
        "train_auc": pre.train_auc,
        "weights": pre.weights.to_dict(),
        "stream_path": os.path.relpath(os.path.abspath(stream_path), os.path.abspath(out)),
        "stream_sha256": _sha256(stream_path),
    }))
    atomic_write(out / "meta.json", _json(metadata(cfg, {"config": args.config, "stream": stream_path}, src)))


def load_pretrained(ckpt) -> tuple[Pretrained, dict]:
    ckpt = _input(ckpt)
    info = json.loads((_input(ckpt / "pretrain.json")).read_text(encoding="utf-8"))
    models = {}
    for name in CKPT_MODELS:
        models[name] = load_checkpoint_bytes(_input(ckpt / f"{name}.gdfm").read_bytes())[0]
    pre = Pretrained(models["theta"], models["theta_delayed"], models["phi"],
                     WeightVector.from_dict(info["weights"]), int(info["split_hour"]),
                     models["aux_dp"], models["aux_in"],
                     math.nan if info["train_auc"] is None else info["train_auc"])
    return pre, info


def cmd_stream(args) -> None:
    cfg, src = _config(args.config)
    pre, info = load_pretrained(args.ckpt)
    # a recorded stream path is relative to the checkpoint directory
    stream_path = _input(args.stream or Path(args.ckpt) / info["stream_path"])
    if not args.stream and _sha256(stream_path) != info["stream_sha256"]:
        raise ConfigError(f"{stream_path}: stream changed since pretraining")
    result = run_stream(read_stream_csv(stream_path), pre, cfg)
    out = Path(args.report)
    inputs = {"config": args.config, "stream": stream_path,
              **{f"ckpt_{n}": Path(args.ckpt) / f"{n}.gdfm" for n in CKPT_MODELS}}
    atomic_write(out / "hourly.csv", result.report.to_csv())
    summary = result.summary(cfg)
    summary["meta"] = metadata(cfg, inputs, src)
    atomic_write(out / "summary.json", _json(summary))
    atomic_write(out / "theta.gdfm", checkpoint_bytes(result.theta, seed=cfg.seed))
    if result.theta_delayed is not None:
        atomic_write(out / "theta_delayed.gdfm", checkpoint_bytes(result.theta_delayed, seed=cfg.seed))
        atomic_write(out / "phi.gdfm", checkpoint_bytes(result.phi, seed=cfg.seed))


def cmd_suite(args) -> int:
    suite = load_matrix(_input(args.matrix))
    if args.jobs is not None:
        suite.jobs = args.jobs
    result = run_experiment_suite(suite)
    out = Path(args.out) if args.out else Path(args.matrix).with_suffix("")
    result["meta"] = metadata(None, {"matrix": args.matrix})
    atomic_write(out / "summary.json", _json(result))
    rows = ["run,metric,mean,std,rel_mean,rel_std"]
    for name, entry in result["runs"].items():
        for metric, v in entry.items():
            rows.append(",".join([name, metric] + [repr(float(v[k])) for k in
                                                    ("mean", "std", "rel_mean", "rel_std")]))
    atomic_write(out / "table.csv", "\n".join(rows) + "\n")
    if result["partial"]:
        log.error("suite incomplete: %s", result["failure"])
        return 1
    return 0


def cmd_analyze(args) -> None:
    cfg, src = _config(args.config)
    stream, world = _stream_from(args, cfg)
    if args.which == "gap":
        curve = analysis.temporal_gap_curve(stream, analysis.GapConfig(seed=cfg.seed), world,
                                            None if world is None else world.n_bins)
        text = analysis.to_csv(["day", "kl_model", "kl_true"], curve.rows())
    elif args.which == "entropy":
        grid = [float(v) for v in args.grid.split(",")]
        text = analysis.to_csv(["reveal_delay", "entropy"], analysis.entropy_vs_reveal_curve(stream, grid))
    else:
        curve = analysis.action_stability_curve(stream, bucket_hours=args.bucket_hours)
        header = ["day", "n", "cvr"] + [f"p_a{j}_given_y1" for j in range(stream.n_actions)]
        text = analysis.to_csv(header, curve.rows)
    inputs = {"config": args.config}
    if args.stream:
        inputs["stream"] = args.stream
    atomic_write(args.out, text)
    atomic_write(f"{args.out}.meta.json", _json(metadata(cfg, inputs, src)))


def cmd_mc_study(args) -> None:
    study = analysis.mc_entropy_vs_tv(args.trials, args.k, args.n, rng=args.seed, n_bins=args.bins)
    text = analysis.to_csv(["entropy", "mean_ratio", "count"], study.rows())
    atomic_write(args.out, text)
    meta = metadata(None, {})
    meta.update(seed=args.seed, trials=args.trials, k=args.k, n=args.n,
                spearman=study.spearman, max_ratio=float(study.ratio.max()))
    atomic_write(f"{args.out}.meta.json", _json(meta))


# ------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gdfm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gdfm {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", help="simulate a drifting click stream")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("ingest", help="convert a Criteo conversion log to a stream CSV")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--hash-bins", type=int, default=1 << 16)
    s.add_argument("--numeric-bins", type=int, default=16)
    s.add_argument("--config", help="run config whose action specs define early-conversion actions")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("pretrain", help="fit the pretrained models on the pretraining split")
    s.add_argument("--config", required=True)
    s.add_argument("--stream", required=True)
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("stream", help="run the hourly evaluate-then-train protocol")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--report", required=True, help="report directory")
    s.add_argument("--stream", help="stream CSV (default: the one used for pretraining)")
    s.set_defaults(func=cmd_stream)

    s = sub.add_parser("suite", help="run a multi-seed experiment matrix")
    s.add_argument("--matrix", required=True)
    s.add_argument("--out")
    s.add_argument("--jobs", type=int)
    s.set_defaults(func=cmd_suite)

    s = sub.add_parser("analyze", help="data-analysis curves as CSV")
    s.add_argument("which", choices=["gap", "entropy", "stability"])
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output CSV")
    s.add_argument("--stream")
    s.add_argument("--grid", default="0,1,2,4,8,12,24,48", help="reveal delays for `entropy`")
    s.add_argument("--bucket-hours", type=float, default=24.0)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("mc-study", help="entropy against TV contraction on random channels")
    s.add_argument("--trials", type=int, default=10_000)
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--n", type=int, default=2)
    s.add_argument("--bins", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mc_study)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        status = args.func(args)
    except ConfigError as exc:
        print(f"gdfm: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"gdfm: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return status or 0


if __name__ == "__main__":
    sys.exit(main())
