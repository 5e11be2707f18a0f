"""JSON configuration loading and validation."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, fields
from importlib import resources
from pathlib import Path

import jsonschema

from .engine import RunConfig, SuiteConfig, _apply_overrides


class ConfigError(Exception):
    """Bad or missing configuration; maps to exit status 2."""


def schema(name: str = "run") -> dict:
    text = resources.files("gdfm").joinpath("config_schema.json").read_text(encoding="utf-8")
    doc = json.loads(text)
    return {**doc, "$ref": f"#/definitions/{name}"}


def _parse(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: JSON parse error at line {exc.lineno} column {exc.colno}: {exc.msg}")


def _validate(doc, name: str, origin: str) -> None:
    validator = jsonschema.Draft7Validator(schema(name))
    e = jsonschema.exceptions.best_match(validator.iter_errors(doc))
    if e is not None:
        # descend into oneOf/anyOf so the innermost failing field is named
        while e.context:
            e = jsonschema.exceptions.best_match(e.context)
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{origin}: schema violation at {where}: {e.message}")


def run_config_from_dict(doc: dict, origin: str = "<config>") -> RunConfig:
    _validate(doc, "run", origin)
    try:
        cfg = RunConfig(**doc)
        cfg.specs()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{origin}: {exc}")
    return cfg


def load_config(path) -> RunConfig:
    """Parse, validate and fill defaults. ``GDFM_SEED`` overrides the seed."""
    cfg = run_config_from_dict(_parse(path), str(path))
    env = os.environ.get("GDFM_SEED")
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError:
            raise ConfigError(f"GDFM_SEED must be an integer, got {env!r}")
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(asdict(cfg), indent=1, sort_keys=True)


def load_matrix(path) -> SuiteConfig:
    doc = _parse(path)
    _validate(doc, "matrix", str(path))
    suite = SuiteConfig(**doc)
    for run in suite.runs:
        run_config_from_dict(_apply_overrides(suite.base, run.get("overrides", {})),
                             f"{path}: run {run['name']!r}")
    run_config_from_dict(suite.base, f"{path}: base")
    return suite


RUN_FIELDS = [f.name for f in fields(RunConfig)]
