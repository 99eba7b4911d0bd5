"""Command-line entry point: ``slsreg {gen-data,train,calibrate,evaluate,levelset,predict}``.

Every command is deterministic given its inputs and seed. Failures exit
nonzero after printing one JSON line ``{"error": ..., "message": ...}`` to
stderr. Log verbosity comes from ``SLSREG_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .conformal import CalibrationResult, calibrate
from .evaldata import (
    QuantileTransform,
    EvalConfig,
    evaluate,
    generate,
    get_task,
    ingest_csv,
    split_indices,
    write_dataset_csv,
)
from .evaldata.tasks import TASKS, Dataset
from .frontiers import FrontierConfig
from .modelio import load_model, save_model
from .quantiles import QuantileConfig
from .training import TrainConfig, train

logger = logging.getLogger("slsreg")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class DataConfig:
    task: str | None = "gauss2d"
    csv: str | None = None
    feature_cols: list[str] | None = None
    target_cols: list[str] | None = None
    n_train: int = 8000
    n_cal: int = 2000
    n_test: int = 10000
    cal_fraction: float = 0.2
    test_fraction: float = 0.2
    quantile_transform: bool = True


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    frontier: FrontierConfig = field(default_factory=FrontierConfig)
    quantile: QuantileConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out: str = "run"
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"data": DataConfig, "frontier": FrontierConfig, "quantile": QuantileConfig, "train": TrainConfig,
             "eval": EvalConfig}


def _unknown_keys(raw: dict) -> list[str]:
    bad = [k for k in raw if k not in {f.name for f in fields(RunConfig)}]
    for name, cls in _SECTIONS.items():
        sub = raw.get(name)
        if isinstance(sub, dict):
            allowed = {f.name for f in fields(cls)}
            bad += [f"{name}.{k}" for k in sub if k not in allowed]
    return bad


def parse_run_config(raw: dict | None, seed: int | None = None, out: str | None = None) -> RunConfig:
    """Validate a raw mapping; every unknown key is reported in one error."""
    raw = dict(raw or {})
    bad = _unknown_keys(raw)
    if bad:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(bad)))
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = out
    try:
        cfg = RunConfig(
            data=DataConfig(**(raw.get("data") or {})),
            frontier=FrontierConfig(**(raw.get("frontier") or {})),
            quantile=QuantileConfig(**raw["quantile"]) if raw.get("quantile") else None,
            train=TrainConfig(**(raw.get("train") or {})),
            eval=EvalConfig(**(raw.get("eval") or {})),
            out=str(raw.get("out", "run")),
            seed=int(raw.get("seed", 0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    # the run seed drives training; data and evaluation seeds derive from it
    cfg.train = dataclasses.replace(cfg.train, seed=cfg.seed)
    cfg.eval = dataclasses.replace(cfg.eval, seed=cfg.seed)
    if (cfg.data.task is None) == (cfg.data.csv is None):
        raise ConfigError("exactly one of data.task and data.csv must be set")
    if cfg.data.task is not None and cfg.data.task not in TASKS:
        raise ConfigError(f"unknown task {cfg.data.task!r}; choose from {sorted(TASKS)}")
    return cfg


def load_config_file(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    raw = yaml.safe_load(text)
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping")
    # emitted resolved configs carry their provenance; it is output metadata, not input
    raw.pop("provenance", None)
    return raw


def config_hash(cfg: RunConfig) -> str:
    """Hash of the resolved config; the output directory is excluded so runs are relocatable."""
    d = cfg.to_dict()
    d.pop("out")
    blob = json.dumps(d, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(seed: int, chash: str) -> dict:
    return {"seed": seed, "config_hash": chash, "artifact_version": __version__}


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_json_safe(x) for x in v]
    return v


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _data_seeds(seed: int) -> dict[str, int]:
    return {"train": seed * 3 + 1, "cal": seed * 3 + 2, "test": seed * 3 + 3}


def load_splits(cfg: RunConfig) -> tuple[dict[str, Dataset], QuantileTransform | None, QuantileTransform | None]:
    """Train / calibration / test splits in model space, plus the fitted transforms for CSV sources."""
    d = cfg.data
    if d.task is not None:
        task = get_task(d.task)
        seeds = _data_seeds(cfg.seed)
        sizes = {"train": d.n_train, "cal": d.n_cal, "test": d.n_test}
        return {k: generate(task, sizes[k], seeds[k]) for k in sizes}, None, None
    data = ingest_csv(d.csv, d.feature_cols, d.target_cols)
    cal_idx, test_idx, train_idx = split_indices(len(data), [d.cal_fraction, d.test_fraction, 0.0], cfg.seed)
    splits = {"train": data.subset(train_idx), "cal": data.subset(cal_idx), "test": data.subset(test_idx)}
    if not d.quantile_transform:
        return splits, None, None
    tx = QuantileTransform().fit(splits["train"].X)
    ty = QuantileTransform().fit(splits["train"].Y)
    return {k: Dataset(tx.transform(s.X), ty.transform(s.Y)) for k, s in splits.items()}, tx, ty


def cmd_gen_data(args) -> int:
    task = get_task(args.task)
    out = Path(args.out or f"{args.task}.csv")
    data = generate(task, args.n, args.seed)
    meta = {**provenance(args.seed, _hash_obj({"task": args.task, "n": args.n})), "task": args.task}
    write_dataset_csv(out, data, meta)
    return 0


def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def cmd_train(args) -> int:
    raw = load_config_file(args.config) if args.config else {}
    cfg = parse_run_config(raw, seed=args.seed, out=args.out)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    splits, tx, ty = load_splits(cfg)
    tr = splits["train"]
    X, Y = tr.X.reshape(len(tr.X), -1), tr.Y.reshape(len(tr.Y), -1)
    fcfg = dataclasses.replace(cfg.frontier, feature_dim=X.shape[1], response_dim=Y.shape[1])
    qcfg = dataclasses.replace(cfg.quantile, feature_dim=X.shape[1]) if cfg.quantile else None
    cfg.frontier, cfg.quantile = fcfg, qcfg
    chash = config_hash(cfg)
    meta = provenance(cfg.seed, chash)

    result = train(X, Y, cfg.train, fcfg, qcfg)
    save_model(out / "model.slsr", result.region, meta)
    (out / "train_log.jsonl").write_text(
        json.dumps({"provenance": meta}, sort_keys=True) + "\n"
        + "".join(json.dumps(_json_safe(r), sort_keys=True) + "\n" for r in result.log), encoding="utf-8")
    resolved = {**cfg.to_dict(), "provenance": meta}
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True), encoding="utf-8")
    for name, split in splits.items():
        write_dataset_csv(out / f"{name}.csv", split, {**meta, "split": name})
    if tx is not None:
        _dump_json(out / "transform.json", {"provenance": meta, "features": tx.to_dict(), "targets": ty.to_dict()})
    return 0


def _load_region(model_path, calibration_path=None):
    region, meta = load_model(model_path)
    if calibration_path:
        cal = CalibrationResult.from_json(Path(calibration_path).read_text(encoding="utf-8"))
        region = region.with_scale(cal.scale)
    return region, meta


def cmd_calibrate(args) -> int:
    region, meta = load_model(args.model)
    data = ingest_csv(args.data)
    result = calibrate(region, data.X, data.Y, args.tau)
    out = Path(args.out or Path(args.model).with_name("calibration.json"))
    payload = json.loads(result.to_json())
    payload["provenance"] = meta
    out.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_evaluate(args) -> int:
    region, meta = _load_region(args.model, args.calibration)
    task = None
    if args.task:
        task = get_task(args.task)
        data = generate(task, args.n, args.seed if args.seed is not None else meta.get("seed", 0) * 3 + 3)
    elif args.data:
        data = ingest_csv(args.data)
    else:
        raise ConfigError("evaluate needs --data or --task")
    ecfg = parse_run_config(load_config_file(args.config)).eval if args.config else EvalConfig()
    if args.seed is not None:
        ecfg = dataclasses.replace(ecfg, seed=args.seed)
    report = evaluate(region, data.X, data.Y, tau=args.tau, task=task, config=ecfg)
    out = Path(args.out or Path(args.model).with_name("report.json"))
    payload = {**report.to_dict(), "scale": _json_safe(region.scale), "provenance": meta, "eval_config": asdict(ecfg)}
    _dump_json(out, payload)
    if report.per_x:
        report.write_per_x_csv(out.with_suffix(".per_x.csv"))
    return 0


def _parse_grid(spec: str) -> list[tuple[float, float, int]]:
    """``lo:hi:n`` per response dimension, comma separated."""
    axes = []
    for part in spec.split(","):
        lo, hi, n = part.split(":")
        axes.append((float(lo), float(hi), int(n)))
    return axes


def levelset_grid(region, x, axes):
    """Scores over a row-major lattice (last axis fastest) and the threshold at ``x``."""
    if len(axes) != region.d:
        raise ConfigError(f"grid has {len(axes)} axes but the response dimension is {region.d}")
    lines = [np.linspace(lo, hi, n) for lo, hi, n in axes]
    pts = np.stack(np.meshgrid(*lines, indexing="ij"), axis=-1).reshape(-1, region.d)
    X = np.repeat(np.atleast_2d(x), len(pts), axis=0)
    return region.scores(X, pts), float(region.thresholds(np.atleast_2d(x))[0])


def cmd_levelset(args) -> int:
    region, meta = _load_region(args.model, args.calibration)
    x = np.array([float(v) for v in args.x.split(",")], dtype=np.float64)
    axes = _parse_grid(args.grid)
    scores, thr = levelset_grid(region, x, axes)
    out = Path(args.out or Path(args.model).with_name("levelset.txt"))
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(f"# seed={meta.get('seed')} config_hash={meta.get('config_hash')} "
                 f"artifact_version={meta.get('artifact_version')}\n")
        fh.write(f"dims {len(axes)}\n")
        fh.write("x " + " ".join(repr(float(v)) for v in x) + "\n")
        for i, (lo, hi, n) in enumerate(axes):
            fh.write(f"range {i} {lo!r} {hi!r}\n")
        fh.write("resolution " + " ".join(str(n) for _, _, n in axes) + "\n")
        fh.write(f"threshold {thr!r}\n")
        fh.write("scores\n")
        for s in scores:
            fh.write(f"{float(s)!r}\n")
    return 0


def cmd_predict(args) -> int:
    region, meta = _load_region(args.model, args.calibration)
    data = ingest_csv(args.points)
    scores = region.scores(data.X, data.Y)
    thr = region.thresholds(data.X)
    out = Path(args.out or Path(args.model).with_name("predictions.csv"))
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(f"# seed={meta.get('seed')} config_hash={meta.get('config_hash')} "
                 f"artifact_version={meta.get('artifact_version')}\n")
        fh.write("index,score,threshold,inside\n")
        for i, (s, t) in enumerate(zip(scores, thr)):
            fh.write(f"{i},{float(s)!r},{float(t)!r},{int(s <= t)}\n")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _JsonErrorParser(argparse.ArgumentParser):
    """Usage errors follow the same one-line JSON contract as runtime errors."""

    def error(self, message):
        print(json.dumps({"error": "usage", "message": f"{self.prog}: {message}"}), file=sys.stderr)
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _JsonErrorParser(prog="slsreg", description="Super-level-set regression regions.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="sample a synthetic task to CSV")
    g.add_argument("--task", required=True, choices=sorted(TASKS))
    g.add_argument("--n", type=int, default=10000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a region from a YAML/JSON run config")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", help="split-conformal scale from a calibration CSV")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--tau", type=float)
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("evaluate", help="coverage / volume / conditional-deviation report")
    e.add_argument("--model", required=True)
    e.add_argument("--calibration")
    e.add_argument("--data")
    e.add_argument("--task", choices=sorted(TASKS))
    e.add_argument("--n", type=int, default=10000)
    e.add_argument("--tau", type=float)
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    lv = sub.add_parser("levelset", help="frontier scores on a response grid at fixed X")
    lv.add_argument("--model", required=True)
    lv.add_argument("--calibration")
    lv.add_argument("--x", required=True, help="comma-separated feature vector")
    lv.add_argument("--grid", required=True, help="lo:hi:n per response dim, comma separated (use --grid=... when lo is negative)")
    lv.add_argument("--out")
    lv.set_defaults(func=cmd_levelset)

    pr = sub.add_parser("predict", help="membership and scores for points in a CSV")
    pr.add_argument("--model", required=True)
    pr.add_argument("--calibration")
    pr.add_argument("--points", required=True)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SLSREG_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI contract is one machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
