"""Shared plumbing for the experiment scripts: argument parsing, splits, calibration, output."""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from slsreg.conformal import calibrate
from slsreg.evaldata import generate


def parser(description: str, steps: int) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--steps", type=int, default=steps, help="training steps per model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results")
    p.add_argument("--verbose", action="store_true")
    return p


def setup(args) -> Path:
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def splits(task, n_train: int, seed: int, n_cal: int = 20_000, n_test: int = 10_000):
    """Train, calibration and test sets from disjoint seeds."""
    return (generate(task, n_train, 3 * seed + 1), generate(task, n_cal, 3 * seed + 2),
            generate(task, n_test, 3 * seed + 3))


def calibrated(region, cal):
    return region.with_scale(calibrate(region, cal.X, cal.Y).scale)


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n", encoding="utf-8")
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


def intervals(mask: np.ndarray, grid: np.ndarray) -> list[tuple[float, float]]:
    """Maximal runs of ``True`` in ``mask`` as ``(lo, hi)`` grid endpoints."""
    edges = np.flatnonzero(np.diff(np.concatenate([[0], mask.astype(int), [0]])))
    return [(float(grid[a]), float(grid[b - 1])) for a, b in zip(edges[::2], edges[1::2])]
