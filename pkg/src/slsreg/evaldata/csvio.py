"""CSV ingestion and the per-column Gaussian quantile transform."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .tasks import Dataset

logger = logging.getLogger(__name__)


class CsvParseError(ValueError):
    """Raised for malformed CSV input; the message names the row and column."""


def ingest_csv(path, feature_cols=None, target_cols=None) -> Dataset:
    """Read a comma-separated file with a header row.

    Columns default to the ``x*`` / ``y*`` naming written by :func:`write_dataset_csv`.
    Lines starting with ``#`` are skipped. Row numbers in errors are 1-based
    file lines.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        numbered = [(i + 1, line) for i, line in enumerate(fh) if not line.startswith("#") and line.strip()]
    if not numbered:
        raise CsvParseError(f"{path}: empty file")
    parsed = list(csv.reader(line for _, line in numbered))
    header = [h.strip() for h in parsed[0]]
    rows = parsed[1:]
    line_no = [n for n, _ in numbered[1:]]
    if feature_cols is None:
        feature_cols = [h for h in header if h.startswith("x")]
    if target_cols is None:
        target_cols = [h for h in header if h.startswith("y")]
    missing = [c for c in list(feature_cols) + list(target_cols) if c not in header]
    if missing:
        raise CsvParseError(f"{path}: missing columns {missing}")
    if not target_cols:
        raise CsvParseError(f"{path}: no target columns")
    idx = {h: i for i, h in enumerate(header)}

    def column_block(cols):
        out = np.empty((len(rows), len(cols)))
        for r, row in enumerate(rows):
            for c, name in enumerate(cols):
                cell = row[idx[name]] if idx[name] < len(row) else ""
                try:
                    out[r, c] = float(cell)
                except ValueError:
                    raise CsvParseError(f"{path}: non-numeric value {cell!r} at row {line_no[r]}, column {name!r}") from None
        return out

    X = column_block(feature_cols) if feature_cols else np.zeros((len(rows), 1))
    return Dataset(X, column_block(target_cols))


def write_dataset_csv(path, data: Dataset, comments: dict | None = None) -> None:
    """Write ``x1..xp, y1..yd`` columns, preceded by one ``# key=value ...`` line if ``comments`` is given."""
    X = data.X.reshape(len(data.X), -1)
    Y = data.Y.reshape(len(data.Y), -1)
    header = [f"x{i + 1}" for i in range(X.shape[1])] + [f"y{j + 1}" for j in range(Y.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comments:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in sorted(comments.items())) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in np.hstack([X, Y]):
            writer.writerow([repr(float(v)) for v in row])


@dataclass
class QuantileTransform:
    """Per-column empirical-CDF rank map followed by the standard-normal inverse CDF.

    Each fitted column stores its sorted unique values and their ranks
    ``i / (n + 1)``; ties share the mean rank of the tied block. New values are
    linearly interpolated between knots and clipped to ``[1/(n+1), n/(n+1)]``.
    """

    knots: list[np.ndarray] = field(default_factory=list)
    ranks: list[np.ndarray] = field(default_factory=list)
    constant: list[bool] = field(default_factory=list)
    n: int = 0

    def fit(self, A) -> "QuantileTransform":
        A = np.asarray(A, dtype=np.float64).reshape(len(A), -1)
        n = len(A)
        self.knots, self.ranks, self.constant = [], [], []
        for j in range(A.shape[1]):
            vals, counts = np.unique(A[:, j], return_counts=True)
            ends = np.cumsum(counts)
            mean_pos = ends - (counts - 1) / 2.0
            self.knots.append(vals)
            self.ranks.append(mean_pos / (n + 1))
            self.constant.append(len(vals) == 1)
            if len(vals) == 1:
                logger.warning("column %d is constant; it will be mapped to zeros", j)
        self.n = n
        return self

    def transform(self, A) -> np.ndarray:
        A = np.asarray(A, dtype=np.float64).reshape(len(A), -1)
        lo, hi = 1.0 / (self.n + 1), self.n / (self.n + 1)
        out = np.empty_like(A)
        for j in range(A.shape[1]):
            if self.constant[j]:
                out[:, j] = 0.0
                continue
            u = np.interp(A[:, j], self.knots[j], self.ranks[j], left=lo, right=hi)
            out[:, j] = ndtri(np.clip(u, lo, hi))
        return out

    def inverse(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=np.float64).reshape(len(Z), -1)
        out = np.empty_like(Z)
        for j in range(Z.shape[1]):
            if self.constant[j]:
                out[:, j] = self.knots[j][0]
                continue
            out[:, j] = np.interp(ndtr(Z[:, j]), self.ranks[j], self.knots[j])
        return out

    def to_dict(self) -> dict:
        return {"n": self.n, "knots": [k.tolist() for k in self.knots], "ranks": [r.tolist() for r in self.ranks],
                "constant": list(self.constant)}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantileTransform":
        return cls([np.array(k) for k in d["knots"]], [np.array(r) for r in d["ranks"]], list(d["constant"]), d["n"])


def split_indices(n: int, fractions, seed: int) -> list[np.ndarray]:
    """Random disjoint index sets with the given fractions; the remainder goes to the last set."""
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.floor(np.cumsum(fractions[:-1]) * n).astype(int)
    return np.split(perm, bounds)
