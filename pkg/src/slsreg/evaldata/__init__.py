"""Synthetic tasks, reference oracles, evaluation metrics and CSV ingestion."""

from .csvio import CsvParseError, QuantileTransform, ingest_csv, split_indices, write_dataset_csv
from .metrics import EvalConfig, EvalReport, evaluate, monte_carlo_volume
from .oracles import OracleRegion, oracle_hdr
from .tasks import TASKS, Dataset, SyntheticTask, generate, get_task

__all__ = [
    "CsvParseError", "Dataset", "EvalConfig", "EvalReport", "OracleRegion", "QuantileTransform", "SyntheticTask",
    "TASKS", "evaluate", "generate", "get_task", "ingest_csv", "monte_carlo_volume", "oracle_hdr",
    "split_indices", "write_dataset_csv",
]
