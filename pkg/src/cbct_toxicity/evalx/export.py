import json
import logging
import math
from pathlib import Path
from typing import Any, Sequence, Union

import numpy as np
import pandas as pd

from cbct_toxicity.common import Columns
from cbct_toxicity.evalx.studies import CrossValidation, EvolutionResult
from cbct_toxicity.toxnet.training import TrainingHistory

logger = logging.getLogger(__name__)

PER_FOLD_FILE = "per_fold.csv"
AGGREGATE_FILE = "aggregate.csv"
FOLDS_FILE = "folds.json"
METRICS_FILE = "metrics.json"
EVOLUTION_FILE = "evolution.csv"
EVOLUTION_FIT_FILE = "evolution_fit.json"


def _sanitize(obj):
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _sanitize(obj.tolist())
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    return obj


def dumps(payload) -> str:
    return json.dumps(_sanitize(payload), indent=2, ensure_ascii=False) + "\n"


def write_json(payload: Any, path: Union[str, Path]):
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps(payload))


def write_history(history: TrainingHistory, path: Union[str, Path]):
    history.to_frame().to_csv(path, index=False)


def per_fold_frame(rows: Sequence[CrossValidation]) -> pd.DataFrame:
    frames = []
    for row in rows:
        frame = row.report.to_frame()
        frame.insert(0, Columns.FRACTION, row.fraction)
        frame.insert(0, Columns.COMBINATION, row.combination)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def aggregate_frame(rows: Sequence[CrossValidation]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                Columns.COMBINATION: row.combination,
                Columns.FRACTION: row.fraction,
                **row.report.summary(),
            }
            for row in rows
        ]
    )


def write_metrics_tables(rows: Sequence[CrossValidation], directory: Union[str, Path]):
    """Per-fold and aggregate CSVs, fold assignments and a JSON summary."""
    directory = Path(directory)
    per_fold_frame(rows).to_csv(directory / PER_FOLD_FILE, index=False)
    aggregate_frame(rows).to_csv(directory / AGGREGATE_FILE, index=False)
    write_json(
        {
            "fold-hash": rows[0].fold_hash if rows else None,
            "folds": rows[0].folds if rows else [],
            "hashes": {f"{row.combination}@{row.fraction}": row.fold_hash for row in rows},
        },
        directory / FOLDS_FILE,
    )
    write_json(
        [
            {"combination": row.combination, "fraction": row.fraction, **row.report.summary()}
            for row in rows
        ],
        directory / METRICS_FILE,
    )
    logger.info(f"Metrics tables written to {directory}")


def write_evolution(result: EvolutionResult, directory: Union[str, Path]):
    directory = Path(directory)
    result.table.to_frame().to_csv(directory / EVOLUTION_FILE, index=False)
    write_json(result.table.fit_summary(), directory / EVOLUTION_FIT_FILE)
    write_metrics_tables(result.rows, directory)
