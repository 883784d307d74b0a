"""Loss × Relative CoordConv ablation: train each cell with a shared seed and compare."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from adaptis.config.settings import RunConfig, write_run_config
from adaptis.core.evaluation import evaluate_predictions, predict_dataset
from adaptis.core.training import seed_everything, train_adaptis
from adaptis.data.toygen import Dataset
from adaptis.model.network import AdaptISNet

LOGGER = logging.getLogger(__name__)

DEFAULT_LOSSES = ("nfl", "fl", "bce")
DEFAULT_COORDCONV = (True, False)
KEY_THRESHOLD = 0.8


@dataclasses.dataclass
class AblationResult:
    table: pd.DataFrame
    deltas: Dict[str, Optional[float]]


def cell_name(loss: str, coordconv: bool) -> str:
    return f"{loss}_{'coordconv' if coordconv else 'no_coordconv'}"


def cell_config(base: RunConfig, loss: str, coordconv: bool) -> RunConfig:
    config = copy.deepcopy(base)
    config.train.loss.kind = loss
    config.model.use_coordconv = coordconv
    return config.validate()


def run_cell(
    config: RunConfig,
    train_set: Dataset,
    test_set: Dataset,
    out_dir: Path,
    *,
    device: str = "cpu",
    progress: bool = False,
) -> Dict[str, Any]:
    """Train one cell from scratch and evaluate it; returns the metrics record."""
    seed = config.train.seed
    seed_everything(seed, config.deterministic)
    model = AdaptISNet(config.model)
    write_run_config(config, out_dir / "config.json")
    train_adaptis(train_set, model, config.train, out_dir, device=device, progress=progress)
    # the proposal branch is not trained here, so cells are scored with random proposals
    pairs = predict_dataset(model, test_set, config.infer, strategy="random", progress=progress)
    return evaluate_predictions(pairs, test_set.gen_config, config.infer.ap_thresholds)


def _row(loss: str, coordconv: bool, record: Dict[str, Any]) -> Dict[str, Any]:
    row: Dict[str, Any] = {"loss": loss, "coordconv": coordconv}
    for threshold, value in record["instances"]["ap"].items():
        row[f"ap@{threshold}"] = value
    row["pq"] = record["panoptic"]["pq"]
    row["pq_things"] = record["panoptic"]["pq_things"]
    row["pq_stuff"] = record["panoptic"]["pq_stuff"]
    row["miou"] = record["miou"]
    return row


def _lookup(table: pd.DataFrame, loss: str, coordconv: bool, column: str) -> Optional[float]:
    match = table[(table["loss"] == loss) & (table["coordconv"] == coordconv)]
    if match.empty or column not in match:
        return None
    return float(match[column].iloc[0])


def compute_deltas(table: pd.DataFrame, column: str = f"ap@{KEY_THRESHOLD:.2f}") -> Dict[str, Optional[float]]:
    """Signed differences: NFL minus FL per CoordConv setting, and CoordConv on minus off per loss."""
    deltas: Dict[str, Optional[float]] = {}
    for coordconv in sorted(set(table["coordconv"]), reverse=True):
        nfl, fl = _lookup(table, "nfl", coordconv, column), _lookup(table, "fl", coordconv, column)
        deltas[f"nfl_minus_fl[{'coordconv' if coordconv else 'no_coordconv'}]"] = None if nfl is None or fl is None else nfl - fl
    for loss in dict.fromkeys(table["loss"]):
        on, off = _lookup(table, loss, True, column), _lookup(table, loss, False, column)
        deltas[f"coordconv_gain[{loss}]"] = None if on is None or off is None else on - off
    return deltas


def run_ablation(
    base: RunConfig,
    train_set: Dataset,
    test_set: Dataset,
    out_dir: Path,
    *,
    losses: Sequence[str] = DEFAULT_LOSSES,
    coordconv: Sequence[bool] = DEFAULT_COORDCONV,
    device: str = "cpu",
    progress: bool = False,
) -> AblationResult:
    """Run every (loss, coordconv) cell and write ``ablation.csv`` and ``ablation.json``."""
    out_dir = Path(out_dir)
    rows: List[Dict[str, Any]] = []
    for loss in losses:
        for use_coordconv in coordconv:
            name = cell_name(loss, use_coordconv)
            LOGGER.info("Ablation cell %s", name)
            config = cell_config(base, loss, use_coordconv)
            record = run_cell(config, train_set, test_set, out_dir / name, device=device, progress=progress)
            rows.append(_row(loss, use_coordconv, record))

    table = pd.DataFrame(rows)
    deltas = compute_deltas(table)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / "ablation.csv", index=False)
    (out_dir / "ablation.json").write_text(
        json.dumps({"rows": json.loads(table.to_json(orient="records")), "deltas": deltas, "key_metric": f"ap@{KEY_THRESHOLD:.2f}"}, indent=2)
        + "\n",
        encoding="utf-8",
    )
    for name, value in deltas.items():
        LOGGER.info("%s: %s", name, "n/a" if value is None else f"{value:+.4f}")
    return AblationResult(table=table, deltas=deltas)


__all__ = ["AblationResult", "cell_config", "cell_name", "compute_deltas", "run_ablation", "run_cell"]
