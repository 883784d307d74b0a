"""Utilities for writing and reading the per-epoch training log ``metrics.jsonl``."""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

LOGGER = logging.getLogger(__name__)

METRICS_LOG_NAME = "metrics.jsonl"


@dataclasses.dataclass
class EpochRecord:
    """Structured representation of a single line of ``metrics.jsonl``."""

    stage: str
    epoch: int
    mean_loss: float
    median_loss: float
    lr: float
    steps: int
    step_losses: List[float] = dataclasses.field(default_factory=list)
    terms: Dict[str, float] = dataclasses.field(default_factory=dict)
    seconds: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


@dataclasses.dataclass
class HistorySummary:
    """Container for ``summarize_history`` outputs."""

    stage: str
    epochs: int
    first_median: Optional[float]
    last_median: Optional[float]
    best_epoch: Optional[int]

    @property
    def improved(self) -> bool:
        if self.first_median is None or self.last_median is None:
            return False
        return self.last_median < self.first_median

    def summary_line(self) -> str:
        """Return a human-readable one-line summary of the run."""

        if not self.epochs:
            return f"- {self.stage}: no epochs recorded"
        return (
            f"- {self.stage}: {self.epochs} epochs, median loss "
            f"{self.first_median:.4f} → {self.last_median:.4f} (best epoch {self.best_epoch})"
        )


def append_record(log_path: Path, record: EpochRecord) -> None:
    """Append ``record`` as one JSON line."""

    log_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with log_path.open("a", encoding="utf-8") as handle:
            handle.write(record.to_json() + "\n")
    except OSError:
        LOGGER.exception("Failed to write metrics record for epoch %d", record.epoch)


def parse_metrics_log(log_path: Path, stage: Optional[str] = None) -> List[EpochRecord]:
    """Parse ``metrics.jsonl`` into records, optionally keeping one stage only."""

    if not log_path.exists():
        return []

    fields = {field.name for field in dataclasses.fields(EpochRecord)}
    records: List[EpochRecord] = []
    for line_number, line in enumerate(log_path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError:
            LOGGER.warning("Skipping malformed line %d in %s", line_number, log_path)
            continue
        record = EpochRecord(**{key: value for key, value in data.items() if key in fields})
        if stage is None or record.stage == stage:
            records.append(record)
    return records


def summarize_history(records: List[EpochRecord], stage: str = "adaptis") -> HistorySummary:
    """Compare the first and last epochs of a stage."""

    selected = [record for record in records if record.stage == stage]
    if not selected:
        return HistorySummary(stage=stage, epochs=0, first_median=None, last_median=None, best_epoch=None)
    best = min(selected, key=lambda record: record.median_loss)
    return HistorySummary(
        stage=stage,
        epochs=len(selected),
        first_median=selected[0].median_loss,
        last_median=selected[-1].median_loss,
        best_epoch=best.epoch,
    )


__all__ = [
    "EpochRecord",
    "HistorySummary",
    "METRICS_LOG_NAME",
    "append_record",
    "parse_metrics_log",
    "summarize_history",
]
