"""
Loggers - Training log

Line-delimited JSON records (step, lr, train_loss, eval_metric) written by
the training loops. Records can also be forwarded to a queue that the
monitor drains.
"""

import json
import logging
from pathlib import Path
from queue import Full
from typing import IO, Any, List, Optional, Union

from ..core.models import TrainRecord

logger = logging.getLogger(__name__)

# record queue the monitor reads from, if one is running
_record_queue: Optional[Any] = None


def init_record_queue(queue: Optional[Any]) -> None:
    """Registers the queue every TrainLogger forwards records to."""
    global _record_queue
    _record_queue = queue


class TrainLogger:
    """
    Collects TrainRecords of one run. With a path, every record is appended
    to a JSONL file as it is logged.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None, run: str = "", phase: str = ""):
        self.path = Path(path) if path is not None else None
        self.run = run
        self.phase = phase
        self.records: List[TrainRecord] = []
        self._handle: Optional[IO[str]] = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = self.path.open("a", encoding="utf-8")

    def child(self, phase: str) -> "TrainLogger":
        """Logger for a sub-phase sharing this logger's file and record list."""
        sub = TrainLogger.__new__(TrainLogger)
        sub.path, sub.run, sub.phase = self.path, self.run, phase
        sub.records, sub._handle = self.records, self._handle
        return sub

    def log(self, step: int, lr: float, train_loss: float, eval_metric: Optional[float] = None) -> TrainRecord:
        record = TrainRecord(
            step=step, lr=lr, train_loss=train_loss, eval_metric=eval_metric, phase=self.phase, run=self.run
        )
        self.records.append(record)
        if self._handle is not None:
            self._handle.write(json.dumps(record.model_dump(mode="json")) + "\n")
            self._handle.flush()
        if _record_queue is not None:
            try:
                _record_queue.put_nowait({"type": "train_record", "data": record.model_dump(mode="json")})
            except Full:
                pass
        if eval_metric is not None:
            logger.debug("[%s/%s] step %d lr=%.3g loss=%.4f eval=%.4f", self.run, self.phase, step, lr, train_loss, eval_metric)
        return record

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self) -> "TrainLogger":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def read_train_log(path: Union[str, Path]) -> List[TrainRecord]:
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(TrainRecord.model_validate_json(line))
    return records
