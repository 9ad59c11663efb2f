"""
Training Log View - Live view of JSONL training logs
"""

import json
from pathlib import Path
from typing import Dict, List, Optional, Union

from textual.widgets import Log

from ..core.models import TrainRecord


class LogTail:
    """
    Reads the lines appended to a JSONL training log since the last call.
    A partial trailing line is kept back until it is complete.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._offset = 0
        self._pending = ""

    def read_new(self) -> List[TrainRecord]:
        if not self.path.is_file():
            return []
        with self.path.open("rb") as fh:
            fh.seek(self._offset)
            chunk = fh.read().decode("utf-8", errors="replace")
            self._offset = fh.tell()
        text = self._pending + chunk
        lines = text.split("\n")
        self._pending = lines.pop()
        records = []
        for line in lines:
            if not line.strip():
                continue
            try:
                records.append(TrainRecord.model_validate(json.loads(line)))
            except (ValueError, TypeError):
                continue
        return records


def format_record(record: TrainRecord) -> str:
    where = "/".join(part for part in (record.run, record.phase) if part) or "-"
    line = f"[{where}] step {record.step:>5}  lr {record.lr:.3e}  loss {record.train_loss:.4f}"
    if record.eval_metric is not None:
        line += f"  eval {record.eval_metric:.4f}"
    return line


class TrainLogView(Log):
    """Log widget for training records from files and the record queue"""

    def __init__(self, paths: Optional[List[Path]] = None, **kwargs):
        super().__init__(**kwargs)
        self.border_title = "Training"
        self._tails: Dict[Path, LogTail] = {Path(p): LogTail(p) for p in paths or []}
        self.best: Dict[str, float] = {}

    def follow(self, path: Union[str, Path]) -> None:
        path = Path(path)
        if path not in self._tails:
            self._tails[path] = LogTail(path)

    def poll(self) -> int:
        """Reads new lines from every followed file."""
        count = 0
        for tail in self._tails.values():
            for record in tail.read_new():
                self.add_record(record)
                count += 1
        return count

    def add_record(self, record: TrainRecord) -> None:
        if record.eval_metric is not None:
            key = f"{record.run}/{record.phase}"
            self.best[key] = record.eval_metric
        self.write_line(format_record(record))
