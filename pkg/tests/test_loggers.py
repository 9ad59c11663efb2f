import io
import json
import logging
from queue import Queue

import pytest
from rich.console import Console
from rich.logging import RichHandler

from deftx.config import DeftConfig, LogLevel
from deftx.loggers import TrainLogger, init_record_queue, read_train_log, setup_logging


@pytest.fixture
def root_handlers():
    root = logging.getLogger()
    saved, level = root.handlers[:], root.level
    yield root
    for handler in root.handlers:
        if handler not in saved:
            handler.close()
    root.handlers = saved
    root.setLevel(level)
    logging.captureWarnings(False)


@pytest.fixture
def record_queue():
    queue = Queue()
    init_record_queue(queue)
    yield queue
    init_record_queue(None)


def test_train_logger_writes_jsonl(tmp_path):
    path = tmp_path / "logs" / "train.jsonl"
    with TrainLogger(path, run="r1", phase="language") as log:
        log.log(1, 1e-3, 2.5)
        log.log(2, 5e-4, 2.0, eval_metric=1.9)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    first = json.loads(lines[0])
    assert first["step"] == 1 and first["eval_metric"] is None
    assert first["run"] == "r1" and first["phase"] == "language"
    assert [r.train_loss for r in read_train_log(path)] == [2.5, 2.0]


def test_child_shares_file_and_records(tmp_path):
    path = tmp_path / "train.jsonl"
    parent = TrainLogger(path, run="r1", phase="pretrain")
    child = parent.child("task")
    parent.log(1, 1e-3, 3.0)
    child.log(1, 1e-3, 1.0, eval_metric=0.5)
    parent.close()
    assert [r.phase for r in parent.records] == ["pretrain", "task"]
    assert child.records is parent.records
    assert [r.phase for r in read_train_log(path)] == ["pretrain", "task"]


def test_logger_without_path_keeps_records():
    log = TrainLogger(run="mem")
    record = log.log(3, 0.0, 0.25)
    assert log.records == [record]
    log.close()


def test_records_forwarded_to_queue(record_queue):
    TrainLogger(run="r2", phase="language").log(4, 1e-3, 1.5, eval_metric=1.4)
    item = record_queue.get_nowait()
    assert item["type"] == "train_record"
    assert item["data"]["step"] == 4 and item["data"]["eval_metric"] == 1.4


def test_setup_logging_console_and_file(root_handlers, tmp_path):
    log_file = tmp_path / "deftx.log"
    config = DeftConfig(log_level=LogLevel.WARNING, log_to_file=True, log_file_path=str(log_file), workers=1)
    setup_logging(config, console=Console(file=io.StringIO()))

    handlers = root_handlers.handlers
    assert isinstance(handlers[0], RichHandler) and handlers[0].level == logging.WARNING
    assert isinstance(handlers[1], logging.FileHandler) and handlers[1].level == logging.DEBUG
    assert root_handlers.level == logging.DEBUG

    logging.getLogger("deftx.test").debug("only in file")
    handlers[1].flush()
    assert "only in file" in log_file.read_text()


def test_setup_logging_console_only(root_handlers, tmp_path):
    setup_logging(DeftConfig(log_level=LogLevel.ERROR, workers=1), console=Console(file=io.StringIO()))
    assert len(root_handlers.handlers) == 1
    assert root_handlers.level == logging.ERROR
