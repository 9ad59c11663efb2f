from .setup import setup_logging
from .train_logger import TrainLogger, init_record_queue, read_train_log

__all__ = ["setup_logging", "TrainLogger", "init_record_queue", "read_train_log"]
