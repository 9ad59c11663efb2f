"""
Monitor Module

Textual view over the run registry and training logs.
"""

from .app import MonitorApp
from .run_table import RunTable
from .train_log_view import LogTail, TrainLogView, format_record

__all__ = [
    "MonitorApp",
    "RunTable",
    "TrainLogView",
    "LogTail",
    "format_record",
]
