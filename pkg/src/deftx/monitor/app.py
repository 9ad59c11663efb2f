"""
Run Monitor - Textual app over the run registry and training logs
"""

from pathlib import Path
from queue import Empty, Queue
from typing import List, Optional

from textual.app import App, ComposeResult
from textual.binding import Binding
from textual.widgets import Footer, Header, TabbedContent, TabPane

from ..core.models import TrainRecord
from ..persistence import RunRegistry, get_registry
from .run_table import RunTable
from .train_log_view import TrainLogView


class MonitorApp(App):
    """
    Shows registered runs with their result rows and follows training logs.
    """

    CSS = """
    Screen {
        layout: vertical;
    }

    .section-title {
        text-align: center;
        text-style: bold;
        background: $accent;
        color: $text;
        width: 100%;
    }

    #runs-table {
        height: 1fr;
    }

    #results-table {
        height: 1fr;
    }
    """

    BINDINGS = [
        Binding("q", "quit", "Quit"),
        Binding("r", "refresh", "Refresh"),
    ]

    TITLE = "deftx monitor"

    def __init__(
        self,
        registry: Optional[RunRegistry] = None,
        log_paths: Optional[List[Path]] = None,
        record_queue: Optional[Queue] = None,
        poll_interval: float = 1.0,
    ):
        super().__init__()
        self.registry = registry or get_registry()
        self.log_paths = [Path(p) for p in log_paths or []]
        self.record_queue = record_queue
        self.poll_interval = poll_interval
        self.finished_code: Optional[int] = None

    def compose(self) -> ComposeResult:
        yield Header()
        with TabbedContent(id="tabs"):
            with TabPane("Runs", id="runs-tab"):
                yield RunTable(id="run-table")
            with TabPane("Training", id="training-tab"):
                yield TrainLogView(self.log_paths, id="train-log")
        yield Footer()

    def on_mount(self) -> None:
        self.load_runs()
        if self.log_paths or self.record_queue is not None:
            self.query_one("#tabs", TabbedContent).active = "training-tab"
        self.set_interval(self.poll_interval, self._poll_logs)
        if self.record_queue is not None:
            self.set_interval(0.1, self._drain_queue)

    def load_runs(self) -> None:
        self.query_one("#run-table", RunTable).runs = self.registry.get_runs()

    def on_run_table_run_selected(self, message: RunTable.RunSelected) -> None:
        table = self.query_one("#run-table", RunTable)
        table.results = self.registry.get_results(message.run_id)
        manifest = self.registry.get_manifest(message.run_id)
        if manifest is not None:
            view = self.query_one("#train-log", TrainLogView)
            for name, path in manifest.outputs.items():
                if name.startswith("train_log"):
                    view.follow(path)
            self.notify(f"{manifest.command}: {len(manifest.outputs)} outputs")

    def _poll_logs(self) -> None:
        self.query_one("#train-log", TrainLogView).poll()

    def _drain_queue(self) -> None:
        view = self.query_one("#train-log", TrainLogView)
        while True:
            try:
                item = self.record_queue.get_nowait()
            except Empty:
                break
            if item.get("type") == "train_record":
                view.add_record(TrainRecord.model_validate(item["data"]))
            elif item.get("type") == "finished":
                self.finished_code = int(item["data"]["code"])
                self.load_runs()
                self.notify(f"run finished with exit code {self.finished_code}")

    def action_refresh(self) -> None:
        self.load_runs()
