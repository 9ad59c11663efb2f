"""
Run Table - Registered runs as reactive state
"""

from typing import Any, Dict, List

from rich.text import Text
from textual.app import ComposeResult
from textual.containers import Vertical
from textual.message import Message
from textual.reactive import reactive
from textual.widgets import DataTable, Label

STATUS_STYLES = {"ok": "green", "running": "yellow"}

RESULT_DISPLAY_COLUMNS = ["method", "rank_language", "rank_task", "k_language", "epsilon", "target", "metric", "score"]


def status_text(status: str) -> Text:
    style = STATUS_STYLES.get(status, "red" if status.startswith("failed") else "dim")
    return Text(status, style=style)


class RunTable(Vertical):
    """Runs from the registry plus the result rows of the selected run"""

    runs: reactive[List[Dict[str, Any]]] = reactive(list, always_update=True)
    results: reactive[List[Dict[str, Any]]] = reactive(list, always_update=True)

    class RunSelected(Message):
        def __init__(self, run_id: str) -> None:
            self.run_id = run_id
            super().__init__()

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self.border_title = "Runs"
        self._mounted = False

    def compose(self) -> ComposeResult:
        yield DataTable(id="runs-table")
        yield Label("Results", classes="section-title")
        yield DataTable(id="results-table")

    def on_mount(self) -> None:
        self._mounted = True
        runs = self.query_one("#runs-table", DataTable)
        runs.cursor_type = "row"
        runs.zebra_stripes = True
        runs.add_columns("Run", "Command", "Started", "Status")
        results = self.query_one("#results-table", DataTable)
        results.zebra_stripes = True
        results.add_columns(*RESULT_DISPLAY_COLUMNS)
        self._update_runs()

    def watch_runs(self, old: List[Dict[str, Any]], new: List[Dict[str, Any]]) -> None:
        if self._mounted:
            self._update_runs()

    def watch_results(self, old: List[Dict[str, Any]], new: List[Dict[str, Any]]) -> None:
        if self._mounted:
            self._update_results()

    def on_data_table_row_selected(self, event: DataTable.RowSelected) -> None:
        if event.data_table.id == "runs-table" and event.row_key.value is not None:
            self.post_message(self.RunSelected(str(event.row_key.value)))

    def _update_runs(self) -> None:
        table = self.query_one("#runs-table", DataTable)
        table.clear()
        for run in self.runs:
            table.add_row(
                run["id"][:8],
                run.get("command") or "-",
                (run.get("start_time") or "")[:19],
                status_text(run.get("status") or ""),
                key=run["id"],
            )

    def _update_results(self) -> None:
        table = self.query_one("#results-table", DataTable)
        table.clear()
        for row in self.results:
            cells = []
            for column in RESULT_DISPLAY_COLUMNS:
                value = row.get(column, "")
                cells.append(f"{value:.4f}" if isinstance(value, float) and column == "score" else str(value))
            table.add_row(*cells)
