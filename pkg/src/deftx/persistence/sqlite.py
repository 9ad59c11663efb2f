"""
Run Registry

Stores CLI runs and their result rows in a SQLite database so the monitor
can show past runs.
"""

import json
import logging
import sqlite3
from datetime import datetime
from typing import Any, Dict, Iterable, List, Mapping, Optional

from ..config import DeftConfig, get_config
from ..core.models import RunManifest

logger = logging.getLogger(__name__)


class RunRegistry:
    def __init__(self, config: Optional[DeftConfig] = None, db_path: Optional[str] = None):
        self.config = config or get_config()
        self.db_path = db_path or self.config.db_path
        self.enabled = self.config.enable_registry
        logger.debug("run registry at %s (enabled=%s)", self.db_path, self.enabled)
        if self.enabled:
            self._init_db()

    def _connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        return conn

    def _init_db(self) -> None:
        """Creates the tables"""
        try:
            with self._connect() as conn:
                conn.execute('''CREATE TABLE IF NOT EXISTS runs
                                (id TEXT PRIMARY KEY, command TEXT, start_time TIMESTAMP,
                                 status TEXT, manifest JSON)''')
                conn.execute('''CREATE TABLE IF NOT EXISTS results
                                (id INTEGER PRIMARY KEY AUTOINCREMENT, run_id TEXT, data JSON,
                                 FOREIGN KEY(run_id) REFERENCES runs(id))''')
            conn.close()
        except sqlite3.Error as e:
            logger.warning("run registry disabled, cannot initialise %s: %s", self.db_path, e)
            self.enabled = False

    def start_run(self, run_id: str, command: str) -> None:
        if not self.enabled:
            return
        try:
            with self._connect() as conn:
                conn.execute(
                    "INSERT OR REPLACE INTO runs (id, command, start_time, status) VALUES (?, ?, ?, ?)",
                    (run_id, command, datetime.now().isoformat(), "running"),
                )
            conn.close()
        except sqlite3.Error as e:
            logger.warning("could not register run %s: %s", run_id, e)

    def finish_run(self, manifest: RunManifest, status: str = "ok") -> None:
        if not self.enabled:
            return
        try:
            with self._connect() as conn:
                conn.execute(
                    "UPDATE runs SET status = ?, manifest = ? WHERE id = ?",
                    (status, manifest.model_dump_json(), manifest.run_id),
                )
            conn.close()
        except sqlite3.Error as e:
            logger.warning("could not store manifest of run %s: %s", manifest.run_id, e)

    def fail_run(self, run_id: str, message: str) -> None:
        if not self.enabled:
            return
        try:
            with self._connect() as conn:
                conn.execute("UPDATE runs SET status = ? WHERE id = ?", (f"failed: {message}", run_id))
            conn.close()
        except sqlite3.Error:
            pass

    def save_results(self, run_id: str, rows: Iterable[Mapping[str, Any]]) -> None:
        if not self.enabled:
            return
        try:
            with self._connect() as conn:
                conn.executemany(
                    "INSERT INTO results (run_id, data) VALUES (?, ?)",
                    [(run_id, json.dumps(dict(row), default=str)) for row in rows],
                )
            conn.close()
        except sqlite3.Error as e:
            logger.warning("could not store results of run %s: %s", run_id, e)

    def get_runs(self, limit: int = 100) -> List[Dict[str, Any]]:
        """All runs, newest first"""
        if not self.enabled:
            return []
        try:
            with self._connect() as conn:
                rows = conn.execute(
                    "SELECT id, command, start_time, status FROM runs ORDER BY start_time DESC LIMIT ?", (limit,)
                ).fetchall()
            conn.close()
            return [dict(row) for row in rows]
        except sqlite3.Error:
            return []

    def get_manifest(self, run_id: str) -> Optional[RunManifest]:
        if not self.enabled:
            return None
        try:
            with self._connect() as conn:
                row = conn.execute("SELECT manifest FROM runs WHERE id = ?", (run_id,)).fetchone()
            conn.close()
        except sqlite3.Error:
            return None
        if row is None or row["manifest"] is None:
            return None
        return RunManifest.model_validate_json(row["manifest"])

    def get_results(self, run_id: str) -> List[Dict[str, Any]]:
        if not self.enabled:
            return []
        try:
            with self._connect() as conn:
                rows = conn.execute("SELECT data FROM results WHERE run_id = ? ORDER BY id", (run_id,)).fetchall()
            conn.close()
            return [json.loads(row["data"]) for row in rows]
        except sqlite3.Error:
            return []

    def delete_run(self, run_id: str) -> None:
        """Deletes a run and its results"""
        if not self.enabled:
            return
        try:
            with self._connect() as conn:
                conn.execute("DELETE FROM results WHERE run_id = ?", (run_id,))
                conn.execute("DELETE FROM runs WHERE id = ?", (run_id,))
            conn.close()
        except sqlite3.Error as e:
            logger.warning("could not delete run %s: %s", run_id, e)


# --- LAZY LOADING PATTERN ---
# built on first use, after the config is loaded

_registry_instance: Optional[RunRegistry] = None

def get_registry() -> RunRegistry:
    global _registry_instance
    if _registry_instance is None:
        _registry_instance = RunRegistry()
    return _registry_instance

def reset_registry() -> None:
    global _registry_instance
    _registry_instance = None
