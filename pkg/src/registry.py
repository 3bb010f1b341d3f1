"""
Run registry: every train/refine/eval run and the metrics it produced.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Tuple

from .db import get_db, init_db

log = logging.getLogger(__name__)

MetricRow = Tuple[Optional[int], str, Optional[float]]


@dataclass
class RunRecord:
    """Maps to the 'runs' table."""
    command: str
    mode: Optional[str] = None
    dataset_hash: Optional[str] = None
    config: Dict[str, Any] = field(default_factory=dict)
    output_dir: Optional[str] = None
    created_at: int = field(default_factory=lambda: int(time.time()))
    run_id: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.config, str):
            self.config = json.loads(self.config) if self.config else {}


class RunRegistry:

    def __init__(self, db_path):
        self.db_path = str(db_path)
        self._ready = False

    async def _ensure(self):
        if not self._ready:
            await init_db(self.db_path)
            self._ready = True

    async def record_run(self, run: RunRecord) -> int:
        """Insert a run and return its id."""
        await self._ensure()
        async with get_db(self.db_path) as db:
            async with db.execute(
                """
                INSERT INTO runs (command, mode, dataset_hash, config, output_dir, created_at)
                VALUES (?, ?, ?, ?, ?, ?)
                """,
                (run.command, run.mode, run.dataset_hash, json.dumps(run.config, sort_keys=True), run.output_dir, run.created_at),
            ) as cursor:
                run.run_id = cursor.lastrowid
        log.debug(f"Registered run {run.run_id} ({run.command})")
        return run.run_id

    async def record_metrics(self, run_id: int, rows: Iterable[MetricRow]):
        await self._ensure()
        rows = [(run_id, it, name, None if value is None else float(value)) for it, name, value in rows]
        if not rows:
            return
        async with get_db(self.db_path) as db:
            await db.executemany("INSERT INTO metrics (run_id, iteration, name, value) VALUES (?, ?, ?, ?)", rows)

    async def get_run(self, run_id: int) -> Optional[RunRecord]:
        await self._ensure()
        async with get_db(self.db_path) as db:
            async with db.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,)) as cursor:
                row = await cursor.fetchone()
        return RunRecord(**dict(row)) if row else None

    async def list_runs(self, command: Optional[str] = None) -> List[RunRecord]:
        await self._ensure()
        sql = "SELECT * FROM runs"
        params: tuple = ()
        if command:
            sql += " WHERE command = ?"
            params = (command,)
        async with get_db(self.db_path) as db:
            async with db.execute(sql + " ORDER BY run_id", params) as cursor:
                rows = await cursor.fetchall()
        return [RunRecord(**dict(r)) for r in rows]

    async def metrics(self, run_id: int) -> List[MetricRow]:
        await self._ensure()
        async with get_db(self.db_path) as db:
            async with db.execute(
                "SELECT iteration, name, value FROM metrics WHERE run_id = ? ORDER BY rowid", (run_id,)
            ) as cursor:
                rows = await cursor.fetchall()
        return [(r["iteration"], r["name"], r["value"]) for r in rows]

    async def report(self, command: Optional[str] = None, run_id: Optional[int] = None) -> List[Dict[str, Any]]:
        """Flat rows of runs with their metrics, ordered by run then insertion."""
        if run_id is not None:
            run = await self.get_run(run_id)
            runs = [run] if run and (command is None or run.command == command) else []
        else:
            runs = await self.list_runs(command)
        rows = []
        for run in runs:
            for iteration, name, value in await self.metrics(run.run_id):
                rows.append({
                    "run_id": run.run_id, "command": run.command, "mode": run.mode,
                    "dataset_hash": run.dataset_hash, "output_dir": run.output_dir, "created_at": run.created_at,
                    "iteration": iteration, "name": name, "value": value,
                })
        return rows

    async def reset(self):
        """Drop every recorded run and metric."""
        await init_db(self.db_path, force=True)
        self._ready = True
        log.info(f"Cleared run registry {self.db_path}")
