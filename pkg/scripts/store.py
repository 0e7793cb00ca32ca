"""
SQLite run history for PCD forecasting experiments
"""
import os
import sqlite3
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

from settings import DEFAULT_STORAGE_PATH, storage_dir


@dataclass
class RunRecord:
    dataset: str
    mode: str
    composition: str
    mask_kind: str
    mask_variant: str
    metric: str
    horizon: int
    lookback: int
    seed: int
    mse: float
    mae: float
    cd_ratio: Optional[float] = None
    alpha: Optional[float] = None
    beta: Optional[float] = None
    r_abs: Optional[float] = None
    channels: Optional[int] = None


class RunStore:
    def __init__(self, storage_path: str = DEFAULT_STORAGE_PATH):
        self.storage_path = os.path.expanduser(storage_path)
        os.makedirs(self.storage_path, exist_ok=True)
        self.db_path = os.path.join(self.storage_path, "runs.db")
        self._init_db()

    def _init_db(self):
        """Initialize database schema"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                dataset TEXT NOT NULL,
                mode TEXT NOT NULL,
                composition TEXT NOT NULL,
                mask_kind TEXT NOT NULL,
                mask_variant TEXT NOT NULL,
                metric TEXT NOT NULL,
                horizon INTEGER NOT NULL,
                lookback INTEGER NOT NULL,
                seed INTEGER NOT NULL,
                mse REAL NOT NULL,
                mae REAL NOT NULL,
                cd_ratio REAL,
                alpha REAL,
                beta REAL,
                r_abs REAL,
                channels INTEGER,
                UNIQUE(dataset, mode, composition, mask_kind, mask_variant, metric, horizon, seed)
            )
        """)

        cursor.execute("""
            CREATE INDEX IF NOT EXISTS idx_runs_dataset_mode
            ON runs(dataset, mode)
        """)

        conn.commit()
        conn.close()

    def add_run(self, record: RunRecord):
        """Insert a run; a rerun of the same configuration replaces its metrics"""
        row = asdict(record)
        columns = list(row)
        updates = ",\n                    ".join(
            f"{c} = excluded.{c}" for c in ("lookback", "mse", "mae", "cd_ratio", "alpha",
                                             "beta", "r_abs", "channels"))

        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute(f"""
            INSERT INTO runs ({", ".join(columns)})
            VALUES ({", ".join("?" for _ in columns)})
            ON CONFLICT(dataset, mode, composition, mask_kind, mask_variant, metric, horizon, seed)
            DO UPDATE SET
                    {updates}
        """, [row[c] for c in columns])
        conn.commit()
        conn.close()

    def clear_runs(self, dataset: Optional[str] = None):
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        if dataset:
            cursor.execute("DELETE FROM runs WHERE dataset = ?", (dataset,))
        else:
            cursor.execute("DELETE FROM runs")

        conn.commit()
        conn.close()

    def get_runs(self, dataset: Optional[str] = None, mode: Optional[str] = None) -> List[Dict]:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        cursor = conn.cursor()

        query = """
            SELECT dataset, mode, composition, mask_kind, mask_variant, metric, horizon,
                   lookback, seed, mse, mae, cd_ratio, alpha, beta, r_abs, channels
            FROM runs
            WHERE 1 = 1
        """
        params = []

        if dataset:
            query += " AND dataset = ?"
            params.append(dataset)
        if mode:
            query += " AND mode = ?"
            params.append(mode)

        query += " ORDER BY dataset, mode, horizon, composition, mask_kind, mask_variant, metric, seed"

        cursor.execute(query, params)
        rows = cursor.fetchall()
        conn.close()

        return [dict(row) for row in rows]

    def get_cd_gain(self, dataset: Optional[str] = None) -> List[Dict]:
        """
        Relative MSE gain of every CD/PCD run over the CI run with the same
        dataset, horizon and seed: (ci_mse - mse) / ci_mse
        """
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        cursor = conn.cursor()

        query = """
            SELECT r.dataset, r.horizon, r.seed, r.mode, r.composition, r.mask_kind,
                   ci.mse AS ci_mse, r.mse AS other_mse,
                   (ci.mse - r.mse) / ci.mse AS gain,
                   r.cd_ratio, r.r_abs
            FROM runs r
            JOIN runs ci
              ON ci.dataset = r.dataset AND ci.horizon = r.horizon AND ci.seed = r.seed
             AND ci.mode = 'ci'
            WHERE r.mode != 'ci' AND ci.mse > 0
        """
        params = []

        if dataset:
            query += " AND r.dataset = ?"
            params.append(dataset)

        query += " ORDER BY r.dataset, r.horizon, r.seed, r.mode, r.composition, r.mask_kind"

        cursor.execute(query, params)
        rows = cursor.fetchall()
        conn.close()

        return [dict(row) for row in rows]


def get_store(config: Optional[Dict] = None, override: Optional[str] = None) -> RunStore:
    """Get the run store under the configured storage directory"""
    return RunStore(storage_dir(config or {}, override))
