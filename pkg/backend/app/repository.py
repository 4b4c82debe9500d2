import asyncio
import csv
import json
import os
import sqlite3
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from PIL import Image

# Database configuration
DB_PATH = os.environ.get("HRF_RUNS_DB_PATH", "data/runs.db")
executor = ThreadPoolExecutor(max_workers=2)

_SCHEMA = """
    CREATE TABLE IF NOT EXISTS runs (
        run_id TEXT NOT NULL,
        stage TEXT NOT NULL,
        method TEXT NOT NULL,
        preset TEXT,
        seed INTEGER NOT NULL,
        config_hash TEXT NOT NULL,
        out_dir TEXT NOT NULL,
        created_at TEXT NOT NULL,
        metrics TEXT,
        PRIMARY KEY (run_id, stage)
    )
"""


def now_iso_utc() -> str:
    return datetime.utcnow().isoformat(timespec="milliseconds") + "Z"


def _open_conn(create: bool = False) -> sqlite3.Connection:
    if not os.path.exists(DB_PATH):
        if not create:
            raise FileNotFoundError(f"Run index not found at {DB_PATH}. Run a pipeline stage first")
        Path(DB_PATH).parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(DB_PATH, check_same_thread=False)
    conn.row_factory = sqlite3.Row
    conn.execute(_SCHEMA)
    return conn


def _row_to_dict(row: sqlite3.Row) -> Dict[str, Any]:
    out = dict(row)
    out["metrics"] = json.loads(out["metrics"]) if out.get("metrics") else None
    out["preset"] = out.get("preset") or ""
    return out


def record_run(run_id: str, stage: str, method: str, preset: Optional[str], seed: int, config_hash: str,
               out_dir: str, metrics: Optional[Dict[str, float]] = None) -> None:
    conn = _open_conn(create=True)
    try:
        conn.execute(
            """
            INSERT OR REPLACE INTO runs (run_id, stage, method, preset, seed, config_hash, out_dir, created_at, metrics)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
            """,
            (run_id, stage, method, preset or "", seed, config_hash, out_dir, now_iso_utc(),
             json.dumps(metrics) if metrics is not None else None),
        )
        conn.commit()
    finally:
        conn.close()


def count_runs(method: Optional[str] = None) -> int:
    if not os.path.exists(DB_PATH):
        return 0
    conn = _open_conn()
    try:
        if method:
            return conn.execute("SELECT COUNT(*) AS count FROM runs WHERE method = ?", (method,)).fetchone()["count"]
        return conn.execute("SELECT COUNT(*) AS count FROM runs").fetchone()["count"]
    finally:
        conn.close()


def list_runs(offset: int = 0, limit: int = 50, method: Optional[str] = None) -> List[Dict[str, Any]]:
    if not os.path.exists(DB_PATH):
        return []
    conn = _open_conn()
    try:
        where, params = ("WHERE method = ?", (method,)) if method else ("", ())
        rows = conn.execute(
            f"SELECT * FROM runs {where} ORDER BY created_at DESC, run_id LIMIT ? OFFSET ?",
            params + (limit, offset),
        ).fetchall()
        return [_row_to_dict(r) for r in rows]
    finally:
        conn.close()


def get_run(run_id: str) -> List[Dict[str, Any]]:
    """All recorded stages of one run, oldest first."""
    if not os.path.exists(DB_PATH):
        return []
    conn = _open_conn()
    try:
        rows = conn.execute("SELECT * FROM runs WHERE run_id = ? ORDER BY created_at", (run_id,)).fetchall()
        return [_row_to_dict(r) for r in rows]
    finally:
        conn.close()


async def run_db(fn, *args, **kwargs):
    loop = asyncio.get_running_loop()
    return await loop.run_in_executor(executor, lambda: fn(*args, **kwargs))


# Run directory files

@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.txt"

    @property
    def config(self) -> Path:
        return self.root / "config.ini"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics"

    @property
    def samples(self) -> Path:
        return self.root / "samples"

    @property
    def inject(self) -> Path:
        return self.root / "inject"

    @property
    def denoiser(self) -> Path:
        return self.checkpoints / "denoiser.bin"

    @property
    def finetuned(self) -> Path:
        return self.checkpoints / "finetuned.bin"

    @property
    def embedder(self) -> Path:
        return self.checkpoints / "embedder.bin"

    @property
    def scorer(self) -> Path:
        return self.checkpoints / "scorer.bin"

    def ensure(self) -> "RunPaths":
        for d in (self.checkpoints, self.logs, self.metrics, self.samples):
            d.mkdir(parents=True, exist_ok=True)
        return self


def format_value(value: Any) -> str:
    """Round-trippable text: floats with 17 significant digits, everything else via str."""
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])
    return path


def append_csv(path: Union[str, Path], header: Sequence[str], row: Sequence[Any]) -> Path:
    path = Path(path)
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(header)
        writer.writerow([format_value(v) for v in row])
    return path


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV not found at {path}")
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_samples_csv(samples: np.ndarray, path: Union[str, Path]) -> Path:
    samples = np.atleast_2d(samples)
    return write_csv(path, [f"x{i}" for i in range(samples.shape[1])], samples.tolist())


def read_samples_csv(path: Union[str, Path]) -> np.ndarray:
    return np.array([[float(v) for v in row.values()] for row in read_csv(path)], dtype=np.float64)


def write_manifest(path: Union[str, Path], entries: Dict[str, Any]) -> Path:
    """`key: value` lines, in insertion order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}: {format_value(v)}\n" for k, v in entries.items()))
    return path


def read_manifest(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found at {path}")
    entries = {}
    for line in path.read_text().splitlines():
        if ": " in line:
            key, value = line.split(": ", 1)
            entries[key] = value
    return entries


def write_pgm_sheet(images: np.ndarray, shape: Sequence[int], path: Union[str, Path], columns: int = 8,
                    pad: int = 1) -> Path:
    """Tile samples in [-1, 1] into one binary graymap (P5)."""
    h, w = shape
    images = np.clip((np.atleast_2d(images).reshape(-1, h, w) + 1.0) / 2.0, 0.0, 1.0)
    n = images.shape[0]
    rows = int(np.ceil(n / columns))
    sheet = np.zeros((rows * (h + pad) + pad, columns * (w + pad) + pad))
    for k, img in enumerate(images):
        r, c = divmod(k, columns)
        top, left = pad + r * (h + pad), pad + c * (w + pad)
        sheet[top:top + h, left:left + w] = img
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(sheet * 255.0).astype(np.uint8), mode="L").save(path, format="PPM")
    return path
