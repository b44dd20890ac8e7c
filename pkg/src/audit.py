"""Audit logging for training, inference and evaluation events.

Events live in a module-level list and, once `configure(run_dir)` is called,
are appended as JSON lines to <run_dir>/events.jsonl. Per-step scalar losses
also go to <run_dir>/losses.csv (header `step,kind,<terms>`).
"""
from __future__ import annotations
import json, time
from pathlib import Path
from typing import Dict, Any, List, Optional

import pandas as pd

_EVENTS: List[Dict[str, Any]] = []
_RUN_DIR: Optional[Path] = None


def configure(run_dir: str | Path | None) -> None:
    """Point the session at a run directory (None keeps events in memory only)."""
    global _RUN_DIR
    _RUN_DIR = Path(run_dir) if run_dir is not None else None
    if _RUN_DIR is not None:
        _RUN_DIR.mkdir(parents=True, exist_ok=True)


def reset() -> None:
    _EVENTS.clear()
    configure(None)


def _append(entry: Dict[str, Any]):
    _EVENTS.append(entry)
    if _RUN_DIR is not None:
        with (_RUN_DIR / "events.jsonl").open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, ensure_ascii=False, default=str) + "\n")


def log_event(event: str, data: Dict[str, Any] | None = None):
    """Log a generic event with its data payload."""
    _append({"ts": time.time(), "event": event, **(data or {})})


def log_step(step: int, losses: Dict[str, float], kind: str = "manipulation"):
    """Log one optimizer step: an event plus a row in losses.csv."""
    _append({"ts": time.time(), "event": "train_step", "step": step, "kind": kind, "losses": dict(losses)})
    if _RUN_DIR is None:
        return
    path = _RUN_DIR / "losses.csv"
    row = pd.DataFrame([{"step": step, "kind": kind, **losses}])
    if path.exists():
        columns = list(pd.read_csv(path, nrows=0).columns)
        row = row.reindex(columns=columns)
        row.to_csv(path, mode="a", header=False, index=False)
    else:
        row.to_csv(path, index=False)


def _stale(entry: Dict[str, Any], step: int) -> bool:
    if "step" not in entry:
        return False
    if entry.get("event") == "checkpoint_saved":
        return entry["step"] > step
    return entry["step"] >= step


def rewind(step: int) -> None:
    """Drop on-disk records of steps >= `step` so a restarted or resumed run rewrites them once.

    losses.csv keeps rows with a smaller step (the file is removed when none
    remain); events.jsonl drops step-tagged entries at or past `step`, except
    the checkpoint the run resumes from. In-memory events are untouched.
    """
    if _RUN_DIR is None:
        return
    losses = _RUN_DIR / "losses.csv"
    if losses.exists():
        table = pd.read_csv(losses)
        kept = table[table["step"] < step]
        if kept.empty:
            losses.unlink()
        elif len(kept) < len(table):
            kept.to_csv(losses, index=False)
    events = _RUN_DIR / "events.jsonl"
    if events.exists():
        entries = [json.loads(line) for line in events.read_text(encoding="utf-8").splitlines() if line.strip()]
        kept_lines = [json.dumps(e, ensure_ascii=False, default=str) for e in entries if not _stale(e, step)]
        events.write_text("".join(line + "\n" for line in kept_lines), encoding="utf-8")


def read_losses(run_dir: str | Path) -> pd.DataFrame:
    return pd.read_csv(Path(run_dir) / "losses.csv")


def get_events() -> List[Dict[str, Any]]:
    return list(_EVENTS)
