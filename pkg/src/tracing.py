"""Timing spans recorded into the audit log.

`span(name, metadata)` measures wall-clock time of the enclosed block and logs
a `span` event with its status. Exceptions are recorded and re-raised.
"""
from __future__ import annotations
import contextlib
import time

from .audit import log_event


@contextlib.contextmanager
def span(name: str, metadata: dict | None = None):
    start = time.perf_counter()
    status = "ok"
    error: str | None = None
    try:
        yield
    except Exception as e:
        status = "error"
        error = f"{type(e).__name__}: {e}"
        raise
    finally:
        payload = {"name": name, "seconds": time.perf_counter() - start, "status": status, **(metadata or {})}
        if error:
            payload["error"] = error
        log_event("span", payload)
