"""Checkpoint persistence: JSON manifest + raw little-endian tensor payload.

Layout of one checkpoint directory:
    manifest.json   config, config hash, step, counters, tensor table, object skeleton,
                    SHA-256 of the payload
    payload.bin     tensors back to back, little-endian, C order

The skeleton mirrors the saved object (network/optimizer state dicts, rng
state) with tensors replaced by {"__tensor__": name}; dicts with non-string
keys and tuples get their own markers so optimizer state round-trips exactly.

Also the run-directory lock: one training process per run directory.
"""
from __future__ import annotations
import contextlib
import dataclasses
import hashlib
import json
import os
import shutil
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_fixed

from .config import Config, config_from_dict, config_hash
from .guardrails import CorruptionError, RunLockedError

MANIFEST = "manifest.json"
PAYLOAD = "payload.bin"
FORMAT_VERSION = 1


def _numpy_dtype(dtype: torch.dtype) -> np.dtype:
    return torch.empty(0, dtype=dtype).numpy().dtype.newbyteorder("<")


def _torch_dtype(name: str) -> torch.dtype:
    return getattr(torch, name.replace("torch.", ""))


class _Packer:
    def __init__(self):
        self.table: Dict[str, Dict[str, Any]] = {}
        self.chunks: List[bytes] = []
        self.offset = 0

    def pack(self, obj: Any, path: str) -> Any:
        if isinstance(obj, torch.Tensor):
            t = obj.detach().cpu().contiguous()
            data = t.numpy().astype(_numpy_dtype(t.dtype), copy=False).tobytes(order="C")
            self.table[path] = {"dtype": str(t.dtype), "shape": list(t.shape), "offset": self.offset,
                                "nbytes": len(data)}
            self.chunks.append(data)
            self.offset += len(data)
            return {"__tensor__": path}
        if isinstance(obj, dict):
            if all(isinstance(k, str) for k in obj):
                return {k: self.pack(v, f"{path}/{k}") for k, v in obj.items()}
            return {"__dict__": [[k, self.pack(v, f"{path}/{k}")] for k, v in obj.items()]}
        if isinstance(obj, tuple):
            return {"__tuple__": [self.pack(v, f"{path}/{i}") for i, v in enumerate(obj)]}
        if isinstance(obj, list):
            return [self.pack(v, f"{path}/{i}") for i, v in enumerate(obj)]
        return obj


def _unpack(obj: Any, table: Dict[str, Dict[str, Any]], payload: bytes) -> Any:
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            info = table[obj["__tensor__"]]
            dtype = _torch_dtype(info["dtype"])
            count = int(np.prod(info["shape"], dtype=np.int64))
            arr = np.frombuffer(payload, dtype=_numpy_dtype(dtype), count=count, offset=info["offset"])
            return torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).reshape(info["shape"]).clone()
        if "__dict__" in obj:
            return {k: _unpack(v, table, payload) for k, v in obj["__dict__"]}
        if "__tuple__" in obj:
            return tuple(_unpack(v, table, payload) for v in obj["__tuple__"])
        return {k: _unpack(v, table, payload) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unpack(v, table, payload) for v in obj]
    return obj


def checkpoint_dir(run_dir: str | Path, step: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"step_{step:08d}"


def save_checkpoint(run_dir: str | Path, config: Config, step: int, counters: Dict[str, int],
                    objects: Dict[str, Any]) -> Path:
    """Write a checkpoint for `step` and point `latest` at it; returns its directory."""
    packer = _Packer()
    skeleton = packer.pack(objects, "")
    payload = b"".join(packer.chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "step": step,
        "seed": config.seed,
        "counters": dict(counters),
        "config": dataclasses.asdict(config),
        "config_hash": config_hash(config),
        "tensors": packer.table,
        "skeleton": skeleton,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    target = checkpoint_dir(run_dir, step)
    tmp = target.with_name(target.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    (tmp / PAYLOAD).write_bytes(payload)
    (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    if target.exists():
        shutil.rmtree(target)
    tmp.rename(target)
    (Path(run_dir) / "checkpoints" / "latest").write_text(target.name, encoding="utf-8")
    return target


def latest_checkpoint(run_dir: str | Path) -> Optional[Path]:
    pointer = Path(run_dir) / "checkpoints" / "latest"
    if not pointer.exists():
        return None
    return pointer.parent / pointer.read_text(encoding="utf-8").strip()


def resolve_checkpoint(path: str | Path) -> Path:
    """Accept a checkpoint directory or a run directory (uses its latest checkpoint)."""
    path = Path(path)
    if (path / MANIFEST).exists():
        return path
    latest = latest_checkpoint(path)
    if latest is None or not (latest / MANIFEST).exists():
        raise FileNotFoundError(f"no checkpoint found at {path}")
    return latest


def load_checkpoint(path: str | Path) -> Tuple[Config, Dict[str, Any], Dict[str, Any]]:
    """Returns (config, manifest, objects); CorruptionError if the payload hash does not match."""
    path = resolve_checkpoint(path)
    manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    payload = (path / PAYLOAD).read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CorruptionError(f"{path / PAYLOAD}: payload hash does not match manifest")
    config = config_from_dict(manifest["config"])
    if config_hash(config) != manifest["config_hash"]:
        raise CorruptionError(f"{path / MANIFEST}: config hash does not match stored config")
    return config, manifest, _unpack(manifest["skeleton"], manifest["tensors"], payload)


@contextlib.contextmanager
def run_lock(run_dir: str | Path, attempts: int = 5, wait_seconds: float = 0.2):
    """Exclusive <run_dir>/.lock for the duration of the block."""
    lock = Path(run_dir) / ".lock"
    lock.parent.mkdir(parents=True, exist_ok=True)

    @retry(stop=stop_after_attempt(attempts), wait=wait_fixed(wait_seconds),
           retry=retry_if_exception_type(FileExistsError), reraise=True)
    def _acquire() -> int:
        return os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)

    try:
        fd = _acquire()
    except FileExistsError as e:
        raise RunLockedError(f"{run_dir} is locked by another process ({lock})") from e
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield lock
    finally:
        lock.unlink(missing_ok=True)
