"""Shared file helpers: atomic writes, float32 WAV, and JSON-lines."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable, List, Tuple, Union

import numpy as np
from scipy.io import wavfile


def atomic_write_bytes(path, data: bytes) -> None:
    # temp file in the same directory so os.replace stays atomic
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_wav(path, signal: np.ndarray, sample_rate: int) -> None:
    """Store a (T,) or (channels, T) float signal as float32 WAV."""
    sig = np.asarray(signal)
    data = sig.T.astype(np.float32) if sig.ndim == 2 else sig.astype(np.float32)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    wavfile.write(tmp, sample_rate, data)
    os.replace(tmp, path)


def read_wav(path) -> Tuple[int, np.ndarray]:
    """Load a WAV as float64, (T,) mono or (channels, T) multichannel."""
    rate, data = wavfile.read(path)
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr.T
    return rate, arr.astype(np.float64)


def write_jsonl(path, records: Iterable[dict]) -> None:
    lines = [json.dumps(r, sort_keys=True) for r in records]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_jsonl(path) -> List[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(json.loads(line))
    return out
