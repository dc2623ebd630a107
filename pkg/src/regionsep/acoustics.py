"""Shoebox-room impulse responses via the image-source method.

Mirrors a point source across the six walls of a rectangular room, sums the
band-limited arrivals of every virtual source, and derives the uniform wall
reflection coefficient from a requested reverberation time through the Sabine
inversion.  All functions are pure and deterministic; an optional disk cache
stores simulated responses as little-endian float32 with a JSON sidecar.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .fileio import atomic_write_bytes

SPEED_OF_SOUND = 343.0

# fractional delays use an 81-tap Hann-windowed sinc (half width 40 samples)
_KERNEL_HALF = 40

# refuse image grids past this many virtual sources
_MAX_IMAGES = 5_000_000

# images processed per block when stamping arrivals, bounds peak memory
_PLACE_BLOCK = 100_000


class AcousticsError(ValueError):
    pass


class UnachievableT60Error(AcousticsError):
    """Requested decay is faster than the room's absorption ceiling allows."""


class GeometryError(AcousticsError):
    pass


@dataclass(frozen=True)
class RoomSpec:
    dimensions: tuple
    t60: float
    speed_of_sound: float = SPEED_OF_SOUND
    sample_rate: int = 16000

    def __post_init__(self):
        dims = tuple(float(d) for d in self.dimensions)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise GeometryError(f"room dimensions must be three positive lengths, got {self.dimensions}")
        object.__setattr__(self, "dimensions", dims)
        if self.t60 <= 0:
            raise AcousticsError(f"t60 must be positive, got {self.t60}")
        # fails fast when the Sabine inversion has no solution
        sabine_absorption(self)

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dimensions
        return lx * ly * lz

    @property
    def surface_area(self) -> float:
        lx, ly, lz = self.dimensions
        return 2.0 * (lx * ly + lx * lz + ly * lz)


@dataclass(frozen=True)
class ArraySpec:
    mic_positions: tuple
    reference_index: int = 0

    def __post_init__(self):
        pos = tuple(tuple(float(c) for c in p) for p in self.mic_positions)
        if not pos or any(len(p) != 3 for p in pos):
            raise GeometryError("mic_positions must be a non-empty list of 3D points")
        object.__setattr__(self, "mic_positions", pos)
        if not 0 <= self.reference_index < len(pos):
            raise AcousticsError(
                f"reference_index {self.reference_index} out of range for {len(pos)} mics")

    def __len__(self):
        return len(self.mic_positions)


@dataclass
class Rir:
    samples: np.ndarray
    sample_rate: int
    source: tuple
    mic: tuple
    t60: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if not np.isfinite(self.samples).all():
            raise AcousticsError("rir contains non-finite samples")


def sabine_absorption(room: RoomSpec) -> float:
    alpha = 24.0 * math.log(10.0) * room.volume / (
        room.speed_of_sound * room.surface_area * room.t60)
    if alpha > 1.0 + 1e-12:
        shortest = 24.0 * math.log(10.0) * room.volume / (
            room.speed_of_sound * room.surface_area)
        raise UnachievableT60Error(
            f"t60={room.t60:.4f}s needs absorption {alpha:.3f} > 1; "
            f"this room cannot decay faster than {shortest:.4f}s")
    return min(alpha, 1.0)


def reflection_coefficient(room: RoomSpec) -> float:
    """Uniform wall reflection beta = sqrt(1 - alpha) from the Sabine inversion."""
    return math.sqrt(max(1.0 - sabine_absorption(room), 0.0))


def _check_inside(room: RoomSpec, point, what: str) -> np.ndarray:
    p = np.asarray(point, dtype=np.float64)
    if p.shape != (3,):
        raise GeometryError(f"{what} must be a 3D point, got shape {p.shape}")
    if not all(0.0 < p[i] < room.dimensions[i] for i in range(3)):
        raise GeometryError(f"{what} {tuple(p)} is not strictly inside room {room.dimensions}")
    return p


def _axis_images(s: float, r: float, length: float, order: int):
    """Image coordinates (relative to the mic) and wall-hit counts for one axis.

    For q in {0,1} and n in [-order, order] the virtual source sits at
    (1-2q)*s + 2*n*length and its path crosses |n-q| + |n| walls.
    """
    n = np.arange(-order, order + 1, dtype=np.float64)
    coords = np.concatenate([s + 2.0 * n * length, -s + 2.0 * n * length]) - r
    hits = np.concatenate([2.0 * np.abs(n), np.abs(n - 1) + np.abs(n)])
    return coords, hits


def _place_arrivals(delays: np.ndarray, amps: np.ndarray, length: int) -> np.ndarray:
    """Sum band-limited impulses amp*h(t - delay) into a buffer of `length`.

    With t = j - frac on the integer tap grid, sin(pi*t) = -(-1)^j sin(pi*frac)
    and cos(pi*t/H) splits by the angle-addition identity, so only three
    trig evaluations per image are needed instead of two per tap.
    """
    out = np.zeros(length, dtype=np.float64)
    offsets = np.arange(-_KERNEL_HALF, _KERNEL_HALF + 2)
    sign = np.where(offsets % 2 == 0, 1.0, -1.0)
    cos_j = np.cos(np.pi * offsets / _KERNEL_HALF)
    sin_j = np.sin(np.pi * offsets / _KERNEL_HALF)
    for lo in range(0, delays.size, _PLACE_BLOCK):
        d = delays[lo:lo + _PLACE_BLOCK]
        a = amps[lo:lo + _PLACE_BLOCK]
        base = np.floor(d).astype(np.int64)
        frac = d - base
        idx = base[:, None] + offsets[None, :]
        t = offsets[None, :] - frac[:, None]

        with np.errstate(divide="ignore", invalid="ignore"):
            sinc_t = (-np.sin(np.pi * frac)[:, None] * sign[None, :]) / (np.pi * t)
        sinc_t = np.where(np.abs(t) < 1e-12, 1.0, sinc_t)

        cos_t = (np.cos(np.pi * frac / _KERNEL_HALF)[:, None] * cos_j[None, :]
                 + np.sin(np.pi * frac / _KERNEL_HALF)[:, None] * sin_j[None, :])
        taps = a[:, None] * (0.5 * (1.0 + cos_t)) * sinc_t

        inside = (np.abs(t) <= _KERNEL_HALF) & (idx >= 0) & (idx < length)
        out += np.bincount(idx[inside], weights=taps[inside], minlength=length)
    return out


def simulate_rir(room: RoomSpec, source, mic,
                 max_order: Union[int, str] = "auto") -> Rir:
    """Image-source impulse response from `source` to `mic`.

    `max_order="auto"` expands the image lattice just far enough that every
    propagation path within the t60 decay window is represented.
    """
    src = _check_inside(room, source, "source")
    rcv = _check_inside(room, mic, "mic")
    direct = float(np.linalg.norm(src - rcv))
    if direct == 0.0:
        raise GeometryError("source and mic coincide")

    fs = room.sample_rate
    c = room.speed_of_sound
    beta = reflection_coefficient(room)
    length = math.ceil(room.t60 * fs) + math.ceil(direct * fs / c) + _KERNEL_HALF + 1

    horizon = c * room.t60 + direct
    if max_order == "auto":
        orders = [math.ceil(horizon / (2.0 * d)) + 1 for d in room.dimensions]
    else:
        orders = [int(max_order)] * 3
        if orders[0] < 0:
            raise AcousticsError(f"max_order must be non-negative, got {max_order}")

    count = 8
    for o in orders:
        count *= 2 * o + 1
    if count > _MAX_IMAGES:
        raise AcousticsError(f"{count} image sources exceed the {_MAX_IMAGES} guard")

    per_axis = [_axis_images(src[i], rcv[i], room.dimensions[i], orders[i])
                for i in range(3)]
    (cx, hx), (cy, hy), (cz, hz) = per_axis
    d2 = (cx[:, None, None] ** 2 + cy[None, :, None] ** 2 + cz[None, None, :] ** 2)
    hits = hx[:, None, None] + hy[None, :, None] + hz[None, None, :]
    dist = np.sqrt(d2).ravel()
    hits = hits.ravel()

    with np.errstate(divide="ignore"):
        amp = np.power(beta, hits) / (4.0 * math.pi * dist)
    delays = dist * fs / c
    keep = delays < length + _KERNEL_HALF
    samples = _place_arrivals(delays[keep], amp[keep], length)
    return Rir(samples, fs, tuple(src), tuple(rcv), room.t60)


def simulate_array_rirs(room: RoomSpec, array: ArraySpec, source,
                        max_order: Union[int, str] = "auto") -> list:
    """One impulse response per microphone, in array order."""
    return [simulate_rir(room, source, m, max_order=max_order)
            for m in array.mic_positions]


def estimate_t60(rir: Union[Rir, np.ndarray], sample_rate: Optional[int] = None,
                 fit_db: tuple = (-5.0, -25.0)) -> float:
    """Reverberation time from Schroeder backward integration.

    Fits the energy-decay curve between `fit_db` levels and extrapolates the
    slope to -60 dB.
    """
    if isinstance(rir, Rir):
        samples, fs = rir.samples, rir.sample_rate
    else:
        samples, fs = np.asarray(rir, dtype=np.float64), sample_rate
        if fs is None:
            raise ValueError("sample_rate is required for raw sample arrays")
    energy = samples.astype(np.float64) ** 2
    edc = np.cumsum(energy[::-1])[::-1]
    if edc[0] <= 0:
        raise AcousticsError("rir has no energy")
    db = 10.0 * np.log10(np.maximum(edc / edc[0], 1e-30))

    hi, lo = fit_db
    start = int(np.argmax(db <= hi))
    below = np.nonzero(db <= lo)[0]
    if db[start] > hi or below.size == 0:
        raise AcousticsError(f"decay never spans [{hi}, {lo}] dB; rir too short")
    stop = int(below[0])
    if stop <= start:
        raise AcousticsError("degenerate decay fit range")
    t = np.arange(start, stop + 1) / fs
    slope = np.polyfit(t, db[start:stop + 1], 1)[0]
    if slope >= 0:
        raise AcousticsError("energy-decay slope is non-negative")
    return -60.0 / slope


class RirCache:
    """Disk cache keyed by (room, t60, source, mic, order).

    Samples are stored as little-endian float32; a JSON sidecar records the
    generating parameters.  Cache hits and misses return bit-identical taps,
    so the first and later uses of a key agree exactly.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def _key(room: RoomSpec, source, mic, max_order) -> str:
        payload = {
            "dimensions": [repr(d) for d in room.dimensions],
            "t60": repr(room.t60),
            "speed_of_sound": repr(room.speed_of_sound),
            "sample_rate": room.sample_rate,
            "source": [repr(float(x)) for x in source],
            "mic": [repr(float(x)) for x in mic],
            "max_order": str(max_order),
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:24]

    def get(self, room: RoomSpec, source, mic,
            max_order: Union[int, str] = "auto") -> Rir:
        key = self._key(room, source, mic, max_order)
        data_path = self.root / f"{key}.f32"
        meta_path = self.root / f"{key}.json"
        if data_path.exists() and meta_path.exists():
            meta = json.loads(meta_path.read_text())
            samples = np.frombuffer(data_path.read_bytes(), dtype="<f4").copy()
            return Rir(samples, meta["sample_rate"],
                       tuple(meta["source"]), tuple(meta["mic"]), meta["t60"])

        rir = simulate_rir(room, source, mic, max_order=max_order)
        quantized = rir.samples.astype("<f4")
        meta = {
            "sample_rate": rir.sample_rate,
            "source": list(rir.source),
            "mic": list(rir.mic),
            "t60": rir.t60,
            "dimensions": list(room.dimensions),
            "speed_of_sound": room.speed_of_sound,
            "max_order": str(max_order),
            "length": int(quantized.size),
            "dtype": "<f4",
        }
        atomic_write_bytes(data_path, quantized.tobytes())
        atomic_write_bytes(meta_path, json.dumps(meta, sort_keys=True).encode())
        rir.samples = quantized.copy()
        return rir
