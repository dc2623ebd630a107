"""Region-constrained multichannel mixture synthesis for the car-cabin
separation scenario.

Three cuboid regions (driver D, co-driver C, back bench B) each hold one
speaker.  Sources are convolved with simulated room impulse responses onto a
three-microphone array; targets are the per-region images at the reference
microphone.  Variants: FC (fully concurrent), WN (FC plus per-mic white
noise at 20-30 dB SNR), PO (onsets staggered by exactly two seconds).
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .acoustics import ArraySpec, Rir, RirCache, RoomSpec, simulate_array_rirs
from .autodiff import ConfigError
from .fileio import read_jsonl, read_wav, write_jsonl, write_wav

SAMPLE_RATE = 16000
EXAMPLE_SECONDS = 4.0
ONSET_DELAY_SECONDS = 2.0
SNR_RANGE_DB = (20.0, 30.0)
RMS_RANGE_DBFS = (-25.0, -20.0)
VARIANTS = ("FC", "WN", "PO")
SPLITS = ("train", "val", "test")
REGION_ORDER = ("D", "C", "B")

CABIN_DIMS = (3.0, 2.0, 1.5)
ARRAY_CENTER = (0.5, 1.0, 1.0)
MIC_SPACING = 0.08

# achievable reverberation grid for the cabin: the Sabine floor of the
# 3 x 2 x 1.5 m box is 0.054 s, so the 0.05 s point is excluded
CABIN_T60_GRID = (0.06, 0.07, 0.08, 0.09, 0.10)


class FormatError(ValueError):
    """Audio input that cannot be used without silent conversion."""


@dataclass(frozen=True)
class RegionSpec:
    label: str
    center: tuple
    edge_lengths: tuple

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "edge_lengths", tuple(float(e) for e in self.edge_lengths))
        if len(self.center) != 3 or len(self.edge_lengths) != 3:
            raise ConfigError(f"region {self.label} needs 3D center and edges")
        if any(e <= 0 for e in self.edge_lengths):
            raise ConfigError(f"region {self.label} has non-positive edge lengths")

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        c = np.array(self.center)
        h = np.array(self.edge_lengths) / 2.0
        return c - h, c + h

    def contains(self, point) -> bool:
        lo, hi = self.bounds()
        p = np.asarray(point, dtype=np.float64)
        return bool(np.all(p >= lo - 1e-12) and np.all(p <= hi + 1e-12))

    def validate_inside(self, room: RoomSpec) -> None:
        lo, hi = self.bounds()
        dims = np.array(room.dimensions)
        if np.any(lo < 0.0) or np.any(hi > dims):
            raise ConfigError(
                f"region {self.label} spans {tuple(lo)}..{tuple(hi)}, "
                f"outside room {room.dimensions}")


def cabin_room(t60: float, sample_rate: int = SAMPLE_RATE) -> RoomSpec:
    return RoomSpec(CABIN_DIMS, t60, sample_rate=sample_rate)


def cabin_array() -> ArraySpec:
    # uniform linear array along y, reference is the central microphone
    cx, cy, cz = ARRAY_CENTER
    return ArraySpec(
        mic_positions=((cx, cy - MIC_SPACING, cz), (cx, cy, cz), (cx, cy + MIC_SPACING, cz)),
        reference_index=1,
    )


def cabin_regions() -> List[RegionSpec]:
    return [
        RegionSpec("D", (1.25, 0.5, 1.0), (0.5, 0.5, 0.5)),
        RegionSpec("C", (1.25, 1.5, 1.0), (0.5, 0.5, 0.5)),
        # back bench: three front-region volumes, long side across the cabin
        RegionSpec("B", (2.25, 1.0, 1.0), (0.5, 1.5, 0.5)),
    ]


# ---------------------------------------------------------------------------
# position bank


@dataclass
class PositionBank:
    positions: dict  # label -> {split -> list of (x, y, z)}
    seed: int

    def points(self, label: str, split: str) -> List[tuple]:
        return self.positions[label][split]

    def size(self, label: str) -> int:
        return sum(len(v) for v in self.positions[label].values())

    def to_json_dict(self) -> dict:
        return {"seed": self.seed,
                "positions": {lbl: {s: [list(p) for p in pts] for s, pts in by.items()}
                              for lbl, by in self.positions.items()}}

    @classmethod
    def from_json_dict(cls, blob: dict) -> "PositionBank":
        positions = {lbl: {s: [tuple(p) for p in pts] for s, pts in by.items()}
                     for lbl, by in blob["positions"].items()}
        return cls(positions=positions, seed=blob["seed"])


def _split_sizes(n: int, fracs=(0.6, 0.2, 0.2)) -> Tuple[int, int, int]:
    train = int(round(n * fracs[0]))
    val = int(round(n * fracs[1]))
    return train, val, n - train - val


def sample_positions(room: RoomSpec, regions: Sequence[RegionSpec],
                     counts: Sequence[int], seed: int) -> PositionBank:
    """Uniform i.i.d. points per region, split 60/20/20 in draw order."""
    if len(counts) != len(regions) or any(c <= 0 for c in counts):
        raise ConfigError(f"need one positive count per region, got {counts}")
    bank = {}
    for idx, (region, count) in enumerate(zip(regions, counts)):
        region.validate_inside(room)
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        lo, hi = region.bounds()
        pts = rng.uniform(lo, hi, size=(count, 3))
        n_train, n_val, _ = _split_sizes(count)
        as_tuples = [tuple(float(x) for x in p) for p in pts]
        bank[region.label] = {
            "train": as_tuples[:n_train],
            "val": as_tuples[n_train:n_train + n_val],
            "test": as_tuples[n_train + n_val:],
        }
    return PositionBank(positions=bank, seed=seed)


# ---------------------------------------------------------------------------
# speech sources


@dataclass
class Utterance:
    signal: np.ndarray
    utterance_id: str
    sample_rate: int = SAMPLE_RATE


def ingest_speech(path) -> Utterance:
    """Load a mono 16 kHz WAV (PCM16 or float32) without resampling."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except Exception as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise FormatError(f"{path} is {rate} Hz; resampling is refused, need {SAMPLE_RATE} Hz")
    if data.ndim != 1:
        raise FormatError(f"{path} has {data.shape[1]} channels, need mono")
    if data.dtype == np.int16:
        signal = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        signal = data.astype(np.float64)
    else:
        raise FormatError(f"{path} has dtype {data.dtype}; only PCM16 and float32 are accepted")
    return Utterance(signal=signal, utterance_id=path.stem, sample_rate=rate)


def generate_speechlike(seed: int, duration: float = EXAMPLE_SECONDS,
                        sample_rate: int = SAMPLE_RATE) -> Utterance:
    """Amplitude-modulated harmonic-plus-noise stand-in for recorded speech.

    A wandering pitch track drives twelve 1/h harmonics, mixed with a hiss
    floor and gated by a syllabic-rate envelope.  Spectrally it sits between
    a pure tone and white noise, which is enough to exercise the pipeline
    without an external corpus.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0x5eec, int(seed)]))
    n = int(round(duration * sample_rate))

    ctrl = rng.uniform(100.0, 220.0, size=max(2, int(duration * 8)))
    f0 = np.interp(np.linspace(0.0, len(ctrl) - 1.0, n), np.arange(len(ctrl)), ctrl)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
    voiced = np.zeros(n)
    for h in range(1, 13):
        voiced += np.sin(h * phase + rng.uniform(0.0, 2.0 * np.pi)) / h
    hiss = 0.15 * rng.standard_normal(n)

    env_ctrl = np.abs(rng.standard_normal(max(2, int(duration * 4))))
    env = np.interp(np.linspace(0.0, len(env_ctrl) - 1.0, n),
                    np.arange(len(env_ctrl)), env_ctrl)
    env /= env.max() + 1e-12

    sig = env * (voiced + hiss)
    sig = 0.95 * sig / np.max(np.abs(sig))
    return Utterance(signal=sig, utterance_id=f"synth-{int(seed)}", sample_rate=sample_rate)


def rms_normalize(signal: np.ndarray, target_dbfs: float) -> np.ndarray:
    rms = float(np.sqrt(np.mean(signal ** 2)))
    if rms == 0.0:
        raise ValueError("cannot normalize an all-zero signal")
    return signal * (10.0 ** (target_dbfs / 20.0) / rms)


# ---------------------------------------------------------------------------
# mixing


@dataclass
class MixtureExample:
    mics: np.ndarray      # (M, T)
    targets: np.ndarray   # (R, T) images at the reference mic
    metadata: dict
    images: Optional[np.ndarray] = None  # (R, M, T) when requested


def make_example(rirs: Dict[str, Sequence[Rir]], utterances: Dict[str, Utterance],
                 positions: Dict[str, tuple], t60: float, variant: str, seed: int,
                 reference_index: int = 1,
                 duration: float = EXAMPLE_SECONDS,
                 keep_images: bool = False) -> MixtureExample:
    """Mix one utterance per region through its array RIRs.

    Sources are RMS-leveled, "min"-truncated to the shortest utterance, and
    convolved per mic.  FC sums the images; WN adds per-mic independent
    white noise at a drawn SNR; PO staggers region onsets by exactly two
    seconds in a random order (output lengthened accordingly).
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    missing = [lbl for lbl in REGION_ORDER if lbl not in utterances or lbl not in rirs]
    if missing:
        raise ConfigError(f"missing utterances or rirs for regions {missing}")

    rng = np.random.default_rng(np.random.SeedSequence([0xe7a, int(seed)]))
    fs = SAMPLE_RATE
    t_total = int(round(duration * fs))
    m = len(rirs[REGION_ORDER[0]])

    # leveled anechoic sources at a common ("min") length
    leveled = {}
    for lbl in REGION_ORDER:
        leveled[lbl] = rms_normalize(utterances[lbl].signal,
                                     rng.uniform(*RMS_RANGE_DBFS))
    min_len = min(len(s) for s in leveled.values())
    leveled = {lbl: s[:min_len] for lbl, s in leveled.items()}

    onset_gap = int(round(ONSET_DELAY_SECONDS * fs))
    if variant == "PO":
        order = [REGION_ORDER[i] for i in rng.permutation(len(REGION_ORDER))]
        onsets = {lbl: i * onset_gap for i, lbl in enumerate(order)}
        t_total += (len(REGION_ORDER) - 1) * onset_gap
    else:
        onsets = {lbl: 0 for lbl in REGION_ORDER}

    images = np.zeros((len(REGION_ORDER), m, t_total))
    for r, lbl in enumerate(REGION_ORDER):
        for mic in range(m):
            img = fftconvolve(leveled[lbl], rirs[lbl][mic].samples.astype(np.float64))
            start = onsets[lbl]
            take = min(len(img), t_total - start)
            images[r, mic, start:start + take] = img[:take]

    mixture = images.sum(axis=0)
    targets = images[:, reference_index, :].copy()

    metadata = {
        "variant": variant,
        "seed": int(seed),
        "t60": float(t60),
        "positions": {lbl: [float(c) for c in positions[lbl]] for lbl in REGION_ORDER},
        "utterance_ids": {lbl: utterances[lbl].utterance_id for lbl in REGION_ORDER},
        "reference_index": reference_index,
        "onsets": {lbl: int(v) for lbl, v in onsets.items()},
    }

    if variant == "WN":
        snr_db = float(rng.uniform(*SNR_RANGE_DB))
        noise = rng.standard_normal(mixture.shape)
        clean_energy = float(np.sum(mixture ** 2))
        noise_energy = float(np.sum(noise ** 2))
        noise *= math.sqrt(clean_energy / (noise_energy * 10.0 ** (snr_db / 10.0)))
        mixture = mixture + noise
        metadata["snr_db"] = snr_db

    return MixtureExample(mics=mixture, targets=targets, metadata=metadata,
                          images=images if keep_images else None)


# ---------------------------------------------------------------------------
# dataset builds


@dataclass
class DatasetConfig:
    out_dir: str
    seed: int = 0
    train_count: int = 600
    val_count: int = 100
    test_count: int = 100
    position_counts: tuple = (50, 50, 150)
    t60_grid: tuple = CABIN_T60_GRID
    test_variants: tuple = VARIANTS
    utterance_dir: Optional[str] = None   # None -> synthetic sources
    rir_cache_dir: Optional[str] = None   # None -> <out_dir>/rir_cache
    max_order: str = "auto"

    def __post_init__(self):
        if min(self.train_count, self.val_count, self.test_count) < 0:
            raise ConfigError("split counts must be non-negative")
        bad = [t for t in self.t60_grid
               if not any(abs(t - ref) < 1e-9 for ref in np.arange(0.05, 0.105, 0.01))]
        if bad:
            raise ConfigError(f"t60 grid entries {bad} outside 0.05..0.10 step 0.01")
        unknown = set(self.test_variants) - set(VARIANTS)
        if unknown:
            raise ConfigError(f"unknown test variants {sorted(unknown)}")


def load_dataset_config(path) -> DatasetConfig:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    table = raw.get("dataset", raw)
    allowed = set(DatasetConfig.__dataclass_fields__)
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"unknown dataset config keys {sorted(unknown)}")
    for key in ("position_counts", "t60_grid", "test_variants"):
        if key in table:
            table[key] = tuple(table[key])
    # out_dir may come from the command line instead of the file
    table.setdefault("out_dir", "")
    return DatasetConfig(**table)


def _example_seed(global_seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([global_seed, SPLITS.index(split), index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2 ** 63))


def _utterance_pool(config: DatasetConfig) -> Optional[List[Path]]:
    if config.utterance_dir is None:
        return None
    pool = sorted(Path(config.utterance_dir).glob("*.wav"))
    if len(pool) < len(REGION_ORDER):
        raise ConfigError(
            f"utterance_dir has {len(pool)} wav files; need at least "
            f"{len(REGION_ORDER)} (one per region), shortfall {len(REGION_ORDER) - len(pool)}")
    return pool


def _draw_content(bank: PositionBank, pool, config: DatasetConfig,
                  split: str, base_seed: int):
    """Positions, utterances and T60 for one example; shared by variants."""
    rng = np.random.default_rng(np.random.SeedSequence([0xc0, base_seed]))
    positions = {}
    for lbl in REGION_ORDER:
        pts = bank.points(lbl, split)
        positions[lbl] = pts[int(rng.integers(len(pts)))]
    t60 = float(config.t60_grid[int(rng.integers(len(config.t60_grid)))])
    utterances = {}
    if pool is None:
        for r, lbl in enumerate(REGION_ORDER):
            utterances[lbl] = generate_speechlike(base_seed * 8 + r)
    else:
        picks = rng.choice(len(pool), size=len(REGION_ORDER), replace=False)
        for lbl, p in zip(REGION_ORDER, picks):
            utterances[lbl] = ingest_speech(pool[int(p)])
    return positions, utterances, t60


def build_dataset(config: DatasetConfig) -> Dict[str, List[dict]]:
    """Generate all splits and write WAVs plus JSONL manifests.

    Returns the manifests keyed by name (train, val, test_fc, ...).  All
    paths inside manifests are relative to `out_dir`, so identical configs
    rebuild bit-identical trees.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = RirCache(config.rir_cache_dir or out / "rir_cache")
    room_for = {t: cabin_room(t) for t in config.t60_grid}
    array = cabin_array()
    regions = cabin_regions()
    for region in regions:
        region.validate_inside(room_for[config.t60_grid[0]])
    bank = sample_positions(room_for[config.t60_grid[0]], regions,
                            config.position_counts, config.seed)
    pool = _utterance_pool(config)

    jobs = [("train", "train", ("FC",), config.train_count),
            ("val", "val", ("FC",), config.val_count),
            ("test", "test", tuple(config.test_variants), config.test_count)]

    manifests: Dict[str, List[dict]] = {}
    for split, bank_split, variants, count in jobs:
        for variant in variants:
            name = split if split != "test" else f"test_{variant.lower()}"
            records = []
            for index in range(count):
                base_seed = _example_seed(config.seed, split, index)
                positions, utterances, t60 = _draw_content(
                    bank, pool, config, bank_split, base_seed)
                rirs = {lbl: [cache.get(room_for[t60], positions[lbl], mic,
                                        max_order=config.max_order)
                              for mic in array.mic_positions]
                        for lbl in REGION_ORDER}
                example = make_example(rirs, utterances, positions, t60, variant,
                                       base_seed,
                                       reference_index=array.reference_index)
                rel = Path("wav") / name / f"ex{index:05d}"
                write_wav(out / rel.with_name(rel.name + "_mix.wav"),
                          example.mics, SAMPLE_RATE)
                target_paths = []
                for r, lbl in enumerate(REGION_ORDER):
                    tp = rel.with_name(rel.name + f"_tgt{lbl}.wav")
                    write_wav(out / tp, example.targets[r], SAMPLE_RATE)
                    target_paths.append(str(tp))
                record = {
                    "index": index,
                    "split": name,
                    "mixture_path": str(rel.with_name(rel.name + "_mix.wav")),
                    "target_paths": target_paths,
                }
                record.update(example.metadata)
                records.append(record)
            write_jsonl(out / "manifests" / f"{name}.jsonl", records)
            manifests[name] = records

    write_jsonl(out / "manifests" / "position_bank.jsonl", [bank.to_json_dict()])
    return manifests


def load_manifest(out_dir, name: str) -> List[dict]:
    return read_jsonl(Path(out_dir) / "manifests" / f"{name}.jsonl")


def load_example(out_dir, record: dict) -> MixtureExample:
    root = Path(out_dir)
    _, mics = read_wav(root / record["mixture_path"])
    targets = np.stack([read_wav(root / p)[1] for p in record["target_paths"]])
    metadata = {k: v for k, v in record.items()
                if k not in ("mixture_path", "target_paths")}
    return MixtureExample(mics=np.atleast_2d(mics), targets=targets, metadata=metadata)


def audit_split_disjointness(manifests: Dict[str, List[dict]]) -> Dict[str, list]:
    """Positions shared between train and any test manifest, per region.

    An empty report means the audit passed.
    """
    train_positions = {lbl: set() for lbl in REGION_ORDER}
    for rec in manifests.get("train", []):
        for lbl, pos in rec["positions"].items():
            train_positions[lbl].add(tuple(pos))
    overlaps: Dict[str, list] = {}
    for name, records in manifests.items():
        if not name.startswith("test"):
            continue
        for rec in records:
            for lbl, pos in rec["positions"].items():
                if tuple(pos) in train_positions[lbl]:
                    overlaps.setdefault(name, []).append((lbl, tuple(pos)))
    return overlaps
