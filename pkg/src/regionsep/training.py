"""Desk-scale training loop: Adam on the separator, PIT or fixed-mapping regime.

The loop is deliberately synchronous and single-threaded.  All shuffling is
seeded per epoch, wall-clock fields can be zeroed (`deterministic`) so two
runs with the same seed produce byte-identical JSONL logs, and checkpoints
use the separator's versioned format.  Periodic checkpoints capture
parameters only; resuming restarts the Adam moments.
"""

import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ConfigError, Tensor, no_grad, stack
from .dataset import VARIANTS, load_example, load_manifest
from .fileio import write_jsonl
from .objectives import (LOSS_CLAMP_DB, REGION_LABELS, PermutationReport,
                         fixed_mapping_loss, pairwise_si_sdr,
                         permutation_census, pit_loss, si_sdr)
from .separator import ModelConfig, save_checkpoint, separate

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

REGIMES = ("pit", "fixed")


class TrainingError(RuntimeError):
    """Raised when the loop must abort (non-finite loss, bad data)."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    epochs: int = 1
    learning_rate: float = 15e-5
    batch_size: int = 1
    regime: str = "pit"
    seed: int = 0
    grad_clip_norm: float = 5.0
    checkpoint_interval: int = 0      # steps between checkpoints; 0 disables
    manifest: Optional[str] = None    # dataset build dir for the CLI path
    deterministic: bool = True        # zero wall-time fields in the log
    halve_on_plateau: bool = False
    plateau_patience: int = 3

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(
                f"epochs and batch size must be >= 1, got {self.epochs}/{self.batch_size}")
        if self.grad_clip_norm <= 0:
            raise ConfigError(f"gradient clip norm must be positive, got {self.grad_clip_norm}")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint interval cannot be negative")
        if self.plateau_patience < 1:
            raise ConfigError("plateau patience must be >= 1")

    @classmethod
    def from_dict(cls, blob: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(blob) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        return cls(**blob)


# ---------------------------------------------------------------------------
# optimizer


class Adam(object):
    """Adam with bias correction; moments held at float64.

    Parameter updates are computed in float64 and cast back to each
    parameter's own dtype, so float32 models keep float32 graphs while the
    moment accumulators stay precise.
    """

    def __init__(self, params: Dict[str, Tensor], learning_rate: float,
                 beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 eps: float = ADAM_EPS):
        self.params = dict(params)
        self.learning_rate = float(learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = {n: np.zeros(p.data.shape) for n, p in self.params.items()}
        self._v = {n: np.zeros(p.data.shape) for n, p in self.params.items()}
        self._t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self._t += 1
        bc1 = 1.0 - self.beta1 ** self._t
        bc2 = 1.0 - self.beta2 ** self._t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = np.asarray(p.grad, dtype=np.float64)
            self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * g * g
            update = self.learning_rate * (self._m[name] / bc1) \
                / (np.sqrt(self._v[name] / bc2) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)


def clip_gradients(params: Dict[str, Tensor], max_norm: float) -> float:
    """Scale every gradient so the global L2 norm is at most max_norm.

    Returns the pre-clip global norm.
    """
    total = 0.0
    live = [p for p in params.values() if p.grad is not None]
    for p in live:
        g = np.asarray(p.grad, dtype=np.float64)
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for p in live:
            p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# loss plumbing


def _model_dtype(params: Dict[str, Tensor]):
    return params["encoder.kernels"].data.dtype


def _check_example(model_config: ModelConfig, mixture, targets) -> None:
    if mixture.ndim != 2 or mixture.shape[0] != model_config.num_mics:
        raise ConfigError(
            f"model expects {model_config.num_mics} mics, example mixture is {mixture.shape}")
    if targets.ndim != 2 or targets.shape[0] != model_config.num_regions:
        raise ConfigError(
            f"model expects {model_config.num_regions} regions, targets are {targets.shape}")


def _example_loss(params, model_config: ModelConfig, mixture, targets,
                  regime: str, reference_index):
    dtype = _model_dtype(params)
    mixture = np.asarray(mixture, dtype=dtype)
    targets = np.asarray(targets, dtype=dtype)
    _check_example(model_config, mixture, targets)
    out = separate(mixture, params, model_config, reference_index)
    if regime == "pit":
        return pit_loss(out.estimates, targets)
    return fixed_mapping_loss(out.estimates, targets), None


def _bounded(value: float) -> float:
    # same +-60 dB bound as the losses; keeps exact-match examples from
    # poisoning aggregate means with infinities
    return float(min(max(value, -LOSS_CLAMP_DB), LOSS_CLAMP_DB))


def _region_labels(num_regions: int) -> tuple:
    if num_regions <= len(REGION_LABELS):
        return REGION_LABELS[:num_regions]
    return tuple(f"R{i}" for i in range(num_regions))


# ---------------------------------------------------------------------------
# training


def load_training_examples(data_dir, name: str) -> List[tuple]:
    """Materialise (mixture, targets) float32 pairs from a dataset build."""
    out = []
    for record in load_manifest(data_dir, name):
        ex = load_example(data_dir, record)
        out.append((ex.mics.astype(np.float32), ex.targets.astype(np.float32)))
    return out


def train(params: Dict[str, Tensor], model_config: ModelConfig,
          data: Sequence[tuple], config: TrainConfig, out_dir=None,
          val_data: Optional[Sequence[tuple]] = None,
          reference_index: Optional[int] = None):
    """Run the optimization loop; returns (params, log_records).

    `data` and `val_data` are sequences of (mixture, targets) pairs shaped
    (M, T) and (R, T).  Per-step records carry loss, gradient norm, batch
    example indices, and the chosen permutations under PIT; per-epoch
    records carry the mean loss and, when `val_data` is given, per-region
    validation SI-SDRi.  When `out_dir` is set the records are written to
    train_log.jsonl and checkpoints are saved every `checkpoint_interval`
    steps (step 0 included) plus a `final.ckpt`.

    A non-finite loss aborts before the parameter update, so the current
    params are the last good state; they are checkpointed as
    last_good.ckpt when `out_dir` is set.
    """
    examples = list(data)
    if not examples:
        raise ConfigError("training needs at least one example")
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    opt = Adam(params, config.learning_rate)
    records: List[dict] = []
    step = 0
    best_plateau = math.inf
    stall = 0

    def checkpoint(name: str) -> None:
        if out_path is not None:
            save_checkpoint(out_path / name, params, model_config)

    if config.checkpoint_interval > 0:
        checkpoint("step000000.ckpt")

    try:
        for epoch in range(config.epochs):
            order = np.random.default_rng(
                np.random.SeedSequence([0x7e41, config.seed, epoch])
            ).permutation(len(examples))
            epoch_losses = []
            for start in range(0, len(order), config.batch_size):
                batch = [int(i) for i in order[start:start + config.batch_size]]
                t0 = time.perf_counter()
                opt.zero_grad()
                losses, perms = [], []
                for i in batch:
                    mixture, targets = examples[i]
                    loss, perm = _example_loss(params, model_config, mixture,
                                               targets, config.regime,
                                               reference_index)
                    losses.append(loss)
                    perms.append(perm)
                total = losses[0] if len(losses) == 1 else stack(losses).mean()
                loss_value = float(total.data)
                if not math.isfinite(loss_value):
                    checkpoint("last_good.ckpt")
                    raise TrainingError(
                        f"non-finite loss {loss_value} at step {step} "
                        f"(epoch {epoch}, examples {batch}); parameters were "
                        "not updated; last good state "
                        + (f"saved to {out_path / 'last_good.ckpt'}"
                           if out_path is not None else "kept in memory"))
                total.backward()
                grad_norm = clip_gradients(params, config.grad_clip_norm)
                opt.step()
                step += 1
                epoch_losses.append(loss_value)
                records.append({
                    "kind": "step",
                    "step": step,
                    "epoch": epoch,
                    "examples": batch,
                    "loss": loss_value,
                    "grad_norm": grad_norm,
                    "learning_rate": opt.learning_rate,
                    "permutations": ([list(p) for p in perms]
                                     if config.regime == "pit" else None),
                    "wall_time": (0.0 if config.deterministic
                                  else time.perf_counter() - t0),
                })
                if config.checkpoint_interval > 0 \
                        and step % config.checkpoint_interval == 0:
                    checkpoint(f"step{step:06d}.ckpt")

            epoch_record = {
                "kind": "epoch",
                "epoch": epoch,
                "mean_loss": float(np.mean(epoch_losses)),
                "learning_rate": opt.learning_rate,
            }
            if val_data is not None:
                epoch_record["val_sisdri"] = validation_sisdri(
                    params, model_config, val_data, reference_index)
            records.append(epoch_record)

            if config.halve_on_plateau:
                if epoch_record["mean_loss"] < best_plateau - 1e-9:
                    best_plateau = epoch_record["mean_loss"]
                    stall = 0
                else:
                    stall += 1
                    if stall >= config.plateau_patience:
                        opt.learning_rate *= 0.5
                        stall = 0
        checkpoint("final.ckpt")
    finally:
        if out_path is not None:
            write_jsonl(out_path / "train_log.jsonl", records)
    return params, records


def validation_sisdri(params, model_config: ModelConfig, val_data,
                      reference_index: Optional[int] = None) -> Dict[str, float]:
    """Mean clamped SI-SDRi per region under the best output assignment."""
    labels = _region_labels(model_config.num_regions)
    if reference_index is None:
        reference_index = model_config.num_mics // 2
    sums = np.zeros(len(labels))
    count = 0
    dtype = _model_dtype(params)
    for mixture, targets in val_data:
        mixture = np.asarray(mixture, dtype=dtype)
        with no_grad():
            out = separate(mixture, params, model_config, reference_index)
        est = np.asarray(out.estimates.data, dtype=np.float64)
        tgt = np.asarray(targets, dtype=np.float64)
        _, values = pairwise_si_sdr(est, tgt)
        _, perm = pit_loss(est, tgt)
        mix_ref = mixture.astype(np.float64)[reference_index]
        for i, r in enumerate(perm):
            base = _bounded(si_sdr(mix_ref, tgt[r]))
            sums[r] += values[i, r] - base
        count += 1
    return {labels[r]: float(sums[r] / count) for r in range(len(labels))}


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    """Per-region and averaged SI-SDR / SI-SDRi means, in dB.

    Region order is the slot order (driver, co-driver, backseats at full
    scale); averages are the balanced mean over regions.
    """
    region_labels: tuple
    count: int
    si_sdr: Dict[str, float]
    si_sdri: Dict[str, float]

    @property
    def average_si_sdr(self) -> float:
        return float(np.mean([self.si_sdr[l] for l in self.region_labels]))

    @property
    def average_si_sdri(self) -> float:
        return float(np.mean([self.si_sdri[l] for l in self.region_labels]))

    def to_json_dict(self) -> dict:
        return {
            "count": self.count,
            "average": {"si_sdr": self.average_si_sdr,
                        "si_sdri": self.average_si_sdri},
            "regions": {l: {"si_sdr": self.si_sdr[l], "si_sdri": self.si_sdri[l]}
                        for l in self.region_labels},
        }


@dataclass
class EvalResult:
    metrics: MetricsReport
    census: PermutationReport
    records: List[dict] = field(default_factory=list)


def evaluate_examples(params, model_config: ModelConfig,
                      examples: Iterable[tuple],
                      separate_fn: Optional[Callable] = None,
                      reference_index: Optional[int] = None) -> EvalResult:
    """Score (mixture, targets[, metadata]) examples.

    Estimates come from the model unless `separate_fn(mixture, targets)` is
    injected (oracle pass-through tests).  Per-region SI-SDR uses the best
    output assignment per example; SI-SDRi subtracts the reference-channel
    mixture score.  All dB values are bounded to +-60 so aggregate means
    stay finite when an estimate matches its target exactly.
    """
    if reference_index is None:
        reference_index = model_config.num_mics // 2
    labels = _region_labels(model_config.num_regions)
    dtype = _model_dtype(params) if params else np.float64

    if separate_fn is None:
        def separate_fn(mixture, targets):
            with no_grad():
                out = separate(np.asarray(mixture, dtype=dtype), params,
                               model_config, reference_index)
            return out.estimates.data

    pairs = []
    records = []
    sums_sdr = np.zeros(len(labels))
    sums_sdri = np.zeros(len(labels))
    count = 0
    for example in examples:
        mixture, targets = example[0], example[1]
        meta = example[2] if len(example) > 2 else {}
        mixture = np.asarray(mixture, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        _check_example(model_config, mixture, targets)
        est = np.asarray(separate_fn(mixture, targets), dtype=np.float64)
        if est.shape != targets.shape:
            raise ConfigError(
                f"separator returned {est.shape}, targets are {targets.shape}")

        _, values = pairwise_si_sdr(est, targets)
        _, perm = pit_loss(est, targets)
        mix_ref = mixture[reference_index]
        per_region = {}
        for i, r in enumerate(perm):
            base = _bounded(si_sdr(mix_ref, targets[r]))
            region = labels[r]
            entry = {"si_sdr": values[i, r], "si_sdri": values[i, r] - base}
            positions = meta.get("positions") if isinstance(meta, dict) else None
            if positions and region in positions:
                entry["position"] = positions[region]
            per_region[region] = entry
            sums_sdr[r] += entry["si_sdr"]
            sums_sdri[r] += entry["si_sdri"]
        records.append({
            "index": meta.get("index", count) if isinstance(meta, dict) else count,
            "variant": meta.get("variant") if isinstance(meta, dict) else None,
            "assignment": [labels[r] for r in perm],
            "per_region": per_region,
        })
        pairs.append((est.astype(np.float32), targets.astype(np.float32)))
        count += 1

    if count == 0:
        raise ConfigError("evaluation needs at least one example")
    metrics = MetricsReport(
        region_labels=labels, count=count,
        si_sdr={labels[r]: float(sums_sdr[r] / count) for r in range(len(labels))},
        si_sdri={labels[r]: float(sums_sdri[r] / count) for r in range(len(labels))},
    )
    census = permutation_census(pairs, labels=labels)
    return EvalResult(metrics=metrics, census=census, records=records)


def evaluate(params, model_config: ModelConfig, data_dir, variant: str,
             separate_fn: Optional[Callable] = None,
             reference_index: Optional[int] = None) -> EvalResult:
    """Evaluate one manifest of a dataset build.

    `variant` is FC/WN/PO (mapped to the test manifests) or a literal
    manifest name such as "val".
    """
    name = f"test_{variant.lower()}" if variant in VARIANTS else str(variant)
    manifest_path = Path(data_dir) / "manifests" / f"{name}.jsonl"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest at {manifest_path}")
    rows = load_manifest(data_dir, name)

    if reference_index is None:
        seen = {row.get("reference_index") for row in rows}
        if len(seen) == 1:
            only = seen.pop()
            reference_index = only if only is not None else None

    def stream():
        for row in rows:
            ex = load_example(data_dir, row)
            yield ex.mics, ex.targets, row

    return evaluate_examples(params, model_config, stream(), separate_fn,
                             reference_index)
