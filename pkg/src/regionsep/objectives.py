"""Scale-invariant SDR metric, permutation-invariant and fixed-assignment
losses, and the output-permutation census used for assignment analysis.

The metric path works on plain arrays and reports unclamped values with a
-inf sentinel for silent estimates.  The loss path works on autodiff tensors,
stabilised with a tiny epsilon and clamped to +-60 dB so exact matches and
silences keep finite gradients.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import ShapeError, Tensor, clamp, stack, tlog

LOSS_CLAMP_DB = 60.0
_EPS = 1e-12

# default region labels in canonical target order (driver, co-driver, back)
REGION_LABELS = ("D", "C", "B")

# factorial scan guard; past this an assignment solver should be used instead
MAX_PIT_REGIONS = 8

_si_sdr_evaluations = 0


def si_sdr_evaluations() -> int:
    """Number of scalar SI-SDR evaluations since the last reset."""
    return _si_sdr_evaluations


def reset_si_sdr_evaluations() -> None:
    global _si_sdr_evaluations
    _si_sdr_evaluations = 0


def _count() -> None:
    global _si_sdr_evaluations
    _si_sdr_evaluations += 1


def _check_pair(est, ref):
    if est.shape != ref.shape or est.ndim != 1:
        raise ShapeError(f"si_sdr expects equal-length 1D signals, got {est.shape} vs {ref.shape}")


def si_sdr(est, ref) -> Union[float, Tensor]:
    """10*log10(|a*s|^2 / |a*s - e|^2) with a = <e,s>/|s|^2.

    Array inputs give the exact metric (float dB, -inf sentinel for silent or
    orthogonal estimates).  A Tensor estimate gives the differentiable,
    epsilon-stabilised value used by losses.
    """
    if isinstance(est, Tensor):
        return _si_sdr_tensor(est, ref)
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _check_pair(est, ref)
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise ValueError("si_sdr reference signal is all-zero")
    _count()
    dot = float(est @ ref)
    target_energy = dot * dot / ref_energy
    residual = est - (dot / ref_energy) * ref
    residual_energy = float(residual @ residual)
    if target_energy == 0.0:
        return -math.inf
    if residual_energy == 0.0:
        return math.inf
    return 10.0 * math.log10(target_energy / residual_energy)


def _si_sdr_tensor(est: Tensor, ref) -> Tensor:
    ref = np.asarray(ref.data if isinstance(ref, Tensor) else ref, dtype=est.data.dtype)
    if est.shape != ref.shape or est.data.ndim != 1:
        raise ShapeError(f"si_sdr expects equal-length 1D signals, got {est.shape} vs {ref.shape}")
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise ValueError("si_sdr reference signal is all-zero")
    _count()
    dot = (est * ref).sum()
    target_energy = dot * dot * (1.0 / ref_energy)
    residual = est - dot * (1.0 / ref_energy) * Tensor(ref)
    residual_energy = (residual * residual).sum()
    ratio = (target_energy + _EPS) * ((residual_energy + _EPS) ** -1.0)
    return tlog(ratio) * (10.0 / math.log(10.0))


def si_sdri(est, ref, mixture_ref_channel) -> float:
    """Improvement of the estimate over the unprocessed reference channel."""
    return si_sdr(est, ref) - si_sdr(mixture_ref_channel, ref)


def _clamped(value):
    if isinstance(value, Tensor):
        return clamp(value, -LOSS_CLAMP_DB, LOSS_CLAMP_DB)
    return float(np.clip(value, -LOSS_CLAMP_DB, LOSS_CLAMP_DB))


def _rows(x) -> list:
    if isinstance(x, Tensor):
        if x.data.ndim != 2:
            raise ShapeError(f"expected (regions, samples), got {x.shape}")
        return [x[i] for i in range(x.shape[0])]
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected (regions, samples), got {x.shape}")
    return [x[i] for i in range(x.shape[0])]


def pairwise_si_sdr(est, tgt) -> Tuple[list, np.ndarray]:
    """R x R clamped SI-SDR entries and their float values.

    entry [i][j] scores estimate row i against target row j; entries are
    Tensors when the estimate is a Tensor, plain floats otherwise.
    """
    est_rows, tgt_rows = _rows(est), _rows(tgt)
    if len(est_rows) != len(tgt_rows):
        raise ShapeError(f"estimate has {len(est_rows)} rows, target {len(tgt_rows)}")
    entries = [[_clamped(si_sdr(e, t.data if isinstance(t, Tensor) else t))
                for t in tgt_rows] for e in est_rows]
    values = np.array([[float(v.data) if isinstance(v, Tensor) else v for v in row]
                       for row in entries])
    return entries, values


def pit_loss(est, tgt):
    """Minimum over all assignments of mean negative clamped SI-SDR.

    Returns (loss, best_perm) where best_perm[i] is the target row assigned
    to estimate row i.  Ties go to the lexicographically smallest
    permutation.  Factorial scan; regions above MAX_PIT_REGIONS are refused.
    """
    entries, values = pairwise_si_sdr(est, tgt)
    r = len(entries)
    if r > MAX_PIT_REGIONS:
        raise ValueError(
            f"{r} regions would need {math.factorial(r)} permutation sums; "
            "use an assignment solver instead of the factorial scan")
    best_perm = None
    best_score = -math.inf
    for perm in itertools.permutations(range(r)):
        score = sum(values[i, perm[i]] for i in range(r)) / r
        if score > best_score:
            best_score = score
            best_perm = perm
    if best_perm is None:
        # non-finite scores leave no winner; keep identity so the caller
        # sees the NaN loss instead of a crash
        best_perm = tuple(range(r))
    picked = [entries[i][best_perm[i]] for i in range(r)]
    if isinstance(picked[0], Tensor):
        loss = stack(picked).mean() * -1.0
    else:
        loss = -sum(picked) / r
    return loss, best_perm


def fixed_mapping_loss(est, tgt):
    """Mean negative clamped SI-SDR under the identity region->output map.

    Linear in the region count (R evaluations against R! for the scan).
    Targets must already be in canonical region order.
    """
    est_rows, tgt_rows = _rows(est), _rows(tgt)
    if len(est_rows) != len(tgt_rows):
        raise ShapeError(f"estimate has {len(est_rows)} rows, target {len(tgt_rows)}")
    picked = [_clamped(si_sdr(e, t.data if isinstance(t, Tensor) else t))
              for e, t in zip(est_rows, tgt_rows)]
    if isinstance(picked[0], Tensor):
        return stack(picked).mean() * -1.0
    return -sum(picked) / len(picked)


# ---------------------------------------------------------------------------
# permutation census


@dataclass
class PermutationReport:
    majority: tuple                 # region labels per output slot
    counts: dict                    # perm label tuple -> examples
    confusions: dict                # "X<->Y" (or cycle label) -> examples
    all_have_one_correct: bool
    assignments: list = field(default_factory=list)  # per-example label tuples
    labels: tuple = REGION_LABELS

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def correct(self) -> int:
        return self.counts.get(self.majority, 0)

    def to_json_dict(self) -> dict:
        return {
            "majority": list(self.majority),
            "total": self.total,
            "correct": self.correct,
            "counts": {"-".join(k): v for k, v in sorted(self.counts.items())},
            "confusions": dict(sorted(self.confusions.items())),
            "all_have_one_correct": self.all_have_one_correct,
        }


def _default_labels(r: int) -> tuple:
    return REGION_LABELS if r == len(REGION_LABELS) else tuple(f"S{i + 1}" for i in range(r))


def confusion_key(perm: Sequence[int], majority: Sequence[int], labels: Sequence[str]) -> str:
    """Label for how `perm` deviates from `majority`.

    A single swapped pair is reported as "X<->Y" using the region labels in
    canonical order; anything more scrambled gets a "multi:" label so every
    non-majority example lands in exactly one bucket.
    """
    moved = [i for i in range(len(perm)) if perm[i] != majority[i]]
    if len(moved) == 2:
        i, j = moved
        if perm[i] == majority[j] and perm[j] == majority[i]:
            a, b = sorted((majority[i], majority[j]))
            return f"{labels[a]}<->{labels[b]}"
    return "multi:" + "-".join(labels[perm[i]] for i in range(len(perm)))


def permutation_census(examples: Sequence[tuple],
                       labels: Optional[Sequence[str]] = None) -> PermutationReport:
    """Best-assignment tally over (estimate, target) pairs.

    Majority is the modal permutation (ties to the lexicographically
    smallest); confusions are tallied relative to it, and the report flags
    whether every example kept at least one majority-consistent slot.
    """
    if not examples:
        raise ValueError("permutation census needs at least one example")
    perms = []
    for est, tgt in examples:
        _, perm = pit_loss(np.asarray(est, dtype=np.float64),
                           np.asarray(tgt, dtype=np.float64))
        perms.append(perm)
    r = len(perms[0])
    labels = tuple(labels) if labels is not None else _default_labels(r)

    histogram: Dict[tuple, int] = {}
    for p in perms:
        histogram[p] = histogram.get(p, 0) + 1
    majority = min(histogram, key=lambda p: (-histogram[p], p))

    confusions: Dict[str, int] = {}
    all_have_one = True
    for p in perms:
        if p == majority:
            continue
        key = confusion_key(p, majority, labels)
        confusions[key] = confusions.get(key, 0) + 1
        if not any(p[i] == majority[i] for i in range(r)):
            all_have_one = False

    def label_tuple(p):
        return tuple(labels[p[i]] for i in range(r))

    return PermutationReport(
        majority=label_tuple(majority),
        counts={label_tuple(p): c for p, c in histogram.items()},
        confusions=confusions,
        all_have_one_correct=all_have_one,
        assignments=[label_tuple(p) for p in perms],
        labels=labels,
    )
