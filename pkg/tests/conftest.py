"""Shared fixtures: a band-separable two-region set and a mini dataset build."""

import numpy as np
import pytest

from regionsep.dataset import DatasetConfig, build_dataset

MIX_GAINS = np.array([[1.0, 0.35], [0.35, 1.0]])
REFERENCE_MIC = 1


def band_source(rng, length: int, kind: str) -> np.ndarray:
    """Unit-RMS noise confined to a low or high band."""
    x = rng.standard_normal(length + 16)
    if kind == "low":
        x = np.convolve(x, np.ones(12) / 12.0, mode="same")
    else:
        x = np.diff(x, prepend=0.0)
    x = x[:length]
    return x / (np.sqrt(np.mean(x * x)) + 1e-12)


def make_separability_set(count: int, seed: int, length: int = 512) -> list:
    """Two spectrally disjoint regions through a fixed 2-mic mixing matrix.

    Region D is always the low band and C the high band, so a model can
    learn a stable region-to-output mapping; targets are the source images
    at the reference mic.  Returns (mixture, targets) float32 pairs.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0x5E9, seed]))
    examples = []
    for _ in range(count):
        s = np.stack([band_source(rng, length, "low"),
                      band_source(rng, length, "high")])
        mixture = MIX_GAINS @ s
        targets = s * MIX_GAINS[REFERENCE_MIC][:, None]
        examples.append((mixture.astype(np.float32), targets.astype(np.float32)))
    return examples


@pytest.fixture(scope="session")
def separability_sets():
    """(train, val) splits of the two-region band set."""
    return make_separability_set(24, seed=11), make_separability_set(24, seed=12)


@pytest.fixture(scope="session")
def mini_build(tmp_path_factory):
    """Smallest full dataset build: 3/2/2 examples, one T60, all variants."""
    out = tmp_path_factory.mktemp("mini_build")
    config = DatasetConfig(out_dir=str(out), seed=9, train_count=3, val_count=2,
                           test_count=2, position_counts=(10, 10, 30),
                           t60_grid=(0.06,))
    manifests = build_dataset(config)
    return out, config, manifests
