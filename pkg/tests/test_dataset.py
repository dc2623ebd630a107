import json
import math
from pathlib import Path

import numpy as np
import pytest
from scipy.io import wavfile

from regionsep.acoustics import RirCache
from regionsep.autodiff import ConfigError
from regionsep.dataset import (
    CABIN_T60_GRID,
    DatasetConfig,
    FormatError,
    PositionBank,
    RegionSpec,
    SAMPLE_RATE,
    audit_split_disjointness,
    build_dataset,
    cabin_array,
    cabin_regions,
    cabin_room,
    generate_speechlike,
    ingest_speech,
    load_dataset_config,
    load_example,
    load_manifest,
    make_example,
    rms_normalize,
    sample_positions,
)


# ---------------------------------------------------------------- geometry


def test_cabin_regions_fit_inside_room():
    room = cabin_room(0.1)
    for region in cabin_regions():
        region.validate_inside(room)


def test_back_region_is_three_front_volumes():
    regions = {r.label: r for r in cabin_regions()}
    vol = lambda r: np.prod(r.edge_lengths)
    assert vol(regions["D"]) == pytest.approx(0.125)
    assert vol(regions["B"]) == pytest.approx(3 * vol(regions["D"]))


def test_cabin_array_geometry():
    array = cabin_array()
    pos = np.array(array.mic_positions)
    assert len(array) == 3
    assert array.reference_index == 1
    spacing = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    np.testing.assert_allclose(spacing, 0.08)
    np.testing.assert_allclose(pos[1], (0.5, 1.0, 1.0))


def test_region_outside_room_rejected():
    room = cabin_room(0.1)
    bad = RegionSpec("X", (2.9, 1.0, 1.0), (0.5, 0.5, 0.5))
    with pytest.raises(ConfigError):
        bad.validate_inside(room)


# ---------------------------------------------------------------- position bank


def test_bank_counts_and_split_sizes():
    room = cabin_room(0.1)
    bank = sample_positions(room, cabin_regions(), (50, 50, 150), seed=3)
    for label, train, val, test in (("D", 30, 10, 10), ("C", 30, 10, 10), ("B", 90, 30, 30)):
        assert len(bank.points(label, "train")) == train
        assert len(bank.points(label, "val")) == val
        assert len(bank.points(label, "test")) == test
        assert bank.size(label) == train + val + test


def test_sampled_points_lie_inside_their_region():
    room = cabin_room(0.1)
    regions = cabin_regions()
    bank = sample_positions(room, regions, (50, 50, 150), seed=4)
    for region in regions:
        for split in ("train", "val", "test"):
            for p in bank.points(region.label, split):
                assert region.contains(p)


def test_bank_determinism_and_seed_sensitivity():
    room = cabin_room(0.1)
    a = sample_positions(room, cabin_regions(), (50, 50, 150), seed=5)
    b = sample_positions(room, cabin_regions(), (50, 50, 150), seed=5)
    c = sample_positions(room, cabin_regions(), (50, 50, 150), seed=6)
    assert a.positions == b.positions
    assert a.positions != c.positions


def test_bank_splits_disjoint():
    room = cabin_room(0.1)
    bank = sample_positions(room, cabin_regions(), (50, 50, 150), seed=7)
    for label in ("D", "C", "B"):
        train = set(bank.points(label, "train"))
        assert train.isdisjoint(bank.points(label, "test"))
        assert train.isdisjoint(bank.points(label, "val"))


def test_bank_json_round_trip():
    room = cabin_room(0.1)
    bank = sample_positions(room, cabin_regions(), (10, 10, 10), seed=8)
    clone = PositionBank.from_json_dict(json.loads(json.dumps(bank.to_json_dict())))
    assert clone.positions == bank.positions


# ---------------------------------------------------------------- speech ingestion


def test_ingest_pcm16_square_wave(tmp_path):
    wav = tmp_path / "square.wav"
    data = np.tile(np.array([32767, -32768], dtype=np.int16), 100)
    wavfile.write(wav, SAMPLE_RATE, data)
    utt = ingest_speech(wav)
    assert utt.utterance_id == "square"
    assert np.max(utt.signal) == pytest.approx(1.0, abs=1 / 32768)
    assert np.min(utt.signal) == pytest.approx(-1.0, abs=1 / 32768)


def test_ingest_float32_round_trip(tmp_path):
    wav = tmp_path / "f32.wav"
    sig = (np.sin(np.linspace(0, 20, 400)) * 0.5).astype(np.float32)
    wavfile.write(wav, SAMPLE_RATE, sig)
    utt = ingest_speech(wav)
    np.testing.assert_allclose(utt.signal, sig.astype(np.float64))


def test_ingest_rejects_wrong_rate(tmp_path):
    wav = tmp_path / "slow.wav"
    wavfile.write(wav, 8000, np.zeros(100, dtype=np.int16))
    with pytest.raises(FormatError, match="8000"):
        ingest_speech(wav)


def test_ingest_rejects_stereo_and_odd_dtypes(tmp_path):
    stereo = tmp_path / "st.wav"
    wavfile.write(stereo, SAMPLE_RATE, np.zeros((100, 2), dtype=np.int16))
    with pytest.raises(FormatError, match="channels"):
        ingest_speech(stereo)
    i32 = tmp_path / "i32.wav"
    wavfile.write(i32, SAMPLE_RATE, np.zeros(100, dtype=np.int32))
    with pytest.raises(FormatError, match="dtype"):
        ingest_speech(i32)


# ---------------------------------------------------------------- synthetic speech


def spectral_flatness(x):
    psd = np.abs(np.fft.rfft(x)) ** 2 + 1e-20
    return float(np.exp(np.mean(np.log(psd))) / np.mean(psd))


def test_speechlike_shape_and_level():
    utt = generate_speechlike(0)
    assert len(utt.signal) == 4 * SAMPLE_RATE
    assert np.max(np.abs(utt.signal)) == pytest.approx(0.95)


def test_speechlike_determinism():
    a = generate_speechlike(11)
    b = generate_speechlike(11)
    c = generate_speechlike(12)
    assert np.array_equal(a.signal, b.signal)
    assert not np.array_equal(a.signal, c.signal)


def test_speechlike_flatness_between_tone_and_noise():
    n = 4 * SAMPLE_RATE
    tone = np.sin(2 * np.pi * 220 * np.arange(n) / SAMPLE_RATE)
    noise = np.random.default_rng(0).standard_normal(n)
    for seed in range(5):
        flat = spectral_flatness(generate_speechlike(seed).signal)
        assert spectral_flatness(tone) < flat < spectral_flatness(noise)


def test_rms_normalize():
    sig = np.random.default_rng(1).standard_normal(1000)
    out = rms_normalize(sig, -20.0)
    assert np.sqrt(np.mean(out ** 2)) == pytest.approx(10 ** (-1.0), rel=1e-12)
    with pytest.raises(ValueError):
        rms_normalize(np.zeros(10), -20.0)


# ---------------------------------------------------------------- mixing


@pytest.fixture(scope="module")
def small_scene(tmp_path_factory):
    """Cached array RIRs for one position per region at t60=0.06."""
    cache = RirCache(tmp_path_factory.mktemp("rirs"))
    room = cabin_room(0.06)
    array = cabin_array()
    positions = {"D": (1.25, 0.5, 1.0), "C": (1.25, 1.5, 1.0), "B": (2.25, 1.0, 1.0)}
    rirs = {lbl: [cache.get(room, pos, mic) for mic in array.mic_positions]
            for lbl, pos in positions.items()}
    return rirs, positions


def utterances_for(seed0=100):
    return {lbl: generate_speechlike(seed0 + i) for i, lbl in enumerate(("D", "C", "B"))}


def test_fc_mixture_is_sum_of_region_images(small_scene):
    rirs, positions = small_scene
    ex = make_example(rirs, utterances_for(), positions, 0.06, "FC", seed=1,
                      keep_images=True)
    assert ex.mics.shape == (3, 4 * SAMPLE_RATE)
    assert ex.targets.shape == (3, 4 * SAMPLE_RATE)
    residual = np.max(np.abs(ex.mics - ex.images.sum(axis=0)))
    assert residual < 1e-6
    np.testing.assert_allclose(ex.targets, ex.images[:, 1, :])


def test_wn_snr_within_drawn_band(small_scene):
    rirs, positions = small_scene
    fc = make_example(rirs, utterances_for(), positions, 0.06, "FC", seed=2)
    wn = make_example(rirs, utterances_for(), positions, 0.06, "WN", seed=2)
    noise = wn.mics - fc.mics
    measured = 10 * np.log10(np.sum(fc.mics ** 2) / np.sum(noise ** 2))
    assert 20.0 <= wn.metadata["snr_db"] <= 30.0
    assert measured == pytest.approx(wn.metadata["snr_db"], abs=0.01)
    np.testing.assert_array_equal(wn.targets, fc.targets)  # targets stay clean


def test_po_onsets_exactly_two_seconds_apart(small_scene):
    rirs, positions = small_scene
    po = make_example(rirs, utterances_for(), positions, 0.06, "PO", seed=3)
    onsets = sorted(po.metadata["onsets"].values())
    assert onsets == [0, 2 * SAMPLE_RATE, 4 * SAMPLE_RATE]
    assert po.mics.shape[1] == 8 * SAMPLE_RATE
    for r, lbl in enumerate(("D", "C", "B")):
        start = po.metadata["onsets"][lbl]
        assert not po.targets[r, :start].any()  # silent before its onset
        assert po.targets[r, start:].any()


def test_variants_share_leveled_content(small_scene):
    rirs, positions = small_scene
    fc = make_example(rirs, utterances_for(), positions, 0.06, "FC", seed=4)
    po = make_example(rirs, utterances_for(), positions, 0.06, "PO", seed=4)
    # same per-region leveling: the first onset region matches FC's image
    first = min(po.metadata["onsets"], key=po.metadata["onsets"].get)
    r = ("D", "C", "B").index(first)
    t = 4 * SAMPLE_RATE
    np.testing.assert_allclose(po.targets[r, :t], fc.targets[r], atol=1e-12)


def test_make_example_validation(small_scene):
    rirs, positions = small_scene
    with pytest.raises(ConfigError, match="variant"):
        make_example(rirs, utterances_for(), positions, 0.06, "XX", seed=5)
    partial = dict(utterances_for())
    del partial["B"]
    with pytest.raises(ConfigError, match="missing"):
        make_example(rirs, partial, positions, 0.06, "FC", seed=5)


def test_make_example_determinism(small_scene):
    rirs, positions = small_scene
    a = make_example(rirs, utterances_for(), positions, 0.06, "WN", seed=6)
    b = make_example(rirs, utterances_for(), positions, 0.06, "WN", seed=6)
    assert np.array_equal(a.mics, b.mics)
    assert a.metadata == b.metadata


# ---------------------------------------------------------------- dataset build


def tiny_config(out_dir, **kw):
    defaults = dict(out_dir=str(out_dir), seed=9, train_count=4, val_count=2,
                    test_count=2, position_counts=(10, 10, 30),
                    t60_grid=(0.06, 0.08))
    defaults.update(kw)
    return DatasetConfig(**defaults)


@pytest.fixture(scope="module")
def tiny_build(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    config = tiny_config(out)
    manifests = build_dataset(config)
    return out, config, manifests


def test_build_manifest_lengths(tiny_build):
    _, _, manifests = tiny_build
    assert sorted(manifests) == ["test_fc", "test_po", "test_wn", "train", "val"]
    assert len(manifests["train"]) == 4
    assert len(manifests["val"]) == 2
    for name in ("test_fc", "test_wn", "test_po"):
        assert len(manifests[name]) == 2


def test_build_files_and_round_trip(tiny_build):
    out, _, manifests = tiny_build
    rec = manifests["train"][0]
    ex = load_example(out, rec)
    assert ex.mics.shape == (3, 4 * SAMPLE_RATE)
    assert ex.targets.shape == (3, 4 * SAMPLE_RATE)
    po = load_example(out, manifests["test_po"][0])
    assert po.mics.shape == (3, 8 * SAMPLE_RATE)


def test_build_t60s_from_grid(tiny_build):
    _, config, manifests = tiny_build
    for records in manifests.values():
        for rec in records:
            assert rec["t60"] in config.t60_grid


def test_build_split_disjointness_audit(tiny_build):
    _, _, manifests = tiny_build
    assert audit_split_disjointness(manifests) == {}


def test_test_variants_share_content(tiny_build):
    _, _, manifests = tiny_build
    for i in range(2):
        fc, wn, po = (manifests[n][i] for n in ("test_fc", "test_wn", "test_po"))
        assert fc["positions"] == wn["positions"] == po["positions"]
        assert fc["utterance_ids"] == wn["utterance_ids"] == po["utterance_ids"]
        assert fc["t60"] == wn["t60"] == po["t60"]


def test_manifest_readable_from_disk(tiny_build):
    out, _, manifests = tiny_build
    assert load_manifest(out, "train") == manifests["train"]


def test_rebuild_is_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    build_dataset(tiny_config(a, train_count=2, val_count=1, test_count=1))
    build_dataset(tiny_config(b, train_count=2, val_count=1, test_count=1))
    for rel in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
        if rel.parts[0] == "rir_cache":
            continue  # cache keys hash identically but files are checked below
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    assert sorted(p.name for p in (a / "rir_cache").glob("*")) == \
        sorted(p.name for p in (b / "rir_cache").glob("*"))


def test_config_validation_and_toml(tmp_path):
    with pytest.raises(ConfigError):
        DatasetConfig(out_dir="x", t60_grid=(0.2,))
    with pytest.raises(ConfigError):
        DatasetConfig(out_dir="x", test_variants=("FC", "??"))

    toml = tmp_path / "ds.toml"
    toml.write_text(
        '[dataset]\nout_dir = "build"\nseed = 5\ntrain_count = 3\n'
        'val_count = 1\ntest_count = 1\nt60_grid = [0.06, 0.07]\n')
    config = load_dataset_config(toml)
    assert config.seed == 5
    assert config.t60_grid == (0.06, 0.07)

    bad = tmp_path / "bad.toml"
    bad.write_text('[dataset]\nout_dir = "x"\nbogus = 1\n')
    with pytest.raises(ConfigError, match="bogus"):
        load_dataset_config(bad)


def test_insufficient_utterance_pool(tmp_path):
    pool = tmp_path / "utts"
    pool.mkdir()
    wavfile.write(pool / "a.wav", SAMPLE_RATE, np.zeros(100, dtype=np.int16))
    with pytest.raises(ConfigError, match="shortfall"):
        build_dataset(tiny_config(tmp_path / "out", utterance_dir=str(pool)))
