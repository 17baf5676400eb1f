"""SNR-controlled mixing, mix ledgers, and streamed pair generation."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attrib_se.audioio import read_wav
from attrib_se.mixer import (
    MixError,
    MixSpec,
    load_paired_dataset,
    measured_snr_db,
    mix_pair,
    pair_stream,
    prepare_noise,
    remix_from_spec,
    simulate_dataset,
    snr_gain,
)

RNG = np.random.default_rng(1234)
SPEECH = RNG.normal(0.0, 0.1, 8000)
NOISE = RNG.normal(0.0, 0.05, 24000)


def test_snr_gain_closed_form():
    snr_db = 7.5
    g = snr_gain(SPEECH, NOISE, snr_db)
    p_speech = np.mean(SPEECH**2)
    p_noise = np.mean(NOISE[: len(SPEECH)] ** 2)
    expect = np.sqrt(p_speech / (p_noise * 10 ** (snr_db / 10)))
    assert abs(g - expect) < 1e-12
    realized = 10 * np.log10(p_speech / np.mean((g * NOISE[: len(SPEECH)]) ** 2))
    assert abs(realized - snr_db) < 1e-9


def test_snr_gain_silence_errors():
    with pytest.raises(MixError, match="silent speech"):
        snr_gain(np.zeros(100), NOISE, 0.0)
    with pytest.raises(MixError, match="silent noise"):
        snr_gain(SPEECH, np.zeros(100), 0.0)
    with pytest.raises(MixError, match="empty"):
        snr_gain(np.array([]), NOISE, 0.0)


def test_prepare_noise_contiguous_crop():
    out = prepare_noise(NOISE, 5000, 123)
    np.testing.assert_array_equal(out, NOISE[123:5123])


def test_prepare_noise_circular_tiling():
    short = NOISE[:3000]
    out = prepare_noise(short, 8000, 2500)
    idx = (2500 + np.arange(8000)) % 3000
    np.testing.assert_array_equal(out, short[idx])


@settings(max_examples=25, derandomize=True, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=10_000),
    snr_db=st.floats(min_value=-10.0, max_value=20.0),
)
def test_mix_pair_hits_requested_snr(seed, snr_db):
    rng = np.random.default_rng(seed)
    speech = rng.normal(0.0, 0.1, int(rng.integers(1000, 16000)))
    noise = rng.normal(0.0, 0.08, int(rng.integers(1000, 40000)))
    noisy, clean, spec = mix_pair(speech, noise, snr_db, seed)
    assert abs(measured_snr_db(noisy, clean) - snr_db) < 1e-9
    assert spec.snr_db == snr_db


def test_clipping_rescale_preserves_snr():
    loud = 0.95 * np.sin(2 * np.pi * 100 * np.arange(8000) / 16000)
    noisy, clean, spec = mix_pair(loud, NOISE, -5.0, seed=3)
    assert spec.rescale < 1.0
    assert abs(np.max(np.abs(noisy)) - 0.9) < 1e-12
    assert abs(measured_snr_db(noisy, clean) - (-5.0)) < 1e-9
    # Clean is scaled by the same factor, never independently.
    np.testing.assert_allclose(clean, loud * spec.rescale, rtol=0, atol=1e-15)


def test_mix_pair_deterministic():
    a = mix_pair(SPEECH, NOISE, 4.0, seed=9)
    b = mix_pair(SPEECH, NOISE, 4.0, seed=9)
    np.testing.assert_array_equal(a[0], b[0])
    assert a[2] == b[2]
    c = mix_pair(SPEECH, NOISE, 4.0, seed=10)
    assert c[2].noise_offset != a[2].noise_offset


def test_remix_from_spec_bit_exact():
    noisy, clean, spec = mix_pair(SPEECH, NOISE, 2.0, seed=5, speech_id="s", noise_id="n")
    noisy2, clean2 = remix_from_spec(SPEECH, NOISE, spec)
    np.testing.assert_array_equal(noisy, noisy2)
    np.testing.assert_array_equal(clean, clean2)


def test_mixspec_validation_and_json():
    spec = MixSpec("s", "n", 3.0, 17, 0.5, 42, 0.9)
    assert MixSpec.from_json(spec.to_json()) == spec
    with pytest.raises(MixError, match="noise_gain"):
        MixSpec("s", "n", 3.0, 17, 0.0, 42)
    with pytest.raises(MixError, match="finite"):
        MixSpec("s", "n", float("inf"), 17, 0.5, 42)


def test_simulate_dataset_layout_and_reload(mini_paired):
    root = mini_paired.root
    reloaded = load_paired_dataset(root)
    assert reloaded.pairs == mini_paired.pairs
    assert reloaded.speech_manifest_id == mini_paired.speech_manifest_id
    assert reloaded.snr_range == mini_paired.snr_range
    assert len(mini_paired) == 12


def test_simulated_pairs_hold_their_snr(mini_paired):
    from pathlib import Path

    root = Path(mini_paired.root)
    for noisy_rel, clean_rel, spec in mini_paired.pairs:
        noisy = read_wav(root / noisy_rel)[0]
        clean = read_wav(root / clean_rel)[0]
        # PCM16 rounding is the only error source left at this point.
        assert abs(measured_snr_db(noisy, clean) - spec.snr_db) < 0.01


def test_simulate_refuses_existing_dir(mini_paired, noise_pool, speech_manifest, wb_subset):
    with pytest.raises(MixError, match="exists"):
        simulate_dataset(
            speech_manifest, wb_subset, noise_pool, (-5.0, 10.0), 1,
            mini_paired.root,
        )


def test_pair_stream_epoch_semantics(mini_root, noise_pool, speech_manifest, wb_subset):
    first = list(pair_stream(speech_manifest, wb_subset, noise_pool, (-5, 10), 55, 0))
    again = list(pair_stream(speech_manifest, wb_subset, noise_pool, (-5, 10), 55, 0))
    assert [s for _, _, s in first] == [s for _, _, s in again]
    assert [s.speech_id for _, _, s in first] == [r.id for r in speech_manifest.records]

    second = list(pair_stream(speech_manifest, wb_subset, noise_pool, (-5, 10), 55, 1))
    # Clean record order is pinned; the noise draws are not.
    assert [s.speech_id for _, _, s in second] == [s.speech_id for _, _, s in first]
    assert [s for _, _, s in second] != [s for _, _, s in first]
    for noisy, clean, spec in first[:5]:
        assert abs(measured_snr_db(noisy, clean) - spec.snr_db) < 1e-9


def test_pair_stream_snr_range_check(noise_pool, speech_manifest, wb_subset):
    with pytest.raises(MixError, match="exceeds upper"):
        list(pair_stream(speech_manifest, wb_subset, noise_pool, (10, -5), 0, 0))
