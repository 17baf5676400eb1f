"""Session-scoped deterministic corpora shared across the test modules.

Everything here is derived from fixed seeds, so any test that hashes an
artifact built from these fixtures sees the same bytes on every run.
"""

from __future__ import annotations

import sys

import pytest

from attrib_se.corpus import load_manifest, load_noise_records
from attrib_se.fixtures import (
    build_noise_fixture,
    build_speech_fixture,
    foreign_text_banks,
)
from attrib_se.mixer import simulate_dataset
from attrib_se.sampler import NoiseSubset, build_full_synthetic_plan
from attrib_se.synth import MockSynthesizer, execute_plan


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    build_speech_fixture(
        root / "speech", m=100, n_speakers=10, seed=7, voice_salt="studio"
    )
    build_speech_fixture(
        root / "holdout", m=20, n_speakers=10, seed=7,
        voice_salt="studio", text_offset=500,
    )
    build_noise_fixture(root / "noise", seed=9)
    return root


@pytest.fixture(scope="session")
def speech_manifest(fixture_root):
    return load_manifest(fixture_root / "speech" / "manifest.jsonl")


@pytest.fixture(scope="session")
def holdout_manifest(fixture_root):
    return load_manifest(fixture_root / "holdout" / "manifest.jsonl")


@pytest.fixture(scope="session")
def noise_pool(fixture_root):
    return load_noise_records(fixture_root / "noise" / "records.jsonl")


@pytest.fixture(scope="session")
def foreign_texts():
    return foreign_text_banks()


def make_subset(records, types):
    chosen = [r for r in records if r.type_label in types]
    return NoiseSubset(
        record_ids=[r.id for r in chosen],
        total_duration=sum(r.duration for r in chosen),
        type_labels=frozenset(r.type_label for r in chosen),
        target_t=sum(r.duration for r in chosen),
        target_k=len(types),
        seed=0,
    )


@pytest.fixture(scope="session")
def wb_subset(noise_pool):
    """White + babble, the learning-smoke noise recipe."""
    return make_subset(noise_pool, ("white", "babble"))


@pytest.fixture(scope="session")
def synthetic_train(fixture_root, speech_manifest):
    plan = build_full_synthetic_plan(speech_manifest, seed=11)
    return execute_plan(
        plan, speech_manifest, fixture_root / "syn_train",
        MockSynthesizer(voice_salt="studio"), workers=4,
    )


@pytest.fixture(scope="session")
def synthetic_holdout(fixture_root, holdout_manifest):
    plan = build_full_synthetic_plan(holdout_manifest, seed=12)
    return execute_plan(
        plan, holdout_manifest, fixture_root / "syn_holdout",
        MockSynthesizer(voice_salt="studio"), workers=4,
    )


@pytest.fixture(scope="session")
def paired_train(fixture_root, synthetic_train, wb_subset, noise_pool):
    return simulate_dataset(
        synthetic_train, wb_subset, noise_pool, (-5.0, 10.0), 101,
        fixture_root / "pairs_train",
    )


@pytest.fixture(scope="session")
def paired_holdout(fixture_root, synthetic_holdout, wb_subset, noise_pool):
    return simulate_dataset(
        synthetic_holdout, wb_subset, noise_pool, (-5.0, 10.0), 202,
        fixture_root / "pairs_holdout",
    )


@pytest.fixture(scope="session")
def mini_root(tmp_path_factory):
    """A 12-utterance corpus for tests that train models repeatedly."""
    root = tmp_path_factory.mktemp("mini")
    build_speech_fixture(root / "speech", m=12, n_speakers=4, seed=21,
                         voice_salt="studio")
    build_noise_fixture(root / "noise", seed=22)
    return root


@pytest.fixture(scope="session")
def mini_paired(mini_root):
    manifest = load_manifest(mini_root / "speech" / "manifest.jsonl")
    pool = load_noise_records(mini_root / "noise" / "records.jsonl")
    subset = make_subset(pool, ("white", "babble", "traffic", "hum"))
    return simulate_dataset(
        manifest, subset, pool, (-5.0, 10.0), 77, mini_root / "pairs"
    )


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance pass/fail lines after the run."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
