"""Shared fixtures.

Training a detector and running patch optimizations are too slow to repeat
per test, so the expensive artifacts are built once and cached on disk under
``.cache/`` keyed by content digests (corpus checksum, config digest, model
weight checksum).  Delete the directory to force a rebuild.
"""

import hashlib
import json
from dataclasses import replace
from pathlib import Path

import pytest

from patchforge import (
    AttackConfig,
    AttackMode,
    CorpusConfig,
    ToyDetectorConfig,
    TrainConfig,
    build_synthetic_corpus,
    load_checkpoint,
    load_patch,
    load_trace,
    run_attack,
    save_checkpoint,
    save_patch,
    save_trace,
    train_toy_detector,
    weight_checksum,
)
from patchforge.config import config_digest

CACHE_DIR = Path(__file__).resolve().parent.parent / ".cache"

CORPUS_CONFIG = CorpusConfig()


def _key(*parts: str) -> str:
    return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


def cached_detector(corpus, train_config=None, detector_config=None):
    train_config = train_config or TrainConfig()
    detector_config = detector_config or ToyDetectorConfig()
    path = CACHE_DIR / ("detector-" + _key(
        corpus.manifest_checksum,
        config_digest(detector_config),
        config_digest(train_config),
    ) + ".pt")
    if path.exists():
        return load_checkpoint(path)
    model = train_toy_detector(corpus, train_config, detector_config)
    CACHE_DIR.mkdir(exist_ok=True)
    save_checkpoint(model, path)
    return model


def cached_attack(model, corpus, config):
    run_dir = CACHE_DIR / ("attack-" + _key(
        weight_checksum(model),
        corpus.manifest_checksum,
        config_digest(config),
    ))
    if (run_dir / "patch.npy").exists():
        return load_patch(run_dir), load_trace(run_dir)
    patch, trace = run_attack(model, corpus, config)
    save_patch(patch, run_dir, meta={"config_digest": config_digest(config)})
    save_trace(trace, run_dir)
    return patch, trace


def cached_json(name: str, *parts: str, build=None):
    """Memoise a JSON-serialisable result of an expensive computation."""
    path = CACHE_DIR / (name + "-" + _key(*parts) + ".json")
    if path.exists():
        return json.loads(path.read_text())
    value = build()
    CACHE_DIR.mkdir(exist_ok=True)
    path.write_text(json.dumps(value))
    return value


def hide_config(seed: int = 0, **overrides) -> AttackConfig:
    return replace(AttackConfig(mode=AttackMode.HIDE, seed=seed), **overrides)


def appear_config(seed: int = 0, **overrides) -> AttackConfig:
    return replace(AttackConfig(mode=AttackMode.APPEAR, seed=seed), **overrides)


@pytest.fixture(scope="session")
def corpus():
    return build_synthetic_corpus(CORPUS_CONFIG)


@pytest.fixture(scope="session")
def model(corpus):
    return cached_detector(corpus)


@pytest.fixture(scope="session")
def hide_patch_template(corpus):
    """Freshly initialized hiding patch, no optimization applied."""
    from patchforge import init_patch
    return init_patch(hide_config(seed=0), corpus)


@pytest.fixture(scope="session")
def hide_run(model, corpus):
    """Default 500-iteration hiding run, seed 0."""
    return cached_attack(model, corpus, hide_config(seed=0))


@pytest.fixture(scope="session")
def appear_run(model, corpus):
    """Default 500-iteration nested appearing run, seed 0."""
    return cached_attack(model, corpus, appear_config(seed=0))
