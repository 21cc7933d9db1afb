import numpy as np
import pytest

from mars.pipeline.cache import Workspace, preprocess_cache
from mars.pipeline.config import RunConfig, from_entries, parse_entries, to_text
from mars.pipeline.manifest import ingest
from mars.pipeline.runs import run_generate, run_train_ar, run_train_tokenizer
from mars.pipeline.synth import build_fixture_dataset


def tiny_config(manifest_path, seed=0) -> RunConfig:
    entries = parse_entries(to_text(RunConfig()))
    entries.update({
        "run.seed": str(seed),
        "data.manifest": str(manifest_path),
        "train.tokenizer_steps": "30",
        "train.ar_steps": "30",
        "train.batch": "4",
        "train.checkpoint_every": "10",
        "metrics.classifier_steps": "60",
        "metrics.ndb_k": "4",
        "metrics.min_distribution_samples": "3",
    })
    return from_entries(entries)


@pytest.fixture(scope="session")
def fixture_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    manifest = build_fixture_dataset(root, count=12, seed=3)
    return manifest


@pytest.fixture(scope="session")
def trained_workspace(tmp_path_factory, fixture_dataset):
    """A small but fully trained workspace shared by pipeline and service
    tests: cache, both checkpoints, and four generated clips."""
    out = tmp_path_factory.mktemp("workspace")
    cfg = tiny_config(fixture_dataset)
    ws = Workspace(out, cfg)
    manifest = ingest(fixture_dataset, cfg)
    preprocess_cache(ws, manifest)
    run_train_tokenizer(ws, manifest)
    run_train_ar(ws, manifest)
    run_generate(ws, n=4, condition=-1, seed=11)
    return ws


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
