"""Fixtures commonly used by tests."""
import json

import pytest
from common import SMOKE_CONFIG, TINY_CONFIG

from mitkd.corpus import MarkovChain, default_suite, generate_corpus, generate_task
from mitkd.model import init_model
from mitkd.pipeline import OUTPUT_ENV


@pytest.fixture(name="chain", scope="session")
def chain_fixture():
    """Chain shared by the corpus and task fixtures."""
    return MarkovChain.from_seed(11)


@pytest.fixture(name="corpus")
def corpus_fixture(chain):
    return generate_corpus(3, 256, 16, chain)


@pytest.fixture(name="suite", scope="session")
def suite_fixture(chain):
    """Two in-family and one out-family task on sequences of 16 tokens."""
    return default_suite(chain, 5, num_in_family=2, num_out_family=1, seq_len=16)


@pytest.fixture(name="datasets", scope="session")
def datasets_fixture(suite, chain):
    return {spec.name: generate_task(spec, 48, 24, chain) for spec in suite.tasks}


@pytest.fixture(name="tiny_model")
def tiny_model_fixture():
    return init_model(TINY_CONFIG, 0)


@pytest.fixture(name="smoke_config")
def smoke_config_fixture(tmp_path, monkeypatch):
    """The smoke experiment config, writing below ``tmp_path``."""
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    data = json.loads(SMOKE_CONFIG.read_text(encoding="utf-8"))
    data["output_dir"] = str(tmp_path / "runs")
    path = tmp_path / "smoke.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path
