from __future__ import annotations

import warnings

import numpy as np
import pytest

from neuronedit.config import Settings
from neuronedit.cli import build_model
from neuronedit.corpus import generate_world
from neuronedit.model import ModelConfig, Tokenizer, init_model

# acceptance results collected by tests/test_acceptance.py, printed at the end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def tiny_model(seed: int = 0, n_layers: int = 2, d_model: int = 16, d_ffn: int = 24, vocab: int = 30,
               activation: str = "gelu", n_heads: int = 2, max_seq_len: int = 8):
    tok = Tokenizer([f"w{i}" for i in range(vocab)])
    cfg = ModelConfig(vocab_size=vocab, d_model=d_model, d_ffn=d_ffn, n_layers=n_layers, n_heads=n_heads,
                      max_seq_len=max_seq_len, activation=activation, seed=seed)
    return init_model(cfg, tok)


@pytest.fixture
def small():
    return tiny_model()


@pytest.fixture(scope="session")
def world():
    return generate_world(0)


@pytest.fixture(scope="session")
def trained(world):
    """The default desk-scale model, trained once per session (about a minute)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_model(Settings(), world)


@pytest.fixture(scope="session")
def trained_path(trained, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    trained.save(path)
    return path


@pytest.fixture(scope="session")
def world_path(world, tmp_path_factory):
    path = tmp_path_factory.mktemp("world") / "world.json"
    world.save(path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
