from __future__ import annotations

import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuronedit.attribution import (AttributionConfig, AttributionMatrix, attribute, attribute_lps, attribute_mpc,
                                    attribute_psa, subject_position)
from neuronedit.errors import ConfigError, DataError
from neuronedit.model import forward

from conftest import tiny_model
from oracles import hidden_states, neuron_score


def _cfg(strategy="lps", lam=10.0, layers=(0, 1)):
    return AttributionConfig(lam=lam, layers=tuple(layers), strategy=strategy)


@pytest.mark.parametrize("strategy", ["lps", "psa", "mpc"])
def test_matches_oracle_on_random_cases(strategy):
    rng = np.random.default_rng(7)
    for case in range(50):
        m = tiny_model(seed=case, d_ffn=12, max_seq_len=6)
        prompt = rng.integers(0, m.config.vocab_size, size=int(rng.integers(1, 6))).tolist()
        y = int(rng.integers(m.config.vocab_size))
        layer = int(rng.integers(m.config.n_layers))
        lam = float(rng.choice([1.0, 10.0, 30.0]))
        A = attribute(m, [prompt], [y], _cfg(strategy, lam, [layer]))[layer]
        x = hidden_states(m.params, m.config, prompt)[layer]
        for i in range(m.config.d_ffn):
            ref = neuron_score(m.params, m.config, layer, x, y, i, lam, strategy)
            assert abs(A.scores[0, i] - ref) < 1e-6, (case, i)


@pytest.mark.parametrize("strategy", ["lps", "psa"])
def test_vanishing_lambda_gives_vanishing_scores(small, strategy):
    A = attribute(small, [[1, 2, 3], [4]], [5, 6], _cfg(strategy, lam=1e-12))
    bound = 1e-6 if strategy == "lps" else 1e-9
    assert all(np.abs(a.scores).max() < bound for a in A.values())


def test_aligned_value_vector_scores_positive():
    m = tiny_model(seed=3, n_layers=1)
    prompt, y, i = [2, 5, 7], 11, 4
    x = forward(m, prompt, capture=[0]).hidden[0][-1]
    m.params["layers.0.ffn.w_in"][i] = (2.0 * x / (x @ x)).astype(np.float32)   # k.x = 2, gelu(2) > 0
    m.params["layers.0.ffn.w_out"][:, i] = 0.7 * m.unembed[y]
    A = attribute_lps(m, [prompt], [y], _cfg("lps", layers=[0]))[0]
    assert A.scores[0, i] > 0


def test_psa_and_lps_signs_agree(small):
    rng = np.random.default_rng(0)
    prompts = [rng.integers(0, 30, size=4).tolist() for _ in range(10)]
    ys = rng.integers(0, 30, size=10).tolist()
    L = attribute(small, prompts, ys, _cfg("lps"))
    P = attribute(small, prompts, ys, _cfg("psa"))
    for l in L:
        both = (np.abs(L[l].scores) > 1e-9) & (np.abs(P[l].scores) > 1e-9)
        assert np.array_equal(np.sign(L[l].scores[both]), np.sign(P[l].scores[both]))


def test_mpc_zero_activation_and_orthogonal_value():
    m = tiny_model(seed=5, n_layers=1, activation="relu")
    prompt, y = [1, 2], 3
    x = forward(m, prompt, capture=[0]).hidden[0][-1]
    m.params["layers.0.ffn.w_in"][0] = (-x / (x @ x)).astype(np.float32)  # relu(-1) = 0
    e = m.unembed[y].astype(np.float64)
    v = np.random.default_rng(0).standard_normal(e.size)
    m.params["layers.0.ffn.w_out"][:, 1] = (v - (v @ e) / (e @ e) * e).astype(np.float32)
    m.params["layers.0.ffn.w_out"][:, 1] -= (m.params["layers.0.ffn.w_out"][:, 1] @ m.unembed[y]) / (
        m.unembed[y] @ m.unembed[y]) * m.unembed[y]
    A = attribute_mpc(m, [prompt], [y], _cfg("mpc", layers=[0]))[0]
    assert A.scores[0, 0] == 0.0
    assert abs(A.scores[0, 1]) < 1e-7


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 500))
def test_lps_is_linear_in_small_lambda(seed):
    m = tiny_model(seed=seed)
    prompt, y = [seed % 30, (seed * 3) % 30, 1], (seed * 7) % 30
    a = attribute(m, [prompt], [y], _cfg("lps", lam=1e-3, layers=[1]))[1].scores
    b = attribute(m, [prompt], [y], _cfg("lps", lam=5e-4, layers=[1]))[1].scores
    big = np.abs(b) > 1e-7
    assert np.all(np.abs(a[big] / (2 * b[big]) - 1) < 0.05)


@pytest.mark.parametrize("strategy", ["lps", "psa", "mpc"])
def test_batch_consistency(small, strategy):
    prompts = [[1, 2, 3], [4, 5], [6], [7, 8, 9, 10]]
    ys = [1, 2, 3, 4]
    batch = attribute(small, prompts, ys, _cfg(strategy))
    for j, (p, y) in enumerate(zip(prompts, ys)):
        one = attribute(small, [p], [y], _cfg(strategy))
        for l in batch:
            assert batch[l].scores[j].tobytes() == one[l].scores[0].tobytes()


def test_scores_are_finite_even_for_extreme_lambda(small):
    A = attribute(small, [[1, 2]], [3], _cfg("lps", lam=1e6))
    P = attribute(small, [[1, 2]], [3], _cfg("psa", lam=1e6))
    assert all(np.isfinite(a.scores).all() for a in list(A.values()) + list(P.values()))


def test_errors(small):
    with pytest.raises(DataError, match="layer"):
        attribute(small, [[1]], [1], _cfg(layers=[7]))
    with pytest.raises(DataError, match="target"):
        attribute(small, [[1]], [99], _cfg())
    with pytest.raises(ConfigError):
        attribute(small, [[1]], [1], AttributionConfig(lam=0.0, layers=(0,)))
    with pytest.raises(ConfigError):
        attribute(small, [[1]], [1], AttributionConfig(strategy="ig", layers=(0,)))
    with pytest.raises(ConfigError):
        attribute_mpc(small, [[1]], [1], _cfg("lps"))
    with pytest.raises(DataError):
        attribute(small, [], [], _cfg())
    with pytest.raises(DataError):
        attribute(small, [[]], [1], _cfg())
    with pytest.raises(DataError, match="subject"):
        attribute(small, [[1]], [1], AttributionConfig(layers=(0,), position="last_subject_token"))


def test_subject_position_override(small):
    prompt = [4, 9, 2, 3]
    pos = subject_position(prompt, 9)
    assert pos == 1
    a = attribute(small, [prompt], [5], AttributionConfig(layers=(0,), position="last_subject_token"),
                  positions=[pos])[0]
    b = attribute(small, [prompt[:2]], [5], _cfg(layers=[0]))[0]
    assert np.allclose(a.scores, b.scores, atol=1e-9)
    with pytest.raises(DataError):
        subject_position(prompt, 29)


def test_matrix_exports_round_trip(small, tmp_path):
    A = attribute(small, [[1, 2], [3]], [4, 5], _cfg(), prompt_ids=["a", "b"])[0]
    A.to_csv(tmp_path / "a.csv")
    back = AttributionMatrix.from_csv(tmp_path / "a.csv", layer=0)
    assert back.prompt_ids == ["a", "b"] and np.array_equal(back.scores, A.scores)
    blob = AttributionMatrix.from_bytes(A.to_bytes())
    assert blob.layer == 0 and blob.scores.tobytes() == A.scores.tobytes() and blob.prompt_ids == ["a", "b"]
    with pytest.raises(DataError):
        AttributionMatrix(0, np.zeros((2, 3)), ["only-one"])


def test_mpc_is_cheaper_than_lps(trained, world):
    tok = trained.tokenizer
    prompts = [tok.encode(world.render(s, r, 0)) for s, r, _ in world.facts[:40]]
    ys = [tok.id(o) for _, _, o in world.facts[:40]]
    cfg = AttributionConfig()
    best = {}
    for _ in range(3):
        for strat in ("mpc", "lps"):
            t0 = time.perf_counter()
            attribute(trained, prompts, ys, AttributionConfig(strategy=strat, layers=cfg.layers))
            best[strat] = min(best.get(strat, np.inf), time.perf_counter() - t0)
    assert best["mpc"] < 0.5 * best["lps"]
