from __future__ import annotations

import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuronedit.errors import ConfigError, DataError, NumericalError
from neuronedit.model import (FactCorpus, ModelCheckpoint, ModelConfig, Tokenizer, fact_recall, ffn_matrix,
                              ffn_neuronwise, forward, forward_batch, init_model, param_names, predict, train_facts)

from conftest import tiny_model
from oracles import hidden_states


def test_init_is_deterministic():
    a, b = tiny_model(seed=1), tiny_model(seed=1)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert a.to_bytes() == b.to_bytes()


def test_different_seeds_differ():
    a, b = tiny_model(seed=1), tiny_model(seed=2)
    assert any(not np.array_equal(a.params[k], b.params[k]) for k in a.params)


@pytest.mark.parametrize("field,value", [("vocab_size", 0), ("vocab_size", 1), ("d_model", 0), ("n_heads", 3),
                                         ("activation", "tanh"), ("seed", -1)])
def test_invalid_config_rejected(field, value):
    kw = dict(vocab_size=10, d_model=8, n_heads=2)
    kw[field] = value
    with pytest.raises(ConfigError):
        init_model(ModelConfig(**kw))


def test_tokenizer_is_bijective_and_rejects_oov():
    tok = Tokenizer(["<pad>", "a", "b"])
    assert [tok.id(t) for t in tok.tokens] == [0, 1, 2]
    assert tok.decode(tok.encode("a b a")) == "a b a"
    with pytest.raises(DataError, match="zz"):
        tok.encode("a zz")
    with pytest.raises(DataError):
        Tokenizer(["a", "a"])


def test_checkpoint_round_trip_is_bit_exact(tmp_path, small):
    small.meta["note"] = {"x": 1}
    path = tmp_path / "m.ckpt"
    small.save(path)
    back = ModelCheckpoint.load(path)
    assert back.config == small.config and back.tokenizer == small.tokenizer and back.meta == small.meta
    for k in param_names(small.config):
        assert back.params[k].dtype == np.float32
        assert back.params[k].tobytes() == small.params[k].tobytes()
    assert back.digest() == small.digest()


def test_checkpoint_rejects_foreign_bytes():
    from neuronedit.tensorio import TensorFormatError
    with pytest.raises(TensorFormatError):
        ModelCheckpoint.from_bytes(b"not a checkpoint at all")


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), relu=st.booleans())
def test_key_value_form_matches_matrix_form(seed, relu):
    m = tiny_model(seed=seed % 1000, activation="relu" if relu else "gelu")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(m.config.d_model)
    for l in range(m.config.n_layers):
        assert np.max(np.abs(ffn_neuronwise(m, l, x) - ffn_matrix(m, l, x))) < 1e-5


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), length=st.integers(1, 8))
def test_forward_ffn_output_matches_key_value_sum(seed, length):
    m = tiny_model(seed=seed)
    toks = np.random.default_rng(seed).integers(0, m.config.vocab_size, size=length).tolist()
    tr = forward(m, toks, capture=range(m.config.n_layers))
    for l in range(m.config.n_layers):
        for t in range(length):
            ref = ffn_neuronwise(m, l, tr.hidden[l][t])
            assert np.max(np.abs(tr.ffn_out[l][t] - ref)) < 1e-5
    assert abs(np.exp(tr.log_probs).sum() - 1.0) < 1e-5


def test_zero_ffn_weights_pass_residual_through(small):
    for l in range(small.config.n_layers):
        small.params[f"layers.{l}.ffn.w_in"][:] = 0.0
        small.params[f"layers.{l}.ffn.w_out"][:] = 0.0
    tr = forward(small, [1, 2, 3], capture=[0, 1])
    for l in (0, 1):
        assert np.array_equal(tr.ffn_out[l], tr.hidden[l])


def test_forward_matches_independent_numpy_forward(small):
    toks = [3, 1, 4, 1, 5]
    ref = hidden_states(small.params, small.config, toks)
    tr = forward(small, toks, capture=range(small.config.n_layers))
    for l in range(small.config.n_layers):
        assert np.allclose(tr.hidden[l][-1], ref[l], atol=1e-5)
    z = ref["logits"]
    lp = z - z.max() - np.log(np.exp(z - z.max()).sum())
    assert np.allclose(tr.log_probs, lp, atol=1e-5)


def test_batched_forward_ignores_padding(small):
    seqs = [[1, 2, 3, 4, 5], [6, 7], [8]]
    tr = forward_batch(small, seqs, capture=[1])
    for i, s in enumerate(seqs):
        single = forward(small, s, capture=[1])
        assert np.allclose(tr.log_probs[i], single.log_probs, atol=1e-6)
        assert np.allclose(tr.activations[1][i], single.activations[1][-1], atol=1e-6)
    assert np.allclose(np.exp(tr.log_probs).sum(-1), 1.0, atol=1e-5)


@pytest.mark.parametrize("tokens", [[], [999], [-1], list(range(9))])
def test_forward_rejects_bad_input(small, tokens):
    with pytest.raises(DataError):
        forward(small, tokens)


def test_forward_rejects_bad_layer(small):
    with pytest.raises(DataError, match="layer"):
        forward(small, [1], capture=[5])


def test_forward_is_thread_safe(small):
    seqs = [[i % 30, (i * 7) % 30, 2] for i in range(20)]
    expected = forward_batch(small, seqs).log_probs
    results = [None] * 4

    def work(j):
        results[j] = forward_batch(small, seqs).log_probs

    threads = [threading.Thread(target=work, args=(j,)) for j in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(np.array_equal(r, expected) for r in results)


def _toy_corpus(n=12, vocab=30):
    rng = np.random.default_rng(0)
    return FactCorpus([([int(a), int(b)], int(c)) for a, b, c in rng.integers(1, vocab, size=(n, 3))],
                      prefix_tokens=[1, 2], prefix_prob=0.5)


def test_train_epochs_zero_is_identity(small):
    out = train_facts(small, _toy_corpus(), epochs=0, lr=1e-3)
    assert out.to_bytes() == small.to_bytes()


def test_train_is_deterministic(small):
    a = train_facts(small, _toy_corpus(), epochs=3, lr=1e-2)
    b = train_facts(small, _toy_corpus(), epochs=3, lr=1e-2)
    assert a.to_bytes() == b.to_bytes()
    assert not np.array_equal(a.w_out(0), small.w_out(0))


def test_train_divergent_lr_raises(small):
    with pytest.raises(NumericalError) as e:
        train_facts(small, _toy_corpus(), epochs=5, lr=1e6)
    assert e.value.key == "train.lr"


def test_train_rejects_empty_corpus_and_bad_args(small):
    with pytest.raises(DataError):
        train_facts(small, FactCorpus([]), epochs=1, lr=1e-3)
    with pytest.raises(ConfigError):
        train_facts(small, _toy_corpus(), epochs=1, lr=0.0)
    with pytest.raises(ConfigError):
        train_facts(small, _toy_corpus(), epochs=1, lr=1e-3, label_smoothing=1.0)
    with pytest.raises(ConfigError, match="freeze"):
        train_facts(small, _toy_corpus(), epochs=1, lr=1e-3, freeze=["nope"])


def test_frozen_parameters_keep_their_values(small):
    out = train_facts(small, _toy_corpus(), epochs=2, lr=1e-2, freeze=["tok_emb", "pos_emb"])
    assert np.array_equal(out.params["tok_emb"], small.params["tok_emb"])
    assert np.array_equal(out.params["pos_emb"], small.params["pos_emb"])
    assert out.meta["train"]["freeze"] == ["pos_emb", "tok_emb"]


def test_activation_penalty_runs(small):
    out = train_facts(small, _toy_corpus(), epochs=1, lr=1e-2, act_l1=0.1)
    assert np.isfinite(out.meta["train"]["final_loss"])


def test_trained_model_recalls_memorized_facts(trained, world):
    corpus = world.training_corpus(trained.tokenizer)
    assert fact_recall(trained, corpus.examples) >= 0.95
    assert trained.meta["train"]["recall"] >= 0.95
    s, r, o = world.facts[0]
    prompt = trained.tokenizer.encode(world.render(s, r, 0))
    assert int(predict(trained, [prompt])[0]) == trained.tokenizer.id(o)
