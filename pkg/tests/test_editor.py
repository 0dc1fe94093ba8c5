from __future__ import annotations

import dataclasses
import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from neuronedit.attribution import AttributionConfig
from neuronedit.config import Settings
from neuronedit.corpus import make_edit_stream
from neuronedit.editor import (EditorConfig, EditorState, EditPlan, apply_edit, apply_edit_batch,
                               collect_preserved_keys, compute_update, solve_value_target)
from neuronedit.editor_types import EditRequest
from neuronedit.errors import ConfigError, EditError
from neuronedit.harness import prepare_resources
from neuronedit.masking import EntropyStats, MaskingConfig, NeuronMask, SelectionScores
from neuronedit.model import Intervention, forward_batch, pad_batch, predict, run, torch_params

from conftest import tiny_model


def full_mask(d, layer=0, bits=None):
    bits = np.ones(d, dtype=bool) if bits is None else np.asarray(bits, dtype=bool)
    d = bits.size
    return NeuronMask(layer, bits, SelectionScores(np.zeros(d, dtype=np.int64), np.zeros(d)),
                      EntropyStats(1.0, 1.0, 1.0, 1.0, 1.0), 0.0, 0.0, "union", bits.copy(), bits.copy())


@pytest.fixture(scope="module")
def setup(trained, world):
    """Default configs, contexts and preserved keys as a run would use them."""
    s = Settings()
    rc = s.run_config()
    stream = make_edit_stream(world, 200, seed=s.stream.seed, tokenizer=trained.tokenizer)
    res = prepare_resources(world, trained, stream, rc)
    edit_cfg = dataclasses.replace(rc.editor, contexts=res.contexts)
    state = collect_preserved_keys(trained, res.preserved_prompts, list(rc.attribution.layers))
    return dict(stream=stream, attr=rc.attribution, mask=rc.masking, edit=edit_cfg, state=state)


def _edit(model, setup, reqs, state=None, **kw):
    st_ = setup["state"].copy() if state is None else state
    return apply_edit_batch(model, reqs, setup["attr"], kw.pop("mask", setup["mask"]),
                            kw.pop("edit", setup["edit"]), st_, **kw)


# ---- compute_update


def _plan(m, layer, bits, seed=0, n_keys=1, preserve=None):
    rng = np.random.default_rng(seed)
    k = np.abs(rng.standard_normal((n_keys, m.config.d_ffn)))
    v = rng.standard_normal((n_keys, m.config.d_model))
    return EditPlan([layer], {layer: full_mask(m.config.d_ffn, layer, bits)}, {layer: k}, {layer: v},
                    preserve_keys={} if preserve is None else {layer: preserve})


def test_full_mask_reproduces_value_target():
    m = tiny_model(seed=1)
    plan = _plan(m, 1, None)
    dm = compute_update(plan, m, EditorConfig(eps_scale=1e-9))[1]
    k, v = plan.key_vectors[1][0], plan.value_targets[1][0]
    got = (m.w_out(1).astype(np.float64) + dm.delta) @ k
    assert np.linalg.norm(got - v) / np.linalg.norm(v) < 1e-4
    assert dm.residual < 1e-4 and not dm.projected


def test_empty_mask_is_rejected():
    m = tiny_model()
    with pytest.raises(EditError) as e:
        compute_update(_plan(m, 0, np.zeros(m.config.d_ffn)), m)
    assert e.value.stage == "update"


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), bits=st.lists(st.booleans(), min_size=24, max_size=24),
       n_keys=st.integers(1, 3), before=st.booleans())
def test_masked_out_columns_are_exactly_zero(seed, bits, n_keys, before):
    if not any(bits):
        bits[seed % 24] = True
    m = tiny_model(seed=seed % 50)
    dm = compute_update(_plan(m, 0, bits, seed, n_keys), m, EditorConfig(mask_before_solve=before))[0]
    off = ~np.asarray(bits)
    assert np.all(dm.delta[:, off] == 0.0)


def test_update_stays_out_of_preserved_subspace():
    m = tiny_model(seed=4, d_ffn=24)
    rng = np.random.default_rng(0)
    K0 = rng.standard_normal((200, 8)) @ rng.standard_normal((8, 24))  # rank 8
    dm = compute_update(_plan(m, 0, None, seed=3, preserve=K0), m)[0]
    assert dm.projected
    assert np.linalg.norm(dm.delta @ K0.T) / np.linalg.norm(dm.delta) <= 0.05


def test_soft_weights_scale_columns():
    m = tiny_model(seed=2)
    plan = _plan(m, 0, None)
    w = np.linspace(0, 1, m.config.d_ffn)
    soft = dataclasses.replace(plan.masks[0], soft_weights=w, bits=w > 0)
    hard = compute_update(dataclasses.replace(plan, masks={0: dataclasses.replace(soft, soft_weights=None)}), m)[0]
    got = compute_update(dataclasses.replace(plan, masks={0: soft}), m)[0]
    assert np.allclose(got.delta, hard.delta * w[None, :])


def test_plan_layers_must_match_masks():
    m = tiny_model()
    with pytest.raises(EditError):
        EditPlan([0, 1], {0: full_mask(m.config.d_ffn)}, {}, {})


def test_editor_config_validation():
    for bad in (dict(v_steps=-1), dict(eps_scale=0.0), dict(preserve_weight=-1.0), dict(v_spread="x")):
        with pytest.raises(ConfigError):
            EditorConfig(**bad).validate()


# ---- value target


def test_already_correct_fact_leaves_output_in_place(trained, world):
    tok = trained.tokenizer
    s, r, o = world.facts[0]
    prompt = tok.encode(world.render(s, r, 0))
    assert int(predict(trained, [prompt])[0]) == tok.id(o)
    # "rewrite" to the current prediction: the margin is already met
    other = tok.id(world.objects[0] if world.objects[0] != o else world.objects[1])
    req = EditRequest(s, prompt, other, tok.id(o))
    vt = solve_value_target(trained, req, 2, margin=0.0)
    assert vt.steps_taken == 0
    assert np.linalg.norm(vt.v_star - vt.base_out) < 1e-3


def test_zero_steps_is_not_a_silent_success(trained, setup):
    req = setup["stream"][0]
    with pytest.raises(EditError) as e:
        solve_value_target(trained, req, 2, steps=0)
    assert e.value.stage == "value_target"


def test_value_target_substitution_flips_prediction(trained, setup):
    P = torch_params(trained)
    hits = 0
    for req in setup["stream"][:100]:
        vt = solve_value_target(trained, req, 2, contexts=setup["edit"].contexts)
        toks, lengths = pad_batch([req.prompt])
        pos = lengths - 1
        shift = torch.tensor(vt.v_star - vt.base_out, dtype=torch.float32)[None]
        with torch.no_grad():
            logits, _ = run(P, trained.config, toks, intervention=Intervention(pos, {2: shift}))
        hits += int(logits[0, pos[0]].argmax()) == req.new_object
        assert vt.gain > 0
    assert hits >= 95


# ---- apply_edit


def test_single_edit_succeeds_and_leaves_input_untouched(trained, setup):
    req = setup["stream"][0]
    before = trained.to_bytes()
    t0 = time.perf_counter()
    edited, out = apply_edit(trained, req, setup["attr"], setup["mask"], setup["edit"], setup["state"].copy())
    assert time.perf_counter() - t0 < 2.0
    assert out.success and out.stage is None
    assert int(predict(edited, [req.prompt])[0]) == req.new_object
    assert trained.to_bytes() == before
    assert sorted(out.popcounts) == sorted(setup["attr"].layers) and all(v > 0 for v in out.popcounts.values())
    rec = out.to_record()
    assert rec["schema"] == "edit-outcome/1" and rec["success"]


def test_non_target_layers_are_bit_identical(trained, setup):
    edited, (out,) = _edit(trained, setup, [setup["stream"][1]])
    targets = set(setup["attr"].layers)
    for name, arr in trained.params.items():
        w_out_layer = [l for l in targets if name == f"layers.{l}.ffn.w_out"]
        if not w_out_layer:
            assert arr.tobytes() == edited.params[name].tobytes(), name
        else:
            l = w_out_layer[0]
            off = ~out.mask_bits[l]
            assert np.array_equal(arr[:, off], edited.params[name][:, off])


def test_repeat_edit_residual_does_not_grow(trained, setup):
    req = setup["stream"][2]
    state = setup["state"].copy()
    once, a = _edit(trained, setup, [req], state=state)
    _, b = _edit(once, setup, [req], state=state)
    first = a[0].residuals[min(a[0].residuals)]
    second = b[0].residuals[min(b[0].residuals)]
    assert second <= first + 1e-9


def test_batch_of_one_equals_single_edit(trained, setup):
    req = setup["stream"][3]
    a, _ = apply_edit(trained, req, setup["attr"], setup["mask"], setup["edit"], setup["state"].copy())
    b, _ = _edit(trained, setup, [req])
    assert a.to_bytes() == b.to_bytes()


def test_batch_of_four_lands_every_edit(trained, setup):
    reqs = setup["stream"][4:8]
    edited, outs = _edit(trained, setup, reqs)
    assert len(outs) == 4 and [o.step for o in outs] == [0, 1, 2, 3]
    pred = predict(edited, [q.prompt for q in reqs])
    assert [int(p) for p in pred] == [q.new_object for q in reqs]


def test_empty_batch_is_rejected(trained, setup):
    with pytest.raises(EditError) as e:
        _edit(trained, setup, [])
    assert e.value.stage == "apply"


def test_dry_run_changes_nothing(trained, setup):
    state = setup["state"].copy()
    model, outs = _edit(trained, setup, [setup["stream"][0]], state=state, dry_run=True)
    assert model is trained and outs[0].stage == "dry_run" and not outs[0].success
    assert state.n_edits == 0 and not state.edit_cov


def test_state_accumulates_edit_keys(trained, setup):
    state = setup["state"].copy()
    _edit(trained, setup, setup["stream"][:2], state=state)
    assert state.n_edits == 2
    for l in setup["attr"].layers:
        assert state.edit_cov[l].shape == (trained.config.d_ffn,) * 2
    assert not setup["state"].edit_cov


def test_empty_mask_mode_is_tagged_mask(trained, setup):
    cfg = dataclasses.replace(setup["mask"], ratio="fixed", fixed_rho_ge=0.0, fixed_rho_sp=0.0)
    with pytest.raises(EditError) as e:
        _edit(trained, setup, [setup["stream"][0]], mask=cfg)
    assert e.value.stage == "mask"


@pytest.mark.parametrize("variant", [dict(mask_before_solve=False), dict(v_spread="shared")])
def test_editor_variants_still_edit(trained, setup, variant):
    cfg = dataclasses.replace(setup["edit"], **variant)
    edited, outs = _edit(trained, setup, [setup["stream"][5]], edit=cfg)
    assert outs[0].success


def test_soft_mode_edit(trained, setup):
    # soft weights shrink each column of the update, so a single soft edit moves
    # the target without being guaranteed to flip it
    edited, outs = _edit(trained, setup, [setup["stream"][6]], mask=MaskingConfig(mode="soft"))
    (out,) = outs
    assert out.stage is None and out.log_odds_gain > 0
    for layer, count in out.popcounts.items():
        moved = np.any(edited.w_out(layer) != trained.w_out(layer), axis=0)
        assert 0 < moved.sum() <= count


def test_collect_preserved_keys_shapes(trained):
    st_ = collect_preserved_keys(trained, [[1, 2, 3], [4, 5]], [1, 3])
    assert st_.preserved[1].shape == (2, trained.config.d_ffn)
    m = st_.preserved_moment(1)
    assert np.allclose(m, m.T)
    assert collect_preserved_keys(trained, [], [1]).preserved == {}
    ref = forward_batch(trained, [[1, 2, 3]], capture=[1]).activations[1][0]
    assert np.array_equal(st_.preserved[1][0], ref)
    assert isinstance(EditorState().copy(), EditorState)
