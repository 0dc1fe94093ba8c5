from __future__ import annotations

import json

import pytest

from neuronedit.config import (Settings, coerce, env_overrides, flatten, keys, load_settings, parse_assignments,
                               set_key)
from neuronedit.errors import ConfigError


def test_every_module_is_addressable():
    ks = keys()
    assert len(ks) == len(set(ks))
    for k in ("masking.alpha", "attribution.lam", "editor.v_steps", "run.horizons", "train.epochs",
              "world.n_facts", "model.d_ffn", "ablate.top_k"):
        assert k in ks
    assert "editor.contexts" not in ks and "run.masking" not in ks


def test_defaults_validate():
    s = load_settings(environ={})
    assert s.to_record() == Settings().to_record()
    assert s.run_config().attribution is s.attribution


def test_precedence_file_env_flag(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"masking": {"alpha": 2.0, "a_ge": 0.5}, "editor.v_steps": 7}))
    s = load_settings(path, environ={})
    assert (s.masking.alpha, s.masking.a_ge, s.editor.v_steps) == (2.0, 0.5, 7)
    s = load_settings(path, environ={"NEURONEDIT_MASKING__ALPHA": "3"})
    assert s.masking.alpha == 3.0 and s.masking.a_ge == 0.5
    s = load_settings(path, environ={"NEURONEDIT_MASKING__ALPHA": "3"}, overrides={"masking.alpha": "4"})
    assert s.masking.alpha == 4.0


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigError) as e:
        load_settings(environ={}, overrides={"masking.alhpa": 1})
    assert e.value.key == "masking.alhpa"
    with pytest.raises(ConfigError):
        load_settings(environ={"NEURONEDIT_NOPE__X": "1"})
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"editor": {"contexts": [[1]]}}))
    with pytest.raises(ConfigError):
        load_settings(path, environ={})


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_settings(tmp_path / "missing.json", environ={})
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError, match="JSON"):
        load_settings(tmp_path / "bad.json", environ={})
    (tmp_path / "list.json").write_text("[1]")
    with pytest.raises(ConfigError):
        load_settings(tmp_path / "list.json", environ={})


def test_coercion():
    assert coerce("k", "10,50,100", (1,)) == (10, 50, 100)
    assert coerce("k", [1, 2], (1,)) == (1, 2)
    assert coerce("k", "a,b", ("x",)) == ("a", "b")
    assert coerce("k", "false", True) is False and coerce("k", "1", False) is True
    assert coerce("k", "3", 1.0) == 3.0 and coerce("k", 4.0, 1) == 4
    for value, default in (("yes please", True), ("x", 1), (2.5, 1), (3, "s"), ("1,x", (1,))):
        with pytest.raises(ConfigError) as e:
            coerce("sec.key", value, default)
        assert e.value.key == "sec.key"


def test_semantic_validation_names_the_key():
    with pytest.raises(ConfigError) as e:
        load_settings(environ={}, overrides={"attribution.layers": "1,9"})
    assert e.value.key == "attribution.layers"
    with pytest.raises(ConfigError) as e:
        load_settings(environ={}, overrides={"run.horizons": "10,5"})
    assert e.value.key == "run.horizons"
    with pytest.raises(ConfigError) as e:
        load_settings(environ={}, overrides={"masking.mode": "everything"})
    with pytest.raises(ConfigError):
        load_settings(environ={}, overrides={"train.lr": "0"})


def test_helpers():
    assert flatten({"a": {"b": 1, "c": {"d": 2}}, "e": 3}) == {"a.b": 1, "a.c.d": 2, "e": 3}
    assert env_overrides({"NEURONEDIT_RUN__SEED": "4", "HOME": "/x", "NEURONEDIT_FLAT": "1"}) == {"run.seed": "4"}
    assert parse_assignments(["a.b=1", "c.d=x=y"]) == {"a.b": "1", "c.d": "x=y"}
    with pytest.raises(ConfigError):
        parse_assignments(["novalue"])
    s = Settings()
    set_key(s, "editor.null_space", "off")
    assert s.editor.null_space is False
    with pytest.raises(ConfigError):
        set_key(s, "editor", 1)


def test_digest_follows_content():
    a, b = Settings(), Settings()
    assert a.digest() == b.digest()
    set_key(b, "run.seed", 1)
    assert a.digest() != b.digest()
