"""Per-neuron importance scores via amplified-contribution perturbation.

For prompt ``j`` with pre-FFN hidden state ``x`` at layer ``l`` and target
token ``y``, neuron ``i`` contributes ``s_i = sigma(k_i . x) v_i``.  The
hidden state is perturbed to ``x + lam * s_i`` and both states are projected
straight through the unembedding ``E_u`` (no further layers):

* ``lps``  log p(y | x + lam s_i) - log p(y | x)
* ``psa``  p(y | x + lam s_i) - p(y | x)
* ``mpc``  sigma(k_i . x) * (E_u[y] . v_i)          (no perturbed pass)

All scores are float64, and so is the forward pass that captures ``x``.  Because ``E_u (x + lam s_i) = E_u x + lam a_i E_u v_i``
the perturbed logits for every neuron come from one ``(d_ffn, V)`` product.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import tensorio
from .errors import ConfigError, DataError
from .model import ModelCheckpoint, activation_np, check_tokens, pad_batch, run, torch_params

STRATEGIES = ("lps", "psa", "mpc")
POSITIONS = ("last_token", "last_subject_token")


@dataclass
class AttributionConfig:
    lam: float = 10.0
    layers: tuple[int, ...] = (1, 2, 3)
    strategy: str = "lps"
    position: str = "last_token"

    def validate(self, model: ModelCheckpoint | None = None) -> None:
        if not self.lam > 0:
            raise ConfigError("lambda must be > 0", stage="attribute", key="attribution.lam")
        if not self.layers:
            raise ConfigError("attribution layers must be non-empty", stage="attribute", key="attribution.layers")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}", stage="attribute", key="attribution.strategy")
        if self.position not in POSITIONS:
            raise ConfigError(f"unknown position {self.position!r}", stage="attribute", key="attribution.position")
        if model is not None:
            for l in self.layers:
                if not 0 <= l < model.config.n_layers:
                    raise DataError(f"invalid layer index {l}", stage="attribute", key="attribution.layers")


@dataclass
class AttributionMatrix:
    layer: int
    scores: np.ndarray  # (n_prompts, d_ffn) float64
    prompt_ids: list[str] = field(default_factory=list)
    strategy: str = "lps"

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise DataError("attribution scores must be a 2-D matrix", stage="attribute")
        if not self.prompt_ids:
            self.prompt_ids = [str(i) for i in range(self.scores.shape[0])]
        if len(self.prompt_ids) != self.scores.shape[0]:
            raise DataError("prompt_ids length does not match score rows", stage="attribute")

    @property
    def n_prompts(self) -> int:
        return self.scores.shape[0]

    @property
    def n_neurons(self) -> int:
        return self.scores.shape[1]

    # ---- export
    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["prompt_id"] + [f"n{i}" for i in range(self.n_neurons)])
            for pid, row in zip(self.prompt_ids, self.scores):
                w.writerow([pid] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: str | Path, layer: int, strategy: str = "lps") -> "AttributionMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        ids = [r[0] for r in rows[1:]]
        scores = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
        return cls(layer, scores.reshape(len(ids), len(rows[0]) - 1), ids, strategy)

    def to_bytes(self) -> bytes:
        return tensorio.dumps("attribution", {"scores": self.scores},
                              {"layer": self.layer, "strategy": self.strategy, "prompt_ids": self.prompt_ids})

    @classmethod
    def from_bytes(cls, blob: bytes) -> "AttributionMatrix":
        header, t = tensorio.loads(blob, kind="attribution")
        m = header["meta"]
        return cls(m["layer"], t["scores"], m["prompt_ids"], m["strategy"])


def subject_position(tokens: Sequence[int], subject_id: int) -> int:
    idx = [i for i, t in enumerate(tokens) if t == subject_id]
    if not idx:
        raise DataError("subject token not found in prompt", stage="attribute")
    return idx[-1]


class _LayerCache:
    """float64 copies of the per-layer quantities shared across prompts."""

    def __init__(self, model: ModelCheckpoint, layer: int, need_full: bool):
        self.w_in = model.w_in(layer).astype(np.float64)
        self.w_out = model.w_out(layer).astype(np.float64)
        self.unembed = model.unembed.astype(np.float64)
        # G[i, v] = E_u[v] . v_i : logit shift per unit activation of neuron i
        self.gain = (self.unembed @ self.w_out).T if need_full else None


def _score_rows(cache: _LayerCache, model: ModelCheckpoint, x: np.ndarray, y: int,
                lam: float, strategy: str) -> np.ndarray:
    a = activation_np(cache.w_in @ x, model.config.activation)
    if strategy == "mpc":
        return a * (cache.w_out.T @ cache.unembed[y])
    z = cache.unembed @ x
    L = z[None, :] + (lam * a)[:, None] * cache.gain
    if strategy == "lps":
        m = L.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(L - m).sum(axis=1))
        zm = z.max()
        base = z[y] - (zm + np.log(np.exp(z - zm).sum()))
        return (L[:, y] - lse) - base
    # psa: p_y = 1 / sum_v exp(L_v - L_y); overflow to inf gives the exact p = 0 limit
    with np.errstate(over="ignore"):
        p = 1.0 / np.exp(L - L[:, y:y + 1]).sum(axis=1)
        base = 1.0 / np.exp(z - z[y]).sum()
    return p - base


def attribute(model: ModelCheckpoint, prompts: Sequence[Sequence[int]], targets: Sequence[int],
              config: AttributionConfig, positions: Sequence[int] | None = None,
              prompt_ids: Sequence[str] | None = None) -> dict[int, AttributionMatrix]:
    """Attribution matrices for every configured layer.

    ``positions`` overrides the configured position rule (required for
    ``last_subject_token``; see :func:`subject_position`).  Each prompt runs
    through its own unpadded forward, so rows do not depend on batching.
    """
    config.validate(model)
    if len(prompts) != len(targets):
        raise DataError("prompts and targets differ in length", stage="attribute")
    if len(prompts) == 0:
        raise DataError("no prompts to attribute", stage="attribute")
    for t in targets:
        if not 0 <= int(t) < model.config.vocab_size:
            raise DataError(f"target id {t} out of range", stage="attribute")
    if positions is None:
        if config.position == "last_subject_token":
            raise DataError("last_subject_token attribution needs explicit subject positions",
                            stage="attribute", key="attribution.position")
        positions = [len(p) - 1 for p in prompts]
    for p in prompts:
        check_tokens(model, p)
    layers = list(config.layers)
    caches = {l: _LayerCache(model, l, config.strategy != "mpc") for l in layers}
    rows = {l: [] for l in layers}
    P = torch_params(model, torch.float64)
    last = max(layers)
    for prompt, pos, y in zip(prompts, positions, targets):
        toks, _ = pad_batch([prompt])
        with torch.no_grad():
            _, caps = run(P, model.config, toks, capture=layers, stop_after=last)
        for l in layers:
            x = caps[l][0][0, pos].numpy()
            rows[l].append(_score_rows(caches[l], model, x, int(y), config.lam, config.strategy))
    ids = list(prompt_ids) if prompt_ids is not None else [str(i) for i in range(len(prompts))]
    out = {}
    for l in layers:
        scores = np.stack(rows[l])
        if not np.isfinite(scores).all():
            raise DataError(f"non-finite attribution scores at layer {l}", stage="attribute")
        out[l] = AttributionMatrix(l, scores, ids, config.strategy)
    return out


def _with_strategy(config: AttributionConfig, strategy: str) -> AttributionConfig:
    if config.strategy != strategy:
        raise ConfigError(f"config.strategy is {config.strategy!r}, expected {strategy!r}",
                          stage="attribute", key="attribution.strategy")
    return config


def attribute_lps(model, prompts, targets, config: AttributionConfig, **kw) -> dict[int, AttributionMatrix]:
    return attribute(model, prompts, targets, _with_strategy(config, "lps"), **kw)


def attribute_psa(model, prompts, targets, config: AttributionConfig, **kw) -> dict[int, AttributionMatrix]:
    return attribute(model, prompts, targets, _with_strategy(config, "psa"), **kw)


def attribute_mpc(model, prompts, targets, config: AttributionConfig, **kw) -> dict[int, AttributionMatrix]:
    return attribute(model, prompts, targets, _with_strategy(config, "mpc"), **kw)
