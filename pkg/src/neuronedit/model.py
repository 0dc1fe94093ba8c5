"""Toy decoder-only transformer with a key-value FFN.

Each block is ``h <- h + attn(LN(h))`` followed by the non-gated FFN

    y = W_out sigma(W_in x) + x  =  sum_i sigma(k_i . x) v_i + x

applied to the raw residual stream ``x`` (no pre-FFN norm), so row ``i`` of
``w_in`` is key ``k_i`` and column ``i`` of ``w_out`` is value ``v_i``.
Logits are ``h_L @ unembed.T`` with no final norm, which makes projecting a
mid-layer hidden state through the unembedding a plain logit lens.

Parameters live in float32 numpy arrays; forward passes run in torch.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import erf

from . import tensorio
from .errors import ConfigError, DataError, NumericalError

log = logging.getLogger(__name__)

ACTIVATIONS = ("gelu", "relu")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    d_ffn: int = 256
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 16
    activation: str = "gelu"
    seed: int = 0

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "d_ffn", "n_layers", "n_heads", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}", stage="config", key=f"model.{name}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2", stage="config", key="model.vocab_size")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads", stage="config", key="model.n_heads")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}", stage="config", key="model.activation")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer", stage="config", key="model.seed")


class Tokenizer:
    """Closed-vocabulary whitespace tokenizer; a bijection word <-> id."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("tokenizer table contains duplicate tokens", stage="tokenizer")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Tokenizer) and self.tokens == other.tokens

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            if word not in self.index:
                raise DataError(f"out-of-vocabulary word {word!r}", stage="tokenizer")
            ids.append(self.index[word])
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)

    def id(self, word: str) -> int:
        if word not in self.index:
            raise DataError(f"out-of-vocabulary word {word!r}", stage="tokenizer")
        return self.index[word]


def param_names(config: ModelConfig) -> list[str]:
    names = ["tok_emb", "pos_emb", "unembed"]
    for l in range(config.n_layers):
        p = f"layers.{l}."
        names += [p + "ln.weight", p + "ln.bias", p + "attn.w_q", p + "attn.w_k", p + "attn.w_v",
                  p + "attn.w_o", p + "ffn.w_in", p + "ffn.w_out"]
    return names


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    tokenizer: Tokenizer | None = None
    meta: dict = field(default_factory=dict)

    def w_in(self, layer: int) -> np.ndarray:
        return self.params[f"layers.{layer}.ffn.w_in"]

    def w_out(self, layer: int) -> np.ndarray:
        return self.params[f"layers.{layer}.ffn.w_out"]

    @property
    def unembed(self) -> np.ndarray:
        return self.params["unembed"]

    def copy(self) -> "ModelCheckpoint":
        return ModelCheckpoint(self.config, {k: v.copy() for k, v in self.params.items()},
                               self.tokenizer, copy.deepcopy(self.meta))

    def layer_params(self, layer: int) -> dict[str, np.ndarray]:
        prefix = f"layers.{layer}."
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def to_bytes(self) -> bytes:
        meta = {"config": asdict(self.config),
                "tokenizer": self.tokenizer.tokens if self.tokenizer else None,
                "meta": self.meta}
        ordered = {k: self.params[k] for k in param_names(self.config)}
        return tensorio.dumps("checkpoint", ordered, meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelCheckpoint":
        header, tensors = tensorio.loads(blob, kind="checkpoint")
        meta = header["meta"]
        config = ModelConfig(**meta["config"])
        config.validate()
        missing = set(param_names(config)) - set(tensors)
        if missing:
            raise DataError(f"checkpoint missing tensors: {sorted(missing)}", stage="checkpoint")
        tok = Tokenizer(meta["tokenizer"]) if meta.get("tokenizer") is not None else None
        params = {k: np.ascontiguousarray(tensors[k], dtype=np.float32) for k in param_names(config)}
        return cls(config, params, tok, meta.get("meta") or {})

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in param_names(self.config):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


def init_model(config: ModelConfig, tokenizer: Tokenizer | None = None) -> ModelCheckpoint:
    config.validate()
    if tokenizer is not None and len(tokenizer) != config.vocab_size:
        raise ConfigError("tokenizer size does not match vocab_size", stage="config", key="model.vocab_size")
    rng = np.random.default_rng(config.seed)
    d, m = config.d_model, config.d_ffn

    def normal(shape, std):
        return (rng.standard_normal(shape) * std).astype(np.float32)

    params = {
        "tok_emb": normal((config.vocab_size, d), 1.0 / math.sqrt(d)),
        "pos_emb": normal((config.max_seq_len, d), 1.0 / math.sqrt(d)),
        "unembed": normal((config.vocab_size, d), 1.0 / math.sqrt(d)),
    }
    for l in range(config.n_layers):
        p = f"layers.{l}."
        params[p + "ln.weight"] = np.ones(d, dtype=np.float32)
        params[p + "ln.bias"] = np.zeros(d, dtype=np.float32)
        for w in ("w_q", "w_k", "w_v"):
            params[p + "attn." + w] = normal((d, d), 1.0 / math.sqrt(d))
        params[p + "attn.w_o"] = normal((d, d), 1.0 / math.sqrt(d) / math.sqrt(2 * config.n_layers))
        params[p + "ffn.w_in"] = normal((m, d), 1.0 / math.sqrt(d))
        params[p + "ffn.w_out"] = normal((d, m), 1.0 / math.sqrt(m) / math.sqrt(2 * config.n_layers))
    return ModelCheckpoint(config, params, tokenizer)


# --------------------------------------------------------------------------- forward


def activation_np(z: np.ndarray, kind: str) -> np.ndarray:
    """float64 reference of the FFN nonlinearity (exact erf GELU)."""
    if kind == "relu":
        return np.maximum(z, 0.0)
    return 0.5 * z * (1.0 + erf(z / math.sqrt(2.0)))


def _act(z: torch.Tensor, kind: str) -> torch.Tensor:
    return F.relu(z) if kind == "relu" else F.gelu(z)


@dataclass
class ForwardTrace:
    tokens: list[int]
    hidden: dict[int, np.ndarray]       # layer -> (T, d) pre-FFN residual x
    activations: dict[int, np.ndarray]  # layer -> (T, d_ffn) sigma(W_in x)
    ffn_out: dict[int, np.ndarray]      # layer -> (T, d) matrix-form y = W_out a + x
    log_probs: np.ndarray               # (V,) next-token log-probs at last position


@dataclass
class BatchTrace:
    log_probs: np.ndarray                # (B, V) at each sequence's last position
    hidden: dict[int, np.ndarray]        # layer -> (B, d) at the requested positions
    activations: dict[int, np.ndarray]   # layer -> (B, d_ffn)


@dataclass
class Intervention:
    """In-forward modifications.

    ``ffn_delta`` maps layer -> (B, d) tensor added to the FFN output at
    ``positions`` (one per sequence).  ``ablate`` maps layer -> neuron indices
    whose activations are forced to zero at every position.
    """

    positions: torch.Tensor | None = None
    ffn_delta: dict[int, torch.Tensor] = field(default_factory=dict)
    ablate: dict[int, Sequence[int]] = field(default_factory=dict)


def check_tokens(model: ModelCheckpoint, tokens: Sequence[int]) -> None:
    if len(tokens) == 0:
        raise DataError("empty token sequence", stage="forward")
    if len(tokens) > model.config.max_seq_len:
        raise DataError(f"sequence length {len(tokens)} exceeds max_seq_len {model.config.max_seq_len}",
                        stage="forward")
    for t in tokens:
        if not 0 <= int(t) < model.config.vocab_size:
            raise DataError(f"token id {t} out of range [0, {model.config.vocab_size})", stage="forward")


def torch_params(model: ModelCheckpoint, dtype=torch.float32) -> dict[str, torch.Tensor]:
    out = {}
    for k, v in model.params.items():
        t = torch.from_numpy(v)
        out[k] = t if dtype == torch.float32 else t.to(dtype)
    return out


def pad_batch(sequences: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(s) for s in sequences], dtype=torch.long)
    width = int(lengths.max())
    toks = torch.zeros((len(sequences), width), dtype=torch.long)
    for i, s in enumerate(sequences):
        toks[i, :len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return toks, lengths


def run(P: dict[str, torch.Tensor], config: ModelConfig, toks: torch.Tensor, *,
        capture: Iterable[int] = (), intervention: Intervention | None = None,
        keep_all: bool = False, stop_after: int | None = None):
    """Core forward on a right-padded batch.  Causal attention makes padding
    invisible to real positions.  Returns (logits (B,T,V), captures); with
    ``stop_after`` the pass ends after that layer and logits are None."""
    B, T = toks.shape
    H = config.n_heads
    dh = config.d_model // H
    capture = set(capture)
    caps = {}
    h = P["tok_emb"][toks] + P["pos_emb"][:T]
    causal = torch.ones(T, T, dtype=torch.bool).tril()
    rows = torch.arange(B)
    for l in range(config.n_layers):
        p = f"layers.{l}."
        a = F.layer_norm(h, (config.d_model,), P[p + "ln.weight"], P[p + "ln.bias"])
        q = (a @ P[p + "attn.w_q"].T).view(B, T, H, dh).transpose(1, 2)
        k = (a @ P[p + "attn.w_k"].T).view(B, T, H, dh).transpose(1, 2)
        v = (a @ P[p + "attn.w_v"].T).view(B, T, H, dh).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        att = att.masked_fill(~causal, float("-inf")).softmax(-1)
        z = (att @ v).transpose(1, 2).reshape(B, T, config.d_model)
        h = h + z @ P[p + "attn.w_o"].T
        x = h
        act = _act(x @ P[p + "ffn.w_in"].T, config.activation)
        if intervention is not None and l in intervention.ablate and len(intervention.ablate[l]):
            act = act.clone()
            act[..., list(intervention.ablate[l])] = 0.0
        out = act @ P[p + "ffn.w_out"].T
        if intervention is not None and l in intervention.ffn_delta:
            add = torch.zeros_like(out)
            add[rows, intervention.positions] = intervention.ffn_delta[l].to(out.dtype)
            out = out + add
        h = x + out
        if l in capture:
            caps[l] = (x, act, h) if keep_all else (x, act)
        if l == stop_after:
            return None, caps
    logits = h @ P["unembed"].T
    return logits, caps


def forward(model: ModelCheckpoint, tokens: Sequence[int], capture: Iterable[int] = ()) -> ForwardTrace:
    """Single-sequence forward returning full-position captures."""
    check_tokens(model, tokens)
    capture = sorted(set(capture))
    for l in capture:
        if not 0 <= l < model.config.n_layers:
            raise DataError(f"invalid layer index {l}", stage="forward")
    toks, _ = pad_batch([tokens])
    with torch.no_grad():
        logits, caps = run(torch_params(model), model.config, toks, capture=capture, keep_all=True)
    lp = torch.log_softmax(logits[0, -1].double(), -1).numpy()
    return ForwardTrace(
        tokens=list(tokens),
        hidden={l: caps[l][0][0].double().numpy() for l in capture},
        activations={l: caps[l][1][0].double().numpy() for l in capture},
        ffn_out={l: caps[l][2][0].double().numpy() for l in capture},
        log_probs=lp,
    )


def forward_batch(model: ModelCheckpoint, sequences: Sequence[Sequence[int]], capture: Iterable[int] = (),
                  positions: Sequence[int] | None = None, intervention: Intervention | None = None,
                  chunk: int = 512, dtype: torch.dtype = torch.float32) -> BatchTrace:
    """Batched forward.  Captures are taken at ``positions`` (default: last
    token of each sequence); log-probs are always at the last token.
    ``dtype=torch.float64`` runs the whole pass in double precision."""
    for s in sequences:
        check_tokens(model, s)
    capture = sorted(set(capture))
    P = torch_params(model, dtype)
    lps, hid, acts = [], {l: [] for l in capture}, {l: [] for l in capture}
    for start in range(0, len(sequences), chunk):
        seqs = sequences[start:start + chunk]
        toks, lengths = pad_batch(seqs)
        last = lengths - 1
        pos = last if positions is None else torch.as_tensor(list(positions[start:start + chunk]), dtype=torch.long)
        iv = intervention
        if iv is not None and iv.positions is None:
            iv = Intervention(pos, iv.ffn_delta, iv.ablate)
        with torch.no_grad():
            logits, caps = run(P, model.config, toks, capture=capture, intervention=iv)
        rows = torch.arange(len(seqs))
        lps.append(torch.log_softmax(logits[rows, last].double(), -1).numpy())
        for l in capture:
            hid[l].append(caps[l][0][rows, pos].double().numpy())
            acts[l].append(caps[l][1][rows, pos].double().numpy())
    return BatchTrace(
        log_probs=np.concatenate(lps) if lps else np.zeros((0, model.config.vocab_size)),
        hidden={l: np.concatenate(v) for l, v in hid.items()},
        activations={l: np.concatenate(v) for l, v in acts.items()},
    )


def predict(model: ModelCheckpoint, sequences: Sequence[Sequence[int]],
            intervention: Intervention | None = None) -> np.ndarray:
    """Argmax next token at the last position of each sequence."""
    if len(sequences) == 0:
        return np.zeros(0, dtype=np.int64)
    return forward_batch(model, sequences, intervention=intervention).log_probs.argmax(-1)


def ffn_matrix(model: ModelCheckpoint, layer: int, x: np.ndarray) -> np.ndarray:
    """Matrix form  W_out sigma(W_in x) + x  in float64."""
    w_in = model.w_in(layer).astype(np.float64)
    w_out = model.w_out(layer).astype(np.float64)
    return w_out @ activation_np(w_in @ x, model.config.activation) + x


def ffn_neuronwise(model: ModelCheckpoint, layer: int, x: np.ndarray) -> np.ndarray:
    """Key-value form  sum_i sigma(k_i . x) v_i + x, one neuron at a time."""
    w_in = model.w_in(layer)
    w_out = model.w_out(layer)
    y = np.array(x, dtype=np.float64)
    for i in range(model.config.d_ffn):
        s = activation_np(np.dot(w_in[i].astype(np.float64), x), model.config.activation)
        y += s * w_out[:, i].astype(np.float64)
    return y


# --------------------------------------------------------------------------- training


@dataclass
class FactCorpus:
    """Training sequences: each example is (prompt tokens, object token).
    ``prefix_tokens`` are filler ids used for random context prefixes."""

    examples: list[tuple[list[int], int]]
    prefix_tokens: list[int] = field(default_factory=list)
    prefix_prob: float = 0.5
    max_prefix: int = 3


def fact_recall(model: ModelCheckpoint, examples: Sequence[tuple[Sequence[int], int]]) -> float:
    if not examples:
        return float("nan")
    pred = predict(model, [e[0] for e in examples])
    return float(np.mean(pred == np.array([e[1] for e in examples])))


def train_facts(model: ModelCheckpoint, corpus: FactCorpus, epochs: int, lr: float,
                batch_size: int = 64, weight_decay: float = 0.0, label_smoothing: float = 0.1,
                act_l1: float = 0.0, freeze: Sequence[str] = ()) -> ModelCheckpoint:
    """Memorize ``corpus`` with Adam on the last-position cross entropy.

    Label smoothing caps the logit margins of memorized facts; without it the
    margins grow without bound and every later edit has to fight them.
    ``act_l1`` penalizes the mean absolute FFN activation, which pushes the
    model towards sparse, specialized neurons.  Parameters named in
    ``freeze`` keep their initial values.

    Deterministic given ``model.config.seed``.  The achieved recall is written
    to ``meta["train"]`` of the returned checkpoint.
    """
    if not corpus.examples:
        raise DataError("training corpus is empty", stage="train")
    if lr <= 0:
        raise ConfigError("lr must be positive", stage="train", key="train.lr")
    if not 0.0 <= label_smoothing < 1.0:
        raise ConfigError("label_smoothing must lie in [0, 1)", stage="train", key="train.label_smoothing")
    if epochs <= 0:
        return model.copy()
    for toks, tgt in corpus.examples:
        check_tokens(model, toks)
        check_tokens(model, [tgt])
    cfg = model.config
    rng = np.random.default_rng([cfg.seed, 0x7EA1])
    torch.manual_seed(cfg.seed % 2**63)
    unknown = set(freeze) - set(model.params)
    if unknown:
        raise ConfigError(f"cannot freeze unknown parameters {sorted(unknown)}", stage="train", key="train.freeze")
    P = {k: torch.tensor(v, requires_grad=k not in freeze) for k, v in model.params.items()}
    opt = torch.optim.Adam([v for v in P.values() if v.requires_grad], lr=lr, weight_decay=weight_decay)
    n = len(corpus.examples)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            seqs, tgts = [], []
            for idx in order[start:start + batch_size]:
                toks, tgt = corpus.examples[idx]
                if corpus.prefix_tokens and rng.random() < corpus.prefix_prob:
                    k = int(rng.integers(1, corpus.max_prefix + 1))
                    k = min(k, cfg.max_seq_len - len(toks))
                    toks = [int(t) for t in rng.choice(corpus.prefix_tokens, size=k)] + list(toks)
                seqs.append(toks)
                tgts.append(tgt)
            toks_t, lengths = pad_batch(seqs)
            logits, caps = run(P, cfg, toks_t, capture=range(cfg.n_layers) if act_l1 > 0 else ())
            last = logits[torch.arange(len(seqs)), lengths - 1]
            loss = F.cross_entropy(last, torch.as_tensor(tgts), label_smoothing=label_smoothing)
            if act_l1 > 0:
                valid = (torch.arange(toks_t.shape[1])[None, :] < lengths[:, None]).float()[..., None]
                l1 = sum((c[1].abs() * valid).sum() for c in caps.values()) / (valid.sum() * cfg.d_ffn)
                loss = loss + act_l1 * l1
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch} (lr={lr} likely divergent)",
                                     stage="train", key="train.lr")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(seqs)
        losses.append(total / n)
    params = {k: v.detach().numpy().astype(np.float32) for k, v in P.items()}
    if not all(np.isfinite(v).all() for v in params.values()):
        raise NumericalError("non-finite parameters after training", stage="train", key="train.lr")
    out = ModelCheckpoint(cfg, params, model.tokenizer, copy.deepcopy(model.meta))
    recall = fact_recall(out, corpus.examples)
    out.meta["train"] = {"epochs": epochs, "lr": lr, "label_smoothing": label_smoothing, "act_l1": act_l1,
                         "freeze": sorted(freeze),
                         "final_loss": losses[-1], "recall": recall}
    log.info("trained %d epochs: loss %.4f recall %.4f", epochs, losses[-1], recall)
    return out
