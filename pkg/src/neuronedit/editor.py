"""Masked closed-form edits of the FFN down-projection.

One edit step (``apply_edit_batch``):

1. attribute the edit prompts (bare prompt plus context-prefixed variants)
   against the new object and build one neuron mask per target layer;
2. for each target layer in ascending order, capture the key activation
   ``k`` at the edit position, solve a value target ``v*`` by gradient
   ascent on ``log p(o*)`` and move the layer a ``1/remaining`` share of
   the way there;
3. the update is the ridge solution ``D = R K^T (C + K K^T + eps I)^-1`` with
   ``R = v - W_out k`` over the selected columns only.  ``C`` is the weighted
   preserved-key second moment plus the keys of earlier edits.  When the
   preserved keys leave a null space that holds most of the edit key, the
   solve is confined to it.  Every unselected column of ``D`` is zero.

The solve restricted to the mask is the default; ``mask_before_solve=False``
solves over all columns and masks afterwards.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .attribution import AttributionConfig, AttributionMatrix, attribute, subject_position
from .editor_types import EditRequest
from .errors import ConfigError, DataError, EditError, NeuronEditError
from .masking import MaskingConfig, NeuronMask, make_mask
from .model import Intervention, ModelCheckpoint, forward_batch, pad_batch, run, torch_params

__all__ = [
    "EditRequest", "EditorConfig", "EditorState", "EditPlan", "DeltaMatrix", "EditOutcome", "ValueTarget",
    "collect_preserved_keys", "solve_value_target", "compute_update", "apply_edit", "apply_edit_batch",
]

log = logging.getLogger(__name__)


@dataclass
class EditorConfig:
    """Editor hyperparameters.  The target layers are the attribution layers."""

    v_steps: int = 25
    v_lr: float = 0.5
    v_anchor: float = 0.01
    v_margin: float = 2.0
    # "resolve": re-solve v* at every layer and take 1/remaining of it;
    # "shared": solve once at the first target layer, every layer takes 1/L
    v_spread: str = "resolve"
    eps_scale: float = 1e-4
    preserve_weight: float = 30.0
    edit_key_weight: float = 1.0
    rank_cutoff: float = 1e-6
    null_space: bool = True
    null_min_retain: float = 0.5
    mask_before_solve: bool = True
    contexts: tuple[tuple[int, ...], ...] = ()
    verify_masked_columns: bool = True

    def validate(self) -> None:
        if self.v_steps < 0:
            raise ConfigError("v_steps must be >= 0", stage="value_target", key="editor.v_steps")
        for key in ("v_lr", "eps_scale"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive", stage="update", key=f"editor.{key}")
        for key in ("v_anchor", "preserve_weight", "edit_key_weight", "rank_cutoff", "null_min_retain"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative", stage="update", key=f"editor.{key}")
        if self.v_spread not in ("resolve", "shared"):
            raise ConfigError(f"unknown v_spread {self.v_spread!r}", stage="value_target", key="editor.v_spread")


@dataclass
class EditorState:
    """Accumulated key statistics carried across sequential edits.

    ``preserved[l]`` is the raw preserved-key matrix (N, d_ffn);
    ``edit_cov[l]`` accumulates ``k k^T`` of every applied edit key.
    """

    preserved: dict[int, np.ndarray] = field(default_factory=dict)
    edit_cov: dict[int, np.ndarray] = field(default_factory=dict)
    n_edits: int = 0
    _moment: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def preserved_moment(self, layer: int) -> np.ndarray | None:
        if layer not in self.preserved:
            return None
        if layer not in self._moment:
            K = self.preserved[layer]
            self._moment[layer] = K.T @ K / max(len(K), 1)
        return self._moment[layer]

    def covariance(self, layer: int, d_ffn: int, config: EditorConfig) -> np.ndarray:
        C = np.zeros((d_ffn, d_ffn))
        m = self.preserved_moment(layer)
        if m is not None:
            C += config.preserve_weight * m
        if layer in self.edit_cov:
            C += config.edit_key_weight * self.edit_cov[layer]
        return C

    def add_keys(self, layer: int, keys: np.ndarray) -> None:
        keys = np.atleast_2d(keys)
        cov = self.edit_cov.setdefault(layer, np.zeros((keys.shape[1], keys.shape[1])))
        cov += keys.T @ keys

    def copy(self) -> "EditorState":
        return EditorState(dict(self.preserved), {k: v.copy() for k, v in self.edit_cov.items()},
                           self.n_edits, dict(self._moment))


def collect_preserved_keys(model: ModelCheckpoint, prompts: Sequence[Sequence[int]],
                           layers: Sequence[int]) -> EditorState:
    """Key activations at the last position of ``prompts`` for each layer."""
    if not prompts:
        return EditorState()
    tr = forward_batch(model, prompts, capture=layers)
    return EditorState(preserved={l: tr.activations[l].copy() for l in layers})


@dataclass
class ValueTarget:
    layer: int
    v_star: np.ndarray      # (d,) target FFN output W_out k at the edit position
    base_out: np.ndarray    # (d,) unmodified FFN output
    log_odds_before: float
    log_odds_after: float
    steps_taken: int

    @property
    def gain(self) -> float:
        return self.log_odds_after - self.log_odds_before


@dataclass
class EditPlan:
    target_layers: list[int]
    masks: dict[int, NeuronMask]
    key_vectors: dict[int, np.ndarray]     # layer -> (b, d_ffn)
    value_targets: dict[int, np.ndarray]   # layer -> (b, d)
    covariances: dict[int, np.ndarray] = field(default_factory=dict)   # layer -> (d_ffn, d_ffn)
    preserve_keys: dict[int, np.ndarray] = field(default_factory=dict)  # layer -> (N, d_ffn)

    def __post_init__(self):
        if sorted(self.masks) != sorted(self.target_layers):
            raise EditError("mask layers differ from target layers", stage="update")


@dataclass
class DeltaMatrix:
    layer: int
    delta: np.ndarray  # (d_model, d_ffn)
    residual: float    # max over keys of ||(W + delta) k - v|| / ||v||
    projected: bool


@dataclass
class EditOutcome:
    step: int
    subject: str
    success: bool
    stage: str | None = None
    error: str | None = None
    popcounts: dict[int, int] = field(default_factory=dict)
    residuals: dict[int, float] = field(default_factory=dict)
    log_odds_gain: float | None = None
    wall_time: float = 0.0
    mask_bits: dict[int, np.ndarray] = field(default_factory=dict, repr=False)  # not exported

    def to_record(self) -> dict:
        return {
            "schema": "edit-outcome/1", "step": self.step, "subject": self.subject, "success": self.success,
            "stage": self.stage, "error": self.error,
            "popcounts": {str(k): int(v) for k, v in sorted(self.popcounts.items())},
            "residuals": {str(k): float(v) for k, v in sorted(self.residuals.items())},
            "log_odds_gain": self.log_odds_gain, "wall_time": self.wall_time,
        }


# --------------------------------------------------------------------------- value target


def edit_prompts(request: EditRequest, contexts: Sequence[Sequence[int]], max_len: int) -> list[tuple[int, ...]]:
    out = [tuple(request.prompt)]
    for c in contexts:
        p = tuple(c) + tuple(request.prompt)
        if len(p) <= max_len:
            out.append(p)
    return out


def _log_odds(lp: np.ndarray, new: int, old: int) -> float:
    return float(lp[new] - lp[old])


def solve_value_target(model: ModelCheckpoint, request: EditRequest, layer: int, steps: int = 25,
                       lr: float = 0.5, anchor: float = 0.01, margin: float = 3.0,
                       contexts: Sequence[Sequence[int]] = ()) -> ValueTarget:
    """Optimize an additive shift of the layer's FFN output at the edit
    position so the new object wins on the bare and context-prefixed prompts.

    Adam on ``-mean log p(o*) + anchor * ||delta||^2``; stops early once every
    prompt prefers ``o*`` over all other tokens by ``margin`` nats.
    """
    if not 0 <= layer < model.config.n_layers:
        raise DataError(f"invalid layer index {layer}", stage="value_target")
    prompts = edit_prompts(request, contexts, model.config.max_seq_len)
    toks, lengths = pad_batch(prompts)
    pos = lengths - 1
    P = torch_params(model)
    delta = torch.zeros(model.config.d_model, requires_grad=True)
    opt = torch.optim.Adam([delta], lr=lr)
    rows = torch.arange(len(prompts))
    new = int(request.new_object)

    def evaluate():
        iv = Intervention(pos, {layer: delta.expand(len(prompts), -1)})
        logits, caps = run(P, model.config, toks, capture=[layer], intervention=iv)
        return torch.log_softmax(logits[rows, pos], -1), caps

    with torch.no_grad():
        lp0, caps = evaluate()
        act = caps[layer][1][0, pos[0]]
        base_out = (act @ P[f"layers.{layer}.ffn.w_out"].T).double().numpy()
    before = _log_odds(lp0[0].double().numpy(), new, request.old_object)
    taken = 0
    for step in range(steps):
        lp, _ = evaluate()
        others = lp.clone()
        others[:, new] = float("-inf")
        if float((lp[:, new] - others.max(-1).values).min().detach()) >= margin:
            break
        loss = -lp[:, new].mean() + anchor * (delta ** 2).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
        taken = step + 1
    with torch.no_grad():
        lp_final, _ = evaluate()
    after = _log_odds(lp_final[0].double().numpy(), new, request.old_object)
    if after <= 0:
        raise EditError(f"value target at layer {layer} failed to make o* beat o "
                        f"(log-odds {after:.3f} after {taken} steps)", stage="value_target")
    return ValueTarget(layer, base_out + delta.detach().double().numpy(), base_out, before, after, taken)


# --------------------------------------------------------------------------- closed-form update


def _null_space(C0: np.ndarray, cutoff: float) -> np.ndarray | None:
    """Orthonormal basis (columns) of the directions where the preserved-key
    moment is below ``cutoff * max eigenvalue``; None if there are none."""
    w, U = np.linalg.eigh(C0)
    if w[-1] <= 0:
        return None
    keep = w < cutoff * w[-1]
    return U[:, keep] if keep.any() else None


def _solve_columns(W: np.ndarray, K: np.ndarray, V: np.ndarray, C: np.ndarray, eps_scale: float,
                   C0: np.ndarray | None, cutoff: float, use_null: bool,
                   min_retain: float = 0.5) -> tuple[np.ndarray, bool]:
    """Ridge update on the given columns:
    ``D = R K^T (C + K K^T + eps I)^-1`` with ``R = V - W K``.

    W: (d, m) columns being edited, K: (m, b) keys, V: (d, b) targets,
    C: (m, m) accumulated key covariance (without the current keys).  When
    ``C0`` has a null space that carries at least ``min_retain`` of the
    current keys' energy, the solve is confined to that subspace.
    """
    m = K.shape[0]
    A = C + K @ K.T
    eps = eps_scale * np.trace(A) / m
    if not eps > 0:
        raise EditError("all keys are zero on the selected neurons", stage="update")
    B = None
    projected = False
    if use_null and C0 is not None:
        Nb = _null_space(C0, cutoff)
        if Nb is not None:
            kept = np.linalg.norm(Nb.T @ K) ** 2 / np.linalg.norm(K) ** 2
            if kept >= min_retain:
                B, projected = Nb, True
    Kb = K if B is None else B.T @ K
    Ab = A if B is None else B.T @ A @ B
    n = Ab.shape[0]
    Areg = Ab + eps * np.eye(n)
    while np.linalg.cond(Areg) > 1e12:
        eps *= 10
        warnings.warn(f"singular regularized covariance; raising eps to {eps:.3g}", RuntimeWarning, stacklevel=3)
        Areg = Ab + eps * np.eye(n)
    R = V - W @ K
    D = np.linalg.solve(Areg, Kb @ R.T).T  # (d, n); Areg is symmetric
    return (D if B is None else D @ B.T), projected


def compute_update(plan: EditPlan, model: ModelCheckpoint, config: EditorConfig | None = None) -> dict[int, DeltaMatrix]:
    """Masked update of ``w_out`` for every layer in the plan.

    Unselected columns of the result are exactly zero.  In soft mode the
    selected columns are additionally scaled by the soft weights.
    """
    config = config or EditorConfig()
    out = {}
    for l in plan.target_layers:
        mask = plan.masks[l]
        sel = np.flatnonzero(mask.bits)
        if sel.size == 0:
            raise EditError(f"empty mask at layer {l}", stage="update")
        W = model.w_out(l).astype(np.float64)
        K = np.atleast_2d(plan.key_vectors[l]).T  # (m, b)
        V = np.atleast_2d(plan.value_targets[l]).T  # (d, b)
        d, m = W.shape
        C = plan.covariances.get(l)
        if C is None:
            C = np.zeros((m, m))
        C0 = None
        if l in plan.preserve_keys and len(plan.preserve_keys[l]):
            Kp = plan.preserve_keys[l]
            C0 = Kp.T @ Kp / len(Kp)
        delta = np.zeros((d, m))
        if config.mask_before_solve:
            # keys restricted to the selected neurons; the unselected part of
            # W k is held fixed and moved into the target
            Ks = K[sel]
            Vs = V - np.delete(W, sel, axis=1) @ np.delete(K, sel, axis=0)
            D, projected = _solve_columns(W[:, sel], Ks, Vs, C[np.ix_(sel, sel)], config.eps_scale,
                                          None if C0 is None else C0[np.ix_(sel, sel)], config.rank_cutoff,
                                          config.null_space, config.null_min_retain)
            delta[:, sel] = D
        else:
            D, projected = _solve_columns(W, K, V, C, config.eps_scale, C0, config.rank_cutoff, config.null_space,
                                          config.null_min_retain)
            delta[:, sel] = D[:, sel]
        if mask.soft_weights is not None:
            delta[:, sel] *= mask.soft_weights[sel][None, :]
        unsel = np.ones(m, dtype=bool)
        unsel[sel] = False
        delta[:, unsel] = 0.0
        if not np.isfinite(delta).all():
            raise EditError(f"non-finite update at layer {l}", stage="update")
        achieved = (W + delta) @ K
        res = float(np.max(np.linalg.norm(achieved - V, axis=0) / np.maximum(np.linalg.norm(V, axis=0), 1e-12)))
        out[l] = DeltaMatrix(l, delta, res, projected)
    return out


def apply_delta(model: ModelCheckpoint, dm: DeltaMatrix) -> None:
    """In-place: add the selected columns of ``dm`` to ``w_out``.  Columns with
    an all-zero delta are never written, so they stay bit-identical."""
    W = model.params[f"layers.{dm.layer}.ffn.w_out"]
    cols = np.flatnonzero(np.any(dm.delta != 0.0, axis=0))
    if cols.size:
        W[:, cols] = (W[:, cols].astype(np.float64) + dm.delta[:, cols]).astype(np.float32)


# --------------------------------------------------------------------------- orchestration


def _stage(stage: str, exc: Exception) -> EditError:
    if isinstance(exc, EditError):
        return exc
    err = EditError(f"{stage}: {exc}", stage=stage)
    if isinstance(exc, NeuronEditError):
        err.key = exc.key
    return err


def plan_masks(model: ModelCheckpoint, requests: Sequence[EditRequest], attr_cfg: AttributionConfig,
               mask_cfg: MaskingConfig, edit_cfg: EditorConfig) -> tuple[dict[int, NeuronMask], dict[int, AttributionMatrix]]:
    """Pooled attribution over every request's prompts and the resulting masks."""
    prompts, targets, positions, ids = [], [], [], []
    for qi, req in enumerate(requests):
        for pi, p in enumerate(edit_prompts(req, edit_cfg.contexts, model.config.max_seq_len)):
            prompts.append(p)
            targets.append(req.new_object)
            ids.append(f"{qi}:{pi}")
            if attr_cfg.position == "last_subject_token":
                if model.tokenizer is None:
                    raise DataError("last_subject_token needs a tokenizer", stage="attribute")
                positions.append(subject_position(p, model.tokenizer.id(req.subject)))
    attrs = attribute(model, prompts, targets, attr_cfg, positions=positions or None, prompt_ids=ids)
    masks = {l: make_mask(attrs[l], mask_cfg) for l in attr_cfg.layers}
    return masks, attrs


def apply_edit_batch(model: ModelCheckpoint, requests: Sequence[EditRequest],
                     attr_cfg: AttributionConfig | None = None, mask_cfg: MaskingConfig | None = None,
                     edit_cfg: EditorConfig | None = None, state: EditorState | None = None,
                     step: int = 0, dry_run: bool = False) -> tuple[ModelCheckpoint, list[EditOutcome]]:
    """One joint masked update for a batch of requests.

    Returns a new checkpoint; ``model`` is left untouched.  ``state`` (if
    given) is updated in place with the applied edit keys.  With
    ``dry_run`` the masks are planned and reported but no weights change.
    """
    if not requests:
        raise EditError("empty edit batch", stage="apply")
    attr_cfg = attr_cfg or AttributionConfig()
    mask_cfg = mask_cfg or MaskingConfig()
    edit_cfg = edit_cfg or EditorConfig()
    edit_cfg.validate()
    attr_cfg.validate(model)
    mask_cfg.validate()
    state = state if state is not None else EditorState()
    t0 = time.perf_counter()
    try:
        masks, _ = plan_masks(model, requests, attr_cfg, mask_cfg, edit_cfg)
    except Exception as e:  # noqa: BLE001 -- re-raised with its stage tag
        raise _stage("attribute", e) from e
    popcounts = {l: masks[l].popcount for l in attr_cfg.layers}
    empty = [l for l in attr_cfg.layers if popcounts[l] == 0]
    if empty:
        raise EditError(f"empty mask at layers {empty}", stage="mask")
    if dry_run:
        dt = time.perf_counter() - t0
        return model, [EditOutcome(step + i, r.subject, False, "dry_run", None, dict(popcounts), {}, None, dt,
                                   {l: masks[l].bits for l in masks}) for i, r in enumerate(requests)]

    edited = model.copy()
    layers = sorted(attr_cfg.layers)
    residuals = {}
    gains = [0.0] * len(requests)
    bare = [tuple(r.prompt) for r in requests]
    applied_keys = {}
    shared = None
    for idx, l in enumerate(layers):
        remaining = len(layers) - idx
        try:
            tr = forward_batch(edited, bare, capture=[l])
            keys = tr.activations[l]
            if edit_cfg.v_spread == "shared" and shared is not None:
                base = keys @ edited.w_out(l).T.astype(np.float64)
                targets = base + shared / len(layers)
            else:
                vts = [solve_value_target(edited, r, l, edit_cfg.v_steps, edit_cfg.v_lr, edit_cfg.v_anchor,
                                          edit_cfg.v_margin, edit_cfg.contexts) for r in requests]
                if idx == 0:
                    gains = [vt.gain for vt in vts]
                shift = np.stack([vt.v_star - vt.base_out for vt in vts])
                if edit_cfg.v_spread == "shared":
                    shared = shift
                    targets = np.stack([vt.base_out for vt in vts]) + shift / len(layers)
                else:
                    targets = np.stack([vt.base_out for vt in vts]) + shift / remaining
        except Exception as e:  # noqa: BLE001
            raise _stage("value_target", e) from e
        plan = EditPlan(
            target_layers=[l], masks={l: masks[l]}, key_vectors={l: keys}, value_targets={l: targets},
            covariances={l: state.covariance(l, model.config.d_ffn, edit_cfg)},
            preserve_keys={l: state.preserved[l]} if (edit_cfg.null_space and l in state.preserved) else {},
        )
        try:
            dms = compute_update(plan, edited, edit_cfg)
        except Exception as e:  # noqa: BLE001
            raise _stage("update", e) from e
        dm = dms[l]
        if edit_cfg.verify_masked_columns:
            off = ~masks[l].bits
            if np.any(dm.delta[:, off] != 0.0):
                raise EditError(f"masked-out column modified at layer {l}", stage="update")
        apply_delta(edited, dm)
        residuals[l] = dm.residual
        applied_keys[l] = keys
    for l, keys in applied_keys.items():
        state.add_keys(l, keys)
    state.n_edits += len(requests)
    pred = forward_batch(edited, bare).log_probs.argmax(-1)
    dt = time.perf_counter() - t0
    outcomes = [EditOutcome(step + i, r.subject, bool(pred[i] == r.new_object), None, None, dict(popcounts),
                            dict(residuals), gains[i], dt, {l: masks[l].bits for l in masks})
                for i, r in enumerate(requests)]
    return edited, outcomes


def apply_edit(model: ModelCheckpoint, request: EditRequest, attr_cfg: AttributionConfig | None = None,
               mask_cfg: MaskingConfig | None = None, edit_cfg: EditorConfig | None = None,
               state: EditorState | None = None, step: int = 0,
               dry_run: bool = False) -> tuple[ModelCheckpoint, EditOutcome]:
    edited, outcomes = apply_edit_batch(model, [request], attr_cfg, mask_cfg, edit_cfg, state, step, dry_run)
    return edited, outcomes[0]
