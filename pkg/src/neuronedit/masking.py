"""Entropy-guided sparse neuron masks built from attribution matrices.

Two selection channels per layer:

* general  -- ``r_ge[i]`` counts prompts with strictly positive attribution;
  its ratio comes from the mean normalized entropy of the row-wise softmax
  of ``alpha * I``.
* specific -- ``r_sp[i]`` is the maximum attribution over prompts; its ratio
  comes from the normalized entropy of the distribution of those maxima.

``rho = clamp(H * a + b, 0, 1)`` and each channel keeps exactly
``ceil(rho * d)`` neurons (ties to the lower index).
"""

from __future__ import annotations

import base64
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from .attribution import AttributionMatrix
from .errors import ConfigError, DataError

MODES = ("union", "general_only", "specific_only", "overlap_only", "non_overlap_only", "soft")


@dataclass
class MaskingConfig:
    alpha: float = 1.0
    a_ge: float = 0.5
    b_ge: float = 0.3
    a_sp: float = 0.5
    b_sp: float = 0.3
    mode: str = "union"
    ratio: str = "dynamic"  # "dynamic" (entropy-guided) or "fixed"
    fixed_rho_ge: float = 0.3
    fixed_rho_sp: float = 0.3

    def validate(self) -> None:
        if not self.alpha > 0 or not math.isfinite(self.alpha):
            raise ConfigError("alpha must be a positive real", stage="mask", key="masking.alpha")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mask mode {self.mode!r}", stage="mask", key="masking.mode")
        if self.ratio not in ("dynamic", "fixed"):
            raise ConfigError(f"unknown ratio rule {self.ratio!r}", stage="mask", key="masking.ratio")
        for key in ("fixed_rho_ge", "fixed_rho_sp"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1]", stage="mask", key=f"masking.{key}")


@dataclass
class SelectionScores:
    r_general: np.ndarray   # int, counts of positive entries per neuron
    r_specific: np.ndarray  # float, per-neuron maximum over prompts


@dataclass
class EntropyStats:
    h_general: float
    h_specific: float
    alpha: float
    rho_general: float
    rho_specific: float
    a_ge: float = 0.5
    b_ge: float = 0.3
    a_sp: float = 0.5
    b_sp: float = 0.3


@dataclass
class NeuronMask:
    layer: int
    bits: np.ndarray
    scores: SelectionScores
    stats: EntropyStats
    tau_ge: float
    tau_sp: float
    mode: str
    general_bits: np.ndarray = field(default=None, repr=False)
    specific_bits: np.ndarray = field(default=None, repr=False)
    soft_weights: np.ndarray | None = None

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    @property
    def weights(self) -> np.ndarray:
        """Per-column multiplier for the weight update."""
        if self.soft_weights is not None:
            return self.soft_weights
        return self.bits.astype(np.float64)

    def to_record(self) -> dict:
        rec = {
            "layer": int(self.layer),
            "mode": self.mode,
            "rho_ge": float(self.stats.rho_general),
            "rho_sp": float(self.stats.rho_specific),
            "tau_ge": _finite_or_none(self.tau_ge),
            "tau_sp": _finite_or_none(self.tau_sp),
            "popcount": self.popcount,
            "n_neurons": int(self.bits.size),
            "bits": base64.b64encode(np.packbits(self.bits.astype(bool), bitorder="little").tobytes()).decode(),
        }
        if self.soft_weights is not None:
            rec["soft_weights"] = [float(v) for v in self.soft_weights]
        return rec


def _finite_or_none(v: float):
    return float(v) if math.isfinite(v) else None


def decode_bits(record: dict) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(record["bits"]), dtype=np.uint8)
    return np.unpackbits(raw, bitorder="little")[: record["n_neurons"]].astype(bool)


def _check(attr: AttributionMatrix) -> np.ndarray:
    s = attr.scores
    if s.size == 0:
        raise DataError("empty attribution matrix", stage="mask")
    if not np.isfinite(s).all():
        raise DataError("non-finite attribution entries", stage="mask")
    return s


def selection_scores(attr: AttributionMatrix) -> SelectionScores:
    s = _check(attr)
    return SelectionScores(r_general=(s > 0).sum(axis=0).astype(np.int64), r_specific=s.max(axis=0))


def _entropy(p: np.ndarray, logp: np.ndarray) -> np.ndarray:
    return -(p * np.where(p > 0, logp, 0.0)).sum(axis=-1)


def general_entropy(scores: np.ndarray, alpha: float) -> float:
    n, d = scores.shape
    logp = log_softmax(alpha * scores, axis=1)
    h = _entropy(np.exp(logp), logp).sum() / (n * math.log(d))
    return float(min(max(h, 0.0), 1.0))


def specific_entropy(maxima: np.ndarray) -> float:
    # negative maxima are clipped; a layer with no positive maximum has zero entropy
    m = np.clip(maxima, 0.0, None)
    total = m.sum()
    if total <= 0:
        return 0.0
    q = m / total
    with np.errstate(divide="ignore"):
        logq = np.log(q)
    h = _entropy(q, logq) / math.log(m.size)
    return float(min(max(h, 0.0), 1.0))


def entropy_stats(attr: AttributionMatrix, alpha: float = 1.0, a_ge: float = 0.5, b_ge: float = 0.3,
                  a_sp: float = 0.5, b_sp: float = 0.3) -> EntropyStats:
    s = _check(attr)
    if s.shape[1] < 2:
        raise DataError("entropy needs at least 2 neurons (log d_l > 0)", stage="mask")
    if not alpha > 0 or not math.isfinite(alpha):
        raise ConfigError("alpha must be a positive real", stage="mask", key="masking.alpha")
    h_ge = general_entropy(s, alpha)
    h_sp = specific_entropy(s.max(axis=0))
    return EntropyStats(
        h_general=h_ge, h_specific=h_sp, alpha=alpha,
        rho_general=float(np.clip(h_ge * a_ge + b_ge, 0.0, 1.0)),
        rho_specific=float(np.clip(h_sp * a_sp + b_sp, 0.0, 1.0)),
        a_ge=a_ge, b_ge=b_ge, a_sp=a_sp, b_sp=b_sp,
    )


def selection_count(rho: float, d: int) -> int:
    """ceil(rho * d), guarded against float noise such as 0.3 * 10 = 3.0000000000000004."""
    return int(min(d, max(0, math.ceil(rho * d - 1e-9))))


def top_fraction(score: np.ndarray, rho: float) -> tuple[np.ndarray, float]:
    """Select exactly ``ceil(rho * d)`` entries by descending score, lower index
    first among ties.  Returns (bits, threshold); the threshold is the score
    of the last selected entry (the empirical ``1 - rho`` quantile), +inf if
    nothing is selected."""
    if not 0.0 <= rho <= 1.0:
        raise DataError(f"selection ratio {rho} outside [0, 1]", stage="mask")
    d = score.size
    k = selection_count(rho, d)
    order = np.lexsort((np.arange(d), -np.asarray(score, dtype=np.float64)))
    bits = np.zeros(d, dtype=bool)
    bits[order[:k]] = True
    tau = float(score[order[k - 1]]) if k > 0 else math.inf
    return bits, tau


def build_mask(scores: SelectionScores, stats: EntropyStats, mode: str = "union", layer: int = -1,
               soft_weights: np.ndarray | None = None) -> NeuronMask:
    if mode not in MODES:
        raise ConfigError(f"unknown mask mode {mode!r}", stage="mask", key="masking.mode")
    if mode == "soft" and soft_weights is None:
        raise ConfigError("soft mode requested without soft scores", stage="mask", key="masking.mode")
    ge, tau_ge = top_fraction(scores.r_general, stats.rho_general)
    sp, tau_sp = top_fraction(scores.r_specific, stats.rho_specific)
    if mode == "union":
        bits = ge | sp
    elif mode == "general_only":
        bits = ge.copy()
    elif mode == "specific_only":
        bits = sp.copy()
    elif mode == "overlap_only":
        bits = ge & sp
    elif mode == "non_overlap_only":
        bits = ge ^ sp
    else:
        bits = np.asarray(soft_weights) > 0
    return NeuronMask(layer, bits, scores, stats, tau_ge, tau_sp, mode, ge, sp,
                      None if mode != "soft" else np.asarray(soft_weights, dtype=np.float64))


def soft_weights_from(attr: AttributionMatrix) -> np.ndarray:
    m = np.clip(_check(attr).max(axis=0), 0.0, None)
    top = m.max()
    return m / top if top > 0 else np.zeros_like(m)


def build_soft_mask(attr: AttributionMatrix, stats: EntropyStats) -> NeuronMask:
    return build_mask(selection_scores(attr), stats, "soft", attr.layer, soft_weights_from(attr))


def make_mask(attr: AttributionMatrix, config: MaskingConfig) -> NeuronMask:
    """Full pipeline for one layer: scores -> entropy ratios -> mask."""
    config.validate()
    stats = entropy_stats(attr, config.alpha, config.a_ge, config.b_ge, config.a_sp, config.b_sp)
    if config.ratio == "fixed":
        stats.rho_general, stats.rho_specific = config.fixed_rho_ge, config.fixed_rho_sp
    if config.mode == "soft":
        return build_mask(selection_scores(attr), stats, "soft", attr.layer, soft_weights_from(attr))
    return build_mask(selection_scores(attr), stats, config.mode, attr.layer)
