"""Parameter drift, neuron-role counts and attribution memory accounting.

Drift compares the columns of ``w_out`` (one column per FFN neuron) between a
base and an edited checkpoint:

* ``l2``      per-column Euclidean shift ``||w_i' - w_i||``
* ``cosine``  per-column cosine similarity (identical columns give exactly 1;
  a zero column against a non-zero one gives 0)
* ``wasserstein_1d``  mean absolute difference of the sorted column norms,
  i.e. the 1-D W1 distance between the two norm distributions.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .attribution import AttributionMatrix
from .errors import ConfigError, DataError
from .masking import MaskingConfig, build_mask, entropy_stats, selection_scores
from .model import ModelCheckpoint


@dataclass
class LayerDrift:
    wasserstein_1d: float = 0.0
    cosine_mean: float = 1.0
    cosine_std: float = 0.0
    l2_mean: float = 0.0
    l2_std: float = 0.0


@dataclass
class DriftStats:
    layers: dict[int, LayerDrift] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {str(l): asdict(d) for l, d in sorted(self.layers.items())}

    @classmethod
    def from_record(cls, rec: Mapping) -> "DriftStats":
        return cls({int(l): LayerDrift(**d) for l, d in rec.items()})

    def rows(self) -> list[tuple[int, str, float]]:
        return [(l, k, v) for l, d in sorted(self.layers.items()) for k, v in asdict(d).items()]


def wasserstein_1d(a: np.ndarray, b: np.ndarray) -> float:
    """W1 between two equal-size empirical distributions."""
    a, b = np.sort(np.asarray(a, dtype=np.float64)), np.sort(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise DataError("wasserstein_1d needs equal sample counts", stage="diagnose")
    return float(np.mean(np.abs(a - b))) if a.size else 0.0


def column_cosine(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    na, nb = np.linalg.norm(A, axis=0), np.linalg.norm(B, axis=0)
    same = np.all(A == B, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.einsum("ij,ij->j", A, B) / (na * nb)
    cos = np.where(same, 1.0, np.where((na == 0) | (nb == 0), 0.0, cos))
    return np.clip(cos, -1.0, 1.0)


def layer_drift(base_w: np.ndarray, edited_w: np.ndarray) -> LayerDrift:
    A, B = base_w.astype(np.float64), edited_w.astype(np.float64)
    if A.shape != B.shape:
        raise DataError("weight shapes differ", stage="diagnose")
    l2 = np.linalg.norm(B - A, axis=0)
    cos = column_cosine(A, B)
    return LayerDrift(
        wasserstein_1d=wasserstein_1d(np.linalg.norm(A, axis=0), np.linalg.norm(B, axis=0)),
        cosine_mean=float(cos.mean()), cosine_std=float(cos.std()),
        l2_mean=float(l2.mean()), l2_std=float(l2.std()),
    )


def drift(base: ModelCheckpoint, edited: ModelCheckpoint, layers: Sequence[int] | None = None) -> DriftStats:
    if base.config != edited.config:
        raise ConfigError("drift needs checkpoints with identical configs", stage="diagnose", key="model")
    layers = range(base.config.n_layers) if layers is None else layers
    return DriftStats({int(l): layer_drift(base.w_out(l), edited.w_out(l)) for l in layers})


# --------------------------------------------------------------------------- neuron roles


@dataclass
class LayerRoles:
    general: int
    specific: int
    overlap: int
    overlap_ratio: float  # overlap / union, 0 for an empty union


@dataclass
class RoleProfile:
    layers: dict[int, LayerRoles] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {str(l): asdict(r) for l, r in sorted(self.layers.items())}


def role_counts(general_bits: np.ndarray, specific_bits: np.ndarray) -> LayerRoles:
    g, s = general_bits.astype(bool), specific_bits.astype(bool)
    ov = int((g & s).sum())
    union = int((g | s).sum())
    return LayerRoles(int(g.sum()), int(s.sum()), ov, ov / union if union else 0.0)


def role_profile(attrs: Mapping[int, AttributionMatrix], config: MaskingConfig | None = None) -> RoleProfile:
    """Per-layer sizes of the two selection channels and their overlap."""
    config = config or MaskingConfig()
    config.validate()
    out = {}
    for l, attr in sorted(attrs.items()):
        stats = entropy_stats(attr, config.alpha, config.a_ge, config.b_ge, config.a_sp, config.b_sp)
        if config.ratio == "fixed":
            stats.rho_general, stats.rho_specific = config.fixed_rho_ge, config.fixed_rho_sp
        mask = build_mask(selection_scores(attr), stats, "union", l)
        out[int(l)] = role_counts(mask.general_bits, mask.specific_bits)
    return RoleProfile(out)


# --------------------------------------------------------------------------- memory


SCALAR_FIELDS = 11  # EntropyStats (9 reals) plus the two thresholds


@dataclass
class LayerMemory:
    coefficient_bytes: int
    bitset_bytes: int
    scalar_bytes: int
    nonzero_neurons: int | None = None
    mask_popcount: int | None = None

    @property
    def total(self) -> int:
        return self.coefficient_bytes + self.bitset_bytes + self.scalar_bytes


def memory_accounting(d_ffn: int, n_prompts: int, layers: Sequence[int], coeff_bytes: int = 4,
                      attrs: Mapping[int, AttributionMatrix] | None = None,
                      masks: Mapping[int, object] | None = None) -> dict:
    """Bytes needed to hold one step's attribution state per profiled layer.

    Coefficients are an ``n_prompts x d_ffn`` matrix of ``coeff_bytes``-wide
    reals, the mask is a packed bitset, scalars are 8-byte reals.
    """
    if d_ffn < 1 or n_prompts < 0:
        raise DataError("d_ffn must be >= 1 and n_prompts >= 0", stage="diagnose")
    per = {}
    for l in layers:
        nz = None
        if attrs is not None and l in attrs:
            nz = int(np.any(attrs[l].scores != 0, axis=0).sum())
        pop = masks[l].popcount if masks is not None and l in masks else None
        per[int(l)] = LayerMemory(n_prompts * d_ffn * coeff_bytes, math.ceil(d_ffn / 8), SCALAR_FIELDS * 8, nz, pop)
    return {
        "layers": {str(l): {**asdict(m), "total": m.total} for l, m in sorted(per.items())},
        "total_bytes": sum(m.total for m in per.values()),
    }


# --------------------------------------------------------------------------- exports


def drift_to_csv(stats: DriftStats, path: str | Path, label: str = "") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "layer", "metric", "value"])
        for l, k, v in stats.rows():
            w.writerow([label, l, k, repr(float(v))])


def roles_to_csv(profile: RoleProfile, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "general", "specific", "overlap", "overlap_ratio"])
        for l, r in sorted(profile.layers.items()):
            w.writerow([l, r.general, r.specific, r.overlap, repr(float(r.overlap_ratio))])


def export_weights_csv(model: ModelCheckpoint, layer: int, path: str | Path) -> None:
    """Raw ``w_out`` of one layer, one row per neuron (column), for external plotting."""
    if not 0 <= layer < model.config.n_layers:
        raise DataError(f"invalid layer index {layer}", stage="export")
    W = model.w_out(layer)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["neuron"] + [f"d{i}" for i in range(W.shape[0])])
        for i in range(W.shape[1]):
            w.writerow([i] + [repr(float(v)) for v in W[:, i]])


def dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, indent=2)
