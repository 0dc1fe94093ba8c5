"""Lifelong-editing runs, mask-mode ablations and neuron-role ablations.

Metrics at a horizon ``T`` (``T`` edits applied so far):

* ``rel``  fraction of the first ``T`` edit prompts answering the new object
* ``gen``  the same over their paraphrases
* ``loc``  fraction of the stream's locality probes still answering their
  original object (a fixed probe set, so ``T = 0`` gives the base accuracy)
* ``general_probe_accuracy``  recall on a held-out suite of never-edited facts

Failed edit steps leave the model unchanged and count as failures.  Reports
are canonical JSON (sorted keys) and reproduce byte-for-byte for identical
inputs; wall-clock timings live outside the canonical report.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import __version__
from .attribution import AttributionConfig, attribute
from .corpus import (FactWorld, Probe, ProbeSuite, context_prefixes, edited_pairs, held_out_prompts,
                     make_probe_suite)
from .diagnostics import DriftStats, drift
from .editor import EditOutcome, EditorConfig, EditorState, apply_edit_batch, collect_preserved_keys
from .editor_types import EditRequest
from .errors import ConfigError, DataError, EditError, NeuronEditError
from .masking import MaskingConfig
from .model import Intervention, ModelCheckpoint, forward_batch, predict

log = logging.getLogger(__name__)

EVAL_POLICIES = ("at_horizons", "final_only")
# "unedited": preserved keys come from any fact the stream does not edit;
# "disjoint": they also avoid every fact used as a locality or general probe
PRESERVE_POOLS = ("unedited", "disjoint")


@dataclass
class RunConfig:
    horizons: tuple[int, ...] = (10, 50, 100, 200)
    batch_size: int = 1
    eval_policy: str = "at_horizons"
    seed: int = 0
    n_contexts: int = 4
    n_preserved: int = 1000
    n_general_probes: int = 200
    cumulative: bool = True
    check_invariants: bool = True
    preserve_pool: str = "unedited"
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    editor: EditorConfig = field(default_factory=EditorConfig)

    def validate(self) -> None:
        h = list(self.horizons)
        if not h:
            raise ConfigError("horizons must be non-empty", stage="run", key="run.horizons")
        if any(t < 0 for t in h) or any(b <= a for a, b in zip(h, h[1:])):
            raise ConfigError("horizons must be non-negative and strictly increasing", stage="run",
                              key="run.horizons")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", stage="run", key="run.batch_size")
        if self.eval_policy not in EVAL_POLICIES:
            raise ConfigError(f"unknown eval_policy {self.eval_policy!r}", stage="run", key="run.eval_policy")
        if self.preserve_pool not in PRESERVE_POOLS:
            raise ConfigError(f"unknown preserve_pool {self.preserve_pool!r}", stage="run", key="run.preserve_pool")
        for key in ("n_contexts", "n_preserved", "n_general_probes"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0", stage="run", key=f"run.{key}")
        self.attribution.validate()
        self.masking.validate()
        self.editor.validate()

    def to_record(self) -> dict:
        rec = dataclasses.asdict(self)
        rec["horizons"] = list(self.horizons)
        rec["attribution"]["layers"] = list(self.attribution.layers)
        rec["editor"]["contexts"] = [list(c) for c in self.editor.contexts]
        return rec

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_record(), sort_keys=True).encode()).hexdigest()


def all_ones(masking: MaskingConfig) -> MaskingConfig:
    """The unmasked baseline: every neuron selected."""
    return dataclasses.replace(masking, mode="union", ratio="fixed", fixed_rho_ge=1.0, fixed_rho_sp=1.0)


# --------------------------------------------------------------------------- reports


@dataclass
class HorizonRecord:
    T: int
    rel: float | None
    gen: float | None
    loc: float
    general_probe_accuracy: float
    n_failed: int
    drift: DriftStats

    def to_record(self) -> dict:
        return {"T": self.T, "rel": self.rel, "gen": self.gen, "loc": self.loc,
                "general_probe_accuracy": self.general_probe_accuracy, "n_failed": self.n_failed,
                "drift": self.drift.to_record()}


@dataclass
class EditRunReport:
    horizons: list[HorizonRecord]
    config: dict
    provenance: dict
    outcomes: list[EditOutcome] = field(default_factory=list, repr=False)
    timings: dict = field(default_factory=dict, repr=False)  # wall-clock, not part of the canonical report
    final_model: ModelCheckpoint | None = field(default=None, repr=False)

    def to_record(self, include_timing: bool = False) -> dict:
        rec = {"schema": "edit-run-report/1", "config": self.config, "provenance": self.provenance,
               "horizons": [h.to_record() for h in self.horizons],
               "failures": [{"step": o.step, "stage": o.stage, "error": o.error}
                            for o in self.outcomes if o.stage is not None]}
        if include_timing:
            rec["timings"] = self.timings
        return rec

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_record(include_timing), sort_keys=True, indent=2) + "\n"

    def csv_rows(self) -> list[tuple[int, str, float | None]]:
        rows = []
        for h in self.horizons:
            for k in ("rel", "gen", "loc", "general_probe_accuracy", "n_failed"):
                rows.append((h.T, k, getattr(h, k)))
            for l, name, v in h.drift.rows():
                rows.append((h.T, f"drift.layer{l}.{name}", v))
        return rows

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["T", "metric", "value"])
            for T, k, v in self.csv_rows():
                w.writerow([T, k, "" if v is None else repr(float(v))])

    def save(self, path: str | Path, include_timing: bool = False) -> None:
        Path(path).write_text(self.to_json(include_timing))

    def final(self) -> HorizonRecord:
        return self.horizons[-1]


def save_outcomes(path: str | Path, outcomes: Sequence[EditOutcome]) -> None:
    with open(path, "w") as fh:
        for o in outcomes:
            fh.write(json.dumps(o.to_record(), sort_keys=True) + "\n")


# --------------------------------------------------------------------------- evaluation


def accuracy(model: ModelCheckpoint, prompts: Sequence[Sequence[int]], expected: Sequence[int],
             intervention: Intervention | None = None) -> float | None:
    if len(prompts) == 0:
        return None
    return float(np.mean(predict(model, prompts, intervention) == np.asarray(expected)))


@dataclass
class RunResources:
    """Everything a run needs besides the model and the stream."""

    contexts: tuple[tuple[int, ...], ...]
    preserved_prompts: list[tuple[int, ...]]
    general_probes: ProbeSuite
    locality: ProbeSuite


def prepare_resources(world: FactWorld, model: ModelCheckpoint, stream: Sequence[EditRequest],
                      config: RunConfig) -> RunResources:
    """Context prefixes, preserved-key prompts and probe suites.

    General probes come from facts that are neither edited nor used as
    locality probes.  Preserved-key prompts never touch an edited fact; with
    ``preserve_pool="disjoint"`` they also avoid every probed fact.
    """
    config.validate()
    tok = model.tokenizer or world.tokenizer()
    edited = edited_pairs(world, stream, tok)
    by_prompt = {tuple(tok.encode(world.render(s, r, t))): (s, r)
                 for s, r, _ in world.facts for t in range(len(world.templates[r]))}
    loc_pairs = {by_prompt[tuple(p)] for q in stream for p, _ in q.locality_probes if tuple(p) in by_prompt}
    general = make_probe_suite(world, edited | loc_pairs, config.n_general_probes, seed=config.seed, tokenizer=tok)
    general_pairs = {by_prompt[p.prompt] for p in general.probes if p.prompt in by_prompt}
    excluded = edited | loc_pairs | general_pairs if config.preserve_pool == "disjoint" else edited
    preserved = held_out_prompts(world, excluded, config.n_preserved, seed=config.seed, tokenizer=tok)
    locality = ProbeSuite([Probe(tuple(p), int(y)) for q in stream for p, y in q.locality_probes], "locality")
    contexts = context_prefixes(world, config.n_contexts, seed=config.seed, tokenizer=tok)
    return RunResources(contexts, preserved, general, locality)


def _stream_digest(stream: Sequence[EditRequest]) -> str:
    h = hashlib.sha256()
    for q in stream:
        h.update(json.dumps([q.prompt, q.old_object, q.new_object, q.paraphrases, q.locality_probes]).encode())
    return h.hexdigest()


def _provenance(model: ModelCheckpoint, stream: Sequence[EditRequest], config: RunConfig,
                world: FactWorld | None) -> dict:
    return {
        "config_hash": config.digest(),
        "seeds": {"run": config.seed, "model": model.config.seed, "world": None if world is None else world.seed},
        "model_digest": model.digest(),
        "stream_digest": _stream_digest(stream),
        "stream_length": len(stream),
        "versions": {"neuronedit": __version__, "numpy": np.__version__, "torch": torch.__version__,
                     "python": platform.python_version()},
    }


def _batches(n_steps: int, batch_size: int, horizons: Sequence[int]) -> list[tuple[int, int]]:
    """Consecutive [start, stop) batches that never straddle a horizon."""
    cuts = sorted({h for h in horizons if 0 < h < n_steps} | {n_steps})
    out, start = [], 0
    for cut in cuts:
        while start < cut:
            stop = min(start + batch_size, cut)
            out.append((start, stop))
            start = stop
    return out


def _check_invariants(before: ModelCheckpoint, after: ModelCheckpoint, outcome: EditOutcome,
                      layers: Sequence[int]) -> list[str]:
    bad = []
    targets = {f"layers.{l}.ffn.w_out" for l in layers}
    for name, arr in before.params.items():
        if name not in targets and not np.array_equal(arr, after.params[name]):
            bad.append(f"non-target parameter {name} changed")
    for l in layers:
        off = ~outcome.mask_bits[l]
        if not np.array_equal(before.w_out(l)[:, off], after.w_out(l)[:, off]):
            bad.append(f"masked-out column of layer {l} changed")
    return bad


def _run(model: ModelCheckpoint, stream: Sequence[EditRequest], config: RunConfig, world: FactWorld | None,
         resources: RunResources | None, on_step: Callable | None = None) -> EditRunReport:
    config.validate()
    horizons = list(config.horizons)
    if len(stream) < horizons[-1]:
        raise DataError(f"stream has {len(stream)} edits, fewer than the largest horizon {horizons[-1]}",
                        stage="run", key="run.horizons")
    if resources is None:
        if world is None:
            raise DataError("a world (or prepared resources) is needed for a run", stage="run")
        resources = prepare_resources(world, model, stream, config)
    editor = dataclasses.replace(config.editor, contexts=resources.contexts)
    run_cfg = dataclasses.replace(config, editor=editor)
    layers = list(config.attribution.layers)
    state = collect_preserved_keys(model, resources.preserved_prompts, layers)
    eval_at = set(horizons) if config.eval_policy == "at_horizons" else {horizons[-1]}
    n_steps = horizons[-1]

    current = model
    outcomes: list[EditOutcome] = []
    records: list[HorizonRecord] = []
    step_times, check_time = [], 0.0
    horizon_times: dict[str, float] = {}
    violations: list[str] = []
    last_T = 0

    def evaluate(T: int) -> HorizonRecord:
        nonlocal last_T
        lo = 0 if config.cumulative else last_T
        done = stream[lo:T]
        rel = accuracy(current, [q.prompt for q in done], [q.new_object for q in done])
        gen = accuracy(current, [p for q in done for p in q.paraphrases],
                       [q.new_object for q in done for _ in q.paraphrases])
        loc = accuracy(current, resources.locality.prompts(), resources.locality.expected())
        gpa = accuracy(current, resources.general_probes.prompts(), resources.general_probes.expected())
        last_T = T
        failed = sum(1 for o in outcomes[:T] if not o.success)
        return HorizonRecord(T, rel, gen, 1.0 if loc is None else loc, 1.0 if gpa is None else gpa, failed,
                             drift(model, current))

    if 0 in eval_at:
        records.append(evaluate(0))
    t_run = time.perf_counter()
    for start, stop in _batches(n_steps, config.batch_size, horizons):
        batch = stream[start:stop]
        t0 = time.perf_counter()
        try:
            nxt, outs = apply_edit_batch(current, batch, config.attribution, config.masking, editor, state, step=start)
        except EditError as e:
            nxt = current
            outs = [EditOutcome(start + i, q.subject, False, e.stage or "apply", str(e)) for i, q in enumerate(batch)]
        step_times.append(time.perf_counter() - t0)
        if config.check_invariants and nxt is not current:
            tc = time.perf_counter()
            bad = _check_invariants(current, nxt, outs[0], layers)
            check_time += time.perf_counter() - tc
            if bad:
                violations.extend(f"step {start}: {b}" for b in bad)
                raise EditError("; ".join(bad), stage="apply")
        current = nxt
        outcomes.extend(outs)
        if on_step is not None:
            on_step(stop, current, outs)
        if stop in eval_at:
            records.append(evaluate(stop))
            horizon_times[str(stop)] = float(np.mean(step_times))
    total = time.perf_counter() - t_run
    timings = {
        "total_seconds": total,
        "mean_step_time": float(np.mean(step_times)) if step_times else 0.0,
        "invariant_check_seconds": check_time,
        "invariant_overhead": check_time / max(total - check_time, 1e-12),
        "mean_step_time_at": horizon_times,
    }
    report = EditRunReport(records, run_cfg.to_record(), _provenance(model, stream, config, world), outcomes,
                           timings, current)
    report.provenance["invariant_checks"] = {"enabled": config.check_invariants, "violations": violations}
    return report


def run_sequential(model: ModelCheckpoint, stream: Sequence[EditRequest], config: RunConfig | None = None,
                   world: FactWorld | None = None, resources: RunResources | None = None,
                   on_step: Callable | None = None) -> EditRunReport:
    """One edit per step, in stream order."""
    config = dataclasses.replace(config or RunConfig(), batch_size=1)
    return _run(model, stream, config, world, resources, on_step)


def run_batched(model: ModelCheckpoint, stream: Sequence[EditRequest], config: RunConfig | None = None,
                world: FactWorld | None = None, resources: RunResources | None = None,
                on_step: Callable | None = None) -> EditRunReport:
    """Consecutive groups of ``config.batch_size`` edits, one joint update each."""
    return _run(model, stream, config or RunConfig(), world, resources, on_step)


# --------------------------------------------------------------------------- mask-mode ablation


def mask_mode_arms(masking: MaskingConfig) -> dict[str, MaskingConfig]:
    r = dataclasses.replace
    return {
        "general_only": r(masking, mode="general_only", ratio="dynamic"),
        "specific_only": r(masking, mode="specific_only", ratio="dynamic"),
        "fixed_union": r(masking, mode="union", ratio="fixed"),
        "dynamic_union": r(masking, mode="union", ratio="dynamic"),
        "overlap_only": r(masking, mode="overlap_only", ratio="dynamic"),
        "non_overlap_only": r(masking, mode="non_overlap_only", ratio="dynamic"),
    }


def ablation_mask_modes(model: ModelCheckpoint, stream: Sequence[EditRequest], config: RunConfig | None = None,
                        world: FactWorld | None = None, arms: Sequence[str] | None = None) -> dict:
    """Identical stream and seeds under each mask mode; final-horizon metrics side by side."""
    config = config or RunConfig()
    if world is None:
        raise DataError("ablation_mask_modes needs the world", stage="ablate")
    resources = prepare_resources(world, model, stream, config)
    table = mask_mode_arms(config.masking)
    arms = list(table) if arms is None else list(arms)
    rows = []
    for name in arms:
        if name not in table:
            raise ConfigError(f"unknown ablation arm {name!r}", stage="ablate", key="ablate.arms")
        cfg = dataclasses.replace(config, masking=table[name], eval_policy="final_only", batch_size=1)
        rep = _run(model, stream, cfg, world, resources)
        f = rep.final()
        skipped = sum(1 for o in rep.outcomes if o.stage == "mask")
        rows.append({"arm": name, "T": f.T, "rel": f.rel, "gen": f.gen, "loc": f.loc,
                     "general_probe_accuracy": f.general_probe_accuracy, "n_failed": f.n_failed,
                     "skipped": skipped})
    return {"schema": "mask-mode-ablation/1", "rows": rows}


def paired_baseline(model: ModelCheckpoint, stream: Sequence[EditRequest], config: RunConfig | None = None,
                    world: FactWorld | None = None) -> dict[str, EditRunReport]:
    """The configured mask against the all-ones baseline on the same stream."""
    config = config or RunConfig()
    if world is None:
        raise DataError("paired_baseline needs the world", stage="run")
    resources = prepare_resources(world, model, stream, config)
    masked = run_sequential(model, stream, config, world, resources)
    base = run_sequential(model, stream, dataclasses.replace(config, masking=all_ones(config.masking)), world,
                          resources)
    return {"masked": masked, "all_ones": base}


# --------------------------------------------------------------------------- neuron roles


@dataclass
class NeuronClasses:
    """Per layer, neuron indices of each role ranked by attribution (best first)."""

    general: dict[int, np.ndarray]
    domain: dict[str, dict[int, np.ndarray]]
    task: dict[str, dict[int, np.ndarray]]
    task_scores: dict[str, dict[int, np.ndarray]] = field(repr=False, default_factory=dict)


def classify_neurons(model: ModelCheckpoint, tasks: Mapping[str, ProbeSuite], layers: Sequence[int],
                     lam: float = 10.0, strategy: str = "lps",
                     domains: Mapping[str, object] | None = None) -> NeuronClasses:
    """A neuron is positive for a task when its mean attribution towards the
    expected tokens of that task is > 0.  General: positive on every task.
    Domain-specific: positive on every task of one domain and on none
    outside it.  Task-specific: positive on exactly one task."""
    names = sorted(tasks)
    if len(names) < 2:
        raise DataError("neuron-role ablation needs at least 2 tasks", stage="ablate")
    cfg = AttributionConfig(lam=lam, layers=tuple(layers), strategy=strategy)
    scores = {}
    for t in names:
        suite = tasks[t]
        if not suite.probes:
            raise DataError(f"task {t!r} has no probes", stage="ablate")
        A = attribute(model, suite.prompts(), list(suite.expected()), cfg)
        scores[t] = {l: A[l].scores.mean(axis=0) for l in layers}
    general, task = {}, {t: {} for t in names}
    dom_names = sorted({str(domains[t]) for t in names}) if domains else []
    domain = {d: {} for d in dom_names}
    for l in layers:
        M = np.stack([scores[t][l] for t in names])
        pos = M > 0
        npos = pos.sum(axis=0)

        def ranked(idx, s):
            return idx[np.lexsort((idx, -s[idx]))]

        general[l] = ranked(np.flatnonzero(npos == len(names)), M.mean(axis=0))
        for ti, t in enumerate(names):
            task[t][l] = ranked(np.flatnonzero(pos[ti] & (npos == 1)), M[ti])
        for d in dom_names:
            inside = np.array([str(domains[t]) == d for t in names])
            ok = pos[inside].all(axis=0) & ~pos[~inside].any(axis=0) if (~inside).any() else pos[inside].all(axis=0)
            domain[d][l] = ranked(np.flatnonzero(ok), M[inside].mean(axis=0))
    return NeuronClasses(general, domain, task, scores)


def _top(sel: Mapping[int, np.ndarray], k: int) -> dict[int, list[int]]:
    return {l: [int(i) for i in idx[:k]] for l, idx in sel.items() if k > 0 and len(idx)}


def neuron_role_ablation(model: ModelCheckpoint, tasks: Mapping[str, ProbeSuite], top_k: Sequence[int] = (10, 50),
                         layers: Sequence[int] = (1, 2, 3), lam: float = 10.0, strategy: str = "lps",
                         domains: Mapping[str, object] | None = None) -> dict:
    """Zero the top-k neurons (per profiled layer) of each role and report
    per-task accuracy deltas against the unablated model."""
    d = model.config.d_ffn
    for k in top_k:
        if not 0 <= k <= d:
            raise DataError(f"top-k {k} outside [0, d_ffn={d}]", stage="ablate", key="ablate.top_k")
    classes = classify_neurons(model, tasks, layers, lam, strategy, domains)
    names = sorted(tasks)

    def measure(iv: Intervention | None) -> tuple[dict[str, float], dict[str, float]]:
        acc, lp = {}, {}
        for t in names:
            y = tasks[t].expected()
            tr = forward_batch(model, tasks[t].prompts(), intervention=iv)
            acc[t] = float(np.mean(tr.log_probs.argmax(-1) == y))
            lp[t] = float(np.mean(tr.log_probs[np.arange(len(y)), y]))
        return acc, lp

    base, base_lp = measure(None)

    def deltas(sel: dict[int, list[int]]) -> tuple[dict[str, float], dict[str, float]]:
        if not any(sel.values()):
            return {t: 0.0 for t in names}, {t: 0.0 for t in names}
        acc, lp = measure(Intervention(ablate=sel))
        return {t: acc[t] - base[t] for t in names}, {t: lp[t] - base_lp[t] for t in names}

    groups = {"general": classes.general}
    groups.update({f"domain:{n}": s for n, s in classes.domain.items()})
    groups.update({f"task:{n}": s for n, s in classes.task.items()})
    results = []
    for k in top_k:
        for g, sel in groups.items():
            top = _top(sel, k)
            acc, lp = deltas(top)
            results.append({"k": int(k), "group": g, "ablated": {str(l): v for l, v in sorted(top.items())},
                            "n_ablated": sum(len(v) for v in top.values()), "deltas": acc,
                            "logprob_deltas": lp})
    counts = {str(l): {"general": int(len(classes.general[l])),
                       "task": {t: int(len(classes.task[t][l])) for t in names},
                       "domain": {n: int(len(s[l])) for n, s in classes.domain.items()}} for l in layers}
    return {"schema": "neuron-role-ablation/1", "tasks": names, "base_accuracy": base, "base_logprob": base_lp,
            "class_sizes": counts, "results": results}


def role_ordering_summary(report: Mapping, k: int = 10) -> dict:
    """General-ablation drop against the drop from ablating another task's
    specific neurons, averaged over tasks and ordered task pairs.  Drops are
    reported for accuracy and for the mean log-probability of the answer."""
    names = report["tasks"]
    by = {r["group"]: r for r in report["results"] if r["k"] == k}
    if "general" not in by:
        raise DataError(f"no results for k={k}", stage="ablate")
    out = {"k": k, "n_general": int(by["general"]["n_ablated"])}
    for field_name, prefix in (("deltas", ""), ("logprob_deltas", "logprob_")):
        general = [-by["general"][field_name][t] for t in names]
        pair = [-by[f"task:{b}"][field_name][a] for a in names for b in names if a != b and f"task:{b}" in by]
        # + 0.0 turns -0.0 into 0.0 so reports read cleanly
        out[prefix + "general_drop"] = float(np.mean(general)) + 0.0
        out[prefix + "unrelated_task_drop"] = (float(np.mean(pair)) if pair else 0.0) + 0.0
        out[prefix + "unrelated_task_drop_max"] = (float(np.max(pair)) if pair else 0.0) + 0.0
    return out


# --------------------------------------------------------------------------- runtime


def attribution_timing(model: ModelCheckpoint, requests: Sequence[EditRequest],
                       config: AttributionConfig | None = None, contexts: Sequence[Sequence[int]] = (),
                       strategies: Sequence[str] = ("mpc", "psa", "lps"), repeats: int = 3) -> dict[str, float]:
    """Per-edit attribution wall time of each strategy (seconds).

    Each edit attributes its prompt and context variants, as the editor
    does.  Strategies are interleaved within every repeat and the fastest
    repeat is kept, which suppresses scheduler noise.
    """
    from .editor import edit_prompts

    config = config or AttributionConfig()
    if not requests:
        raise DataError("no requests to time", stage="attribute")
    batches = [(edit_prompts(q, contexts, model.config.max_seq_len), q.new_object) for q in requests]
    best = {s: float("inf") for s in strategies}
    for _ in range(repeats):
        for s in strategies:
            cfg = dataclasses.replace(config, strategy=s)
            t0 = time.perf_counter()
            for prompts, y in batches:
                attribute(model, prompts, [y] * len(prompts), cfg)
            best[s] = min(best[s], (time.perf_counter() - t0) / len(batches))
    return best
