"""Command-line entry point.

    neuronedit world    --out world.json
    neuronedit train    --world world.json --out model.ckpt
    neuronedit edit     --model model.ckpt --world world.json --index 0 [--dry-run] --out edited.ckpt
    neuronedit run      --model model.ckpt --world world.json --edits 200 --horizons 10,100,200 --out report.json
    neuronedit ablate   --model model.ckpt --world world.json --out ablation.json
    neuronedit diagnose --base model.ckpt --edited edited.ckpt --out drift.json
    neuronedit export   --model model.ckpt --what weights --layer 1 --out w1.csv
    neuronedit reproduce --out-dir results/
    neuronedit reference --out REFERENCE.md

Common flags: ``--config FILE``, ``--set key=value`` (repeatable),
``--threads N``.  Every output ``X`` gets a sibling ``X.manifest.json``
echoing the command, the effective configuration and input digests.

Exit codes: 0 success, 1 usage or configuration error, 2 data or schema
error, 3 numerical or editing failure.  Failures print one JSON error
record on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .attribution import attribute
from .config import Settings, keys, load_settings, parse_assignments
from .corpus import REQUEST_KEYS, FactWorld, generate_world, load_requests, make_edit_stream, role_tasks, save_requests
from .diagnostics import drift, drift_to_csv, dumps, export_weights_csv, memory_accounting, role_profile
from .editor import EditorState, apply_edit_batch, collect_preserved_keys, edit_prompts
from .errors import ConfigError, DataError, NeuronEditError
from .harness import (EditRunReport, ablation_mask_modes, all_ones, attribution_timing, neuron_role_ablation,
                      prepare_resources, role_ordering_summary, run_batched, run_sequential, save_outcomes)
from .masking import make_mask
from .model import ModelCheckpoint, ModelConfig, init_model, train_facts

log = logging.getLogger("neuronedit")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which is reserved for data errors
        raise UsageError(message, stage="cli")


# --------------------------------------------------------------------------- shared steps


def build_world(s: Settings) -> FactWorld:
    w = s.world
    return generate_world(w.seed, w.n_subjects, w.n_relations, w.n_objects, w.n_facts, w.n_domains)


def build_model(s: Settings, world: FactWorld) -> ModelCheckpoint:
    tok = world.tokenizer()
    cfg = ModelConfig(vocab_size=len(tok), **dataclasses.asdict(s.model))
    t = s.train
    return train_facts(init_model(cfg, tok), world.training_corpus(tok), t.epochs, t.lr, batch_size=t.batch_size,
                       weight_decay=t.weight_decay, label_smoothing=t.label_smoothing, act_l1=t.act_l1,
                       freeze=t.freeze)


def build_stream(s: Settings, world: FactWorld, model: ModelCheckpoint, n: int | None = None):
    return make_edit_stream(world, s.stream.n_edits if n is None else n, seed=s.stream.seed,
                            n_locality=s.stream.n_locality, tokenizer=model.tokenizer or world.tokenizer())


def _sha(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_model(path: str) -> ModelCheckpoint:
    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} not found", stage="cli")
    return ModelCheckpoint.load(path)


def _load_world(path: str | None, s: Settings) -> FactWorld:
    if path is None:
        return build_world(s)
    if not Path(path).is_file():
        raise DataError(f"world file {path} not found", stage="cli")
    return FactWorld.load(path)


def write_manifest(out: str | Path, command: str, args: argparse.Namespace, s: Settings,
                   inputs: dict[str, str] | None = None) -> None:
    argv = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "set", "config", "threads")}
    man = {"schema": "run-manifest/1", "command": command, "arguments": argv, "config": s.to_record(),
           "config_hash": s.digest(), "inputs": inputs or {}, "version": __version__}
    Path(str(out) + ".manifest.json").write_text(dumps(man) + "\n")


def _emit(out: str | None, text: str) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


# --------------------------------------------------------------------------- commands


def cmd_world(args, s: Settings) -> int:
    world = build_world(s)
    world.save(args.out)
    write_manifest(args.out, "world", args, s)
    if args.requests:
        tok = world.tokenizer()
        save_requests(args.requests, make_edit_stream(world, s.stream.n_edits, s.stream.seed, s.stream.n_locality,
                                                      tok), tok)
    return 0


def cmd_train(args, s: Settings) -> int:
    world = _load_world(args.world, s)
    model = build_model(s, world)
    model.save(args.out)
    write_manifest(args.out, "train", args, s, {"world": _sha(args.world)} if args.world else {})
    print(json.dumps(model.meta.get("train", {}), sort_keys=True))
    return 0


def _requests(args, s: Settings, world: FactWorld, model: ModelCheckpoint, n: int | None = None):
    tok = model.tokenizer or world.tokenizer()
    if getattr(args, "requests", None):
        reqs = load_requests(args.requests, tok)
        return reqs if n is None else reqs[:n]
    return build_stream(s, world, model, n)


def cmd_edit(args, s: Settings) -> int:
    model = _load_model(args.model)
    world = _load_world(args.world, s)
    if args.mask_mode:
        s.masking.mode = args.mask_mode
    reqs = _requests(args, s, world, model)
    if not 0 <= args.index < len(reqs) or args.count < 1:
        raise DataError(f"request index {args.index} outside the {len(reqs)}-request stream", stage="cli",
                        key="edit.index")
    batch = reqs[args.index:args.index + args.count]
    cfg = s.run_config()
    res = prepare_resources(world, model, reqs, cfg)
    editor = dataclasses.replace(cfg.editor, contexts=res.contexts)
    state = EditorState() if args.dry_run else collect_preserved_keys(model, res.preserved_prompts,
                                                                         cfg.attribution.layers)
    edited, outs = apply_edit_batch(model, batch, cfg.attribution, cfg.masking, editor, state, step=args.index,
                                    dry_run=args.dry_run)
    recs = [o.to_record() for o in outs]
    for r in recs:
        r.pop("wall_time")
    print(json.dumps({"dry_run": args.dry_run, "outcomes": recs}, sort_keys=True))
    if not args.dry_run:
        if not args.out:
            raise UsageError("edit needs --out unless --dry-run is given", stage="cli", key="edit.out")
        edited.save(args.out)
        write_manifest(args.out, "edit", args, s, {"model": _sha(args.model)})
    return 0


def _run_report(s: Settings, model: ModelCheckpoint, world: FactWorld, reqs, batch_size: int) -> EditRunReport:
    cfg = dataclasses.replace(s.run_config(), batch_size=batch_size)
    run = run_sequential if batch_size == 1 else run_batched
    return run(model, reqs, cfg, world)


def cmd_run(args, s: Settings) -> int:
    if args.horizons:
        s.run.horizons = tuple(int(x) for x in args.horizons.split(",") if x.strip())
    if args.batch_size:
        s.run.batch_size = args.batch_size
    if args.all_ones:
        s.masking = all_ones(s.masking)
    s.run_config().validate()
    n = args.edits if args.edits is not None else max(s.run.horizons)
    model = _load_model(args.model)
    world = _load_world(args.world, s)
    reqs = _requests(args, s, world, model, n)
    rep = _run_report(s, model, world, reqs, s.run.batch_size)
    _emit(args.out, rep.to_json(args.timing))
    if args.out:
        write_manifest(args.out, "run", args, s, {"model": _sha(args.model)})
    if args.csv:
        rep.to_csv(args.csv)
    if args.outcomes:
        save_outcomes(args.outcomes, rep.outcomes)
    if args.save_model:
        rep.final_model.save(args.save_model)
    return 0


def cmd_ablate(args, s: Settings) -> int:
    model = _load_model(args.model)
    world = _load_world(args.world, s)
    out = {"schema": "ablation/1"}
    if args.kind in ("modes", "both"):
        T = args.edits or s.ablate.horizon
        reqs = _requests(args, s, world, model, T)
        cfg = dataclasses.replace(s.run_config(), horizons=(T,))
        out["mask_modes"] = ablation_mask_modes(model, reqs, cfg, world)
    if args.kind in ("roles", "both"):
        tok = model.tokenizer or world.tokenizer()
        rep = neuron_role_ablation(model, role_tasks(world, tok), s.ablate.top_k, s.ablate.layers, s.ablate.lam,
                                   s.attribution.strategy, world.domains)
        rep["summary"] = [role_ordering_summary(rep, k) for k in s.ablate.top_k]
        out["neuron_roles"] = rep
    _emit(args.out, dumps(out) + "\n")
    if args.out:
        write_manifest(args.out, "ablate", args, s, {"model": _sha(args.model)})
    return 0


def cmd_diagnose(args, s: Settings) -> int:
    base = _load_model(args.base)
    out = {"schema": "diagnostics/1"}
    if args.edited:
        edited = _load_model(args.edited)
        d = drift(base, edited)
        out["drift"] = d.to_record()
        if args.csv:
            drift_to_csv(d, args.csv, label=Path(args.edited).name)
    if args.world or args.roles:
        world = _load_world(args.world, s)
        reqs = build_stream(s, world, base, min(s.stream.n_edits, 50))
        prompts, targets = [], []
        for q in reqs:
            ps = edit_prompts(q, (), base.config.max_seq_len) + list(q.paraphrases)
            prompts += ps
            targets += [q.old_object] * len(ps)
        attrs = attribute(base, prompts, targets, s.attribution)
        out["roles"] = role_profile(attrs, s.masking).to_record()
        masks = {l: make_mask(a, s.masking) for l, a in attrs.items()}
        out["memory"] = memory_accounting(base.config.d_ffn, len(prompts), list(attrs), 4, attrs, masks)
    _emit(args.out, dumps(out) + "\n")
    if args.out:
        write_manifest(args.out, "diagnose", args, s, {"base": _sha(args.base)})
    return 0


def cmd_export(args, s: Settings) -> int:
    model = _load_model(args.model)
    if args.what == "weights":
        if args.layer is None:
            raise UsageError("--layer is required for weight export", stage="cli", key="export.layer")
        export_weights_csv(model, args.layer, args.out)
    elif args.what == "checkpoint-tensors":
        # flat float32 tensors for external tools, one .npy per parameter
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        for name, arr in model.params.items():
            np.save(outdir / f"{name}.npy", arr)
    else:  # attribution / mask
        world = _load_world(args.world, s)
        q = build_stream(s, world, model, max(args.index + 1, 1))[args.index]
        prompts = edit_prompts(q, (), model.config.max_seq_len) + list(q.paraphrases)
        attrs = attribute(model, prompts, [q.new_object] * len(prompts), s.attribution,
                          prompt_ids=[f"{args.index}:{i}" for i in range(len(prompts))])
        layer = args.layer if args.layer is not None else s.attribution.layers[0]
        if layer not in attrs:
            raise DataError(f"layer {layer} is not an attribution layer", stage="export", key="attribution.layers")
        if args.what == "attribution":
            attrs[layer].to_csv(args.out)
        else:
            Path(args.out).write_text(dumps(make_mask(attrs[layer], s.masking).to_record()) + "\n")
    write_manifest(args.out, "export", args, s, {"model": _sha(args.model)})
    return 0


# --------------------------------------------------------------------------- reproduce


def reproduce(s: Settings, out_dir: str | Path, model: ModelCheckpoint | None = None,
              world: FactWorld | None = None, timing: bool = False) -> dict:
    """World, training, then every lifelong-editing experiment on one stream.

    Returns (and writes to ``out_dir/reproduce.json``) a canonical report
    that contains no wall-clock values unless ``timing`` is set.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    world = world or build_world(s)
    model = model or build_model(s, world)
    T = max(s.run.horizons)
    reqs = build_stream(s, world, model, max(T, s.stream.n_edits))[:T]
    cfg = dataclasses.replace(s.run_config(), batch_size=1)
    res = prepare_resources(world, model, reqs, cfg)

    masked = run_sequential(model, reqs, cfg, world, res)
    baseline = run_sequential(model, reqs, dataclasses.replace(cfg, masking=all_ones(cfg.masking)), world, res)
    batched = run_batched(model, reqs, dataclasses.replace(cfg, batch_size=4), world, res)
    roles = neuron_role_ablation(model, role_tasks(world, model.tokenizer), s.ablate.top_k, s.ablate.layers,
                                 s.ablate.lam, s.attribution.strategy, world.domains)
    roles["summary"] = [role_ordering_summary(roles, k) for k in s.ablate.top_k]
    fm, fb = masked.final(), baseline.final()
    edited_layers = sorted(cfg.attribution.layers)
    report = {
        "schema": "reproduce/1",
        "config": s.to_record(),
        "model": {"digest": model.digest(), "train": model.meta.get("train", {})},
        "sequential": masked.to_record(),
        "all_ones": baseline.to_record(),
        "batched": batched.to_record(),
        "neuron_roles": roles,
        "comparison": {
            "l2_mean_masked": {str(l): fm.drift.layers[l].l2_mean for l in edited_layers},
            "l2_mean_all_ones": {str(l): fb.drift.layers[l].l2_mean for l in edited_layers},
            "loc_masked": fm.loc, "loc_all_ones": fb.loc,
            "rel_sequential": fm.rel, "rel_batched": batched.final().rel,
        },
    }
    if timing:
        report["timings"] = {"sequential": masked.timings, "all_ones": baseline.timings,
                             "batched": batched.timings,
                             "attribution": attribution_timing(model, reqs[:20], cfg.attribution, res.contexts)}
    (out_dir / "reproduce.json").write_text(dumps(report) + "\n")
    masked.to_csv(out_dir / "sequential.csv")
    baseline.to_csv(out_dir / "all_ones.csv")
    save_outcomes(out_dir / "sequential_outcomes.jsonl", masked.outcomes)
    return report


def cmd_reproduce(args, s: Settings) -> int:
    model = _load_model(args.model) if args.model else None
    world = _load_world(args.world, s) if args.world else None
    rep = reproduce(s, args.out_dir, model, world, args.timing)
    write_manifest(Path(args.out_dir) / "reproduce.json", "reproduce", args, s)
    print(json.dumps(rep["comparison"], sort_keys=True))
    return 0


def cmd_keys(args, s: Settings) -> int:
    rec = s.to_record()
    for k in keys():
        sec, name = k.split(".", 1)
        print(f"{k} = {json.dumps(rec[sec][name])}")
    return 0


FILE_FORMATS = {
    "fact-world/1": "world JSON: subjects, relations, objects, facts [s, r, o], templates, fillers, domains, seed",
    "edit request JSONL": "one object per line with " + ", ".join(f"`{k}`" for k in REQUEST_KEYS)
                          + "; prompts are whitespace-separated words of the world vocabulary",
    "checkpoint": "binary tensor container: model config, tokenizer, float32 parameters, metadata",
    "edit-run-report/1": "run JSON: config, provenance, one record per horizon (rel, gen, loc, "
                         "general_probe_accuracy, n_failed, drift), failures",
    "edit-outcome/1": "per-edit JSONL: step, subject, success, stage, error, popcounts, residuals, "
                      "log_odds_gain, wall_time",
    "mask-mode-ablation/1": "one row per mask-mode arm with final-horizon metrics",
    "neuron-role-ablation/1": "per-task accuracy and log-probability deltas for each ablated role group",
    "diagnostics/1": "drift per layer, role profile and memory accounting",
    "run-manifest/1": "sibling `<output>.manifest.json`: command, arguments, effective config, input digests",
    "CSV": "reports as (T, metric, value); drift as (label, layer, metric, value); weights one row per neuron",
}


def reference_page() -> str:
    """Markdown reference for every command, config key and file format."""
    parser = build_parser()
    lines = [f"# neuronedit {__version__} command reference", "",
             "Exit codes: 0 success, 1 usage or configuration error, 2 data or schema error, "
             "3 numerical or editing failure.", "", "## Commands", ""]
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, cp in sub.choices.items():
        lines += [f"### {name}", "", "```", cp.format_help().rstrip(), "```", ""]
    lines += ["## Configuration keys", "",
              "Set with `--set key=value`, a JSON `--config` file or `NEURONEDIT_<SECTION>__<FIELD>`.", "",
              "| key | default |", "| --- | --- |"]
    rec = Settings().to_record()
    for k in keys():
        sec, name = k.split(".", 1)
        lines.append(f"| `{k}` | `{json.dumps(rec[sec][name])}` |")
    lines += ["", "## File formats", ""]
    lines += [f"- **{k}**: {v}" for k, v in FILE_FORMATS.items()]
    return "\n".join(lines) + "\n"


def cmd_reference(args, s: Settings) -> int:
    _emit(args.out, reference_page())
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (nested sections or dotted keys)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one dotted config key; repeatable")
    common.add_argument("--threads", type=int, default=None, help="torch intra-op threads (default: all cores)")

    p = _Parser(prog="neuronedit", description="Entropy-guided sparse neuron masks for lifelong knowledge editing.")
    p.add_argument("--version", action="version", version=f"neuronedit {__version__}")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("world", parents=[common], help="generate the synthetic fact world")
    c.add_argument("--out", required=True)
    c.add_argument("--requests", help="also write an edit stream as JSONL")
    c.set_defaults(func=cmd_world)

    c = sub.add_parser("train", parents=[common], help="memorize the world's facts")
    c.add_argument("--world")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_train)

    c = sub.add_parser("edit", parents=[common], help="apply one edit (or a batch) to a checkpoint")
    c.add_argument("--model", required=True)
    c.add_argument("--world")
    c.add_argument("--requests", help="edit-request JSONL (default: the configured synthetic stream)")
    c.add_argument("--index", type=int, default=0)
    c.add_argument("--count", type=int, default=1, help="batch size starting at --index")
    c.add_argument("--mask-mode", choices=["union", "general_only", "specific_only", "overlap_only",
                                           "non_overlap_only", "soft"])
    c.add_argument("--dry-run", action="store_true", help="plan masks and print popcounts, change nothing")
    c.add_argument("--out")
    c.set_defaults(func=cmd_edit)

    c = sub.add_parser("run", parents=[common], help="sequential or batched lifelong-editing run")
    c.add_argument("--model", required=True)
    c.add_argument("--world")
    c.add_argument("--requests")
    c.add_argument("--edits", type=int)
    c.add_argument("--horizons", help="comma-separated, e.g. 10,100,200")
    c.add_argument("--batch-size", type=int)
    c.add_argument("--all-ones", action="store_true", help="unmasked baseline")
    c.add_argument("--timing", action="store_true", help="include wall-clock timings in the report")
    c.add_argument("--out")
    c.add_argument("--csv")
    c.add_argument("--outcomes", help="per-edit outcomes as JSONL")
    c.add_argument("--save-model")
    c.set_defaults(func=cmd_run)

    c = sub.add_parser("ablate", parents=[common], help="mask-mode and neuron-role ablations")
    c.add_argument("--model", required=True)
    c.add_argument("--world")
    c.add_argument("--requests")
    c.add_argument("--kind", choices=["modes", "roles", "both"], default="both")
    c.add_argument("--edits", type=int)
    c.add_argument("--out")
    c.set_defaults(func=cmd_ablate)

    c = sub.add_parser("diagnose", parents=[common], help="drift, role profile and memory accounting")
    c.add_argument("--base", required=True)
    c.add_argument("--edited")
    c.add_argument("--world")
    c.add_argument("--roles", action="store_true", help="profile roles on the configured world")
    c.add_argument("--csv")
    c.add_argument("--out")
    c.set_defaults(func=cmd_diagnose)

    c = sub.add_parser("export", parents=[common], help="weights, attribution matrices, masks or raw tensors")
    c.add_argument("--model", required=True)
    c.add_argument("--world")
    c.add_argument("--what", choices=["weights", "attribution", "mask", "checkpoint-tensors"], default="weights")
    c.add_argument("--layer", type=int)
    c.add_argument("--index", type=int, default=0, help="edit request whose prompts are attributed")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_export)

    c = sub.add_parser("reproduce", parents=[common], help="world, training and every editing experiment")
    c.add_argument("--out-dir", required=True)
    c.add_argument("--model", help="reuse a trained checkpoint")
    c.add_argument("--world")
    c.add_argument("--timing", action="store_true")
    c.set_defaults(func=cmd_reproduce)

    c = sub.add_parser("config", parents=[common], help="print every dotted key with its effective value")
    c.set_defaults(func=cmd_keys)

    c = sub.add_parser("reference", parents=[common], help="write the Markdown command and format reference")
    c.add_argument("--out")
    c.set_defaults(func=cmd_reference)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        torch.set_num_threads(args.threads or os.cpu_count() or 1)
        s = load_settings(args.config, overrides=parse_assignments(args.set))
        return args.func(args, s)
    except NeuronEditError as e:
        sys.stderr.write(json.dumps(e.record(), sort_keys=True) + "\n")
        return e.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        err = DataError(str(e), stage="io")
        sys.stderr.write(json.dumps(err.record(), sort_keys=True) + "\n")
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
