"""Synthetic fact world, edit streams, probe suites and the request JSONL format."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .editor_types import EditRequest
from .errors import DataError
from .model import FactCorpus, Tokenizer

RELATION_NOUNS = [
    "capital", "language", "color", "founder", "currency", "sport", "river", "mountain",
    "anthem", "emblem", "religion", "genre", "employer", "instrument", "teacher", "rival",
    "partner", "birthplace", "species", "element",
]

# Surface patterns; each contains exactly one subject slot.  Pattern 0 is the
# canonical edit prompt, the rest serve as paraphrases.
PATTERNS = [
    "the {r} of {s} is",
    "{s} 's {r} is",
    "what is the {r} of {s} ?",
    "tell me the {r} of {s} :",
]

FILLERS = ["so", "well", "indeed", "today", "note", "okay", "now", "then",
           "also", "here", "listen", "yes", "right", "again", "first", "next"]

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class FactWorld:
    subjects: list[str]
    relations: list[str]
    objects: list[str]
    facts: list[tuple[str, str, str]]
    templates: dict[str, list[str]]
    fillers: list[str]
    domains: dict[str, int]
    seed: int

    # ---- persistence
    def to_json(self) -> str:
        d = asdict(self)
        d["facts"] = [list(f) for f in self.facts]
        d["schema"] = "fact-world/1"
        return json.dumps(d, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FactWorld":
        d = json.loads(text)
        if d.pop("schema", None) != "fact-world/1":
            raise DataError("not a fact-world/1 document", stage="corpus")
        d["facts"] = [tuple(f) for f in d["facts"]]
        world = cls(**d)
        validate_world(world)
        return world

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "FactWorld":
        return cls.from_json(Path(path).read_text())

    # ---- rendering
    def vocabulary(self) -> list[str]:
        words = set(self.subjects) | set(self.objects) | set(self.fillers)
        for temps in self.templates.values():
            for t in temps:
                words.update(w for w in t.split() if w != "{s}")
        return ["<pad>"] + sorted(words)

    def tokenizer(self) -> Tokenizer:
        return Tokenizer(self.vocabulary())

    def render(self, subject: str, relation: str, template: int = 0) -> str:
        return self.templates[relation][template].replace("{s}", subject)

    def fact_index(self) -> dict[tuple[str, str], str]:
        return {(s, r): o for s, r, o in self.facts}

    def training_corpus(self, tokenizer: Tokenizer | None = None, prefix_prob: float = 0.5) -> FactCorpus:
        tok = tokenizer or self.tokenizer()
        examples = []
        for s, r, o in self.facts:
            for ti in range(len(self.templates[r])):
                examples.append((tok.encode(self.render(s, r, ti)), tok.id(o)))
        return FactCorpus(examples, [tok.id(w) for w in self.fillers], prefix_prob=prefix_prob)


def _pseudowords(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    out: list[str] = []
    seen = set(taken)
    while len(out) < n:
        syl = int(rng.integers(2, 4))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(syl))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def generate_world(seed: int = 0, n_subjects: int = 200, n_relations: int = 10, n_objects: int = 100,
                   n_facts: int = 1000, n_domains: int = 2) -> FactWorld:
    for name, v in (("n_subjects", n_subjects), ("n_relations", n_relations), ("n_objects", n_objects)):
        if v < 1:
            raise DataError(f"{name} must be >= 1", stage="corpus", key=f"world.{name}")
    if n_objects < 2:
        raise DataError("need at least 2 objects so every fact can be rewritten", stage="corpus",
                        key="world.n_objects")
    if n_facts < 0 or n_facts > n_subjects * n_relations:
        raise DataError(f"n_facts={n_facts} infeasible: at most n_subjects*n_relations="
                        f"{n_subjects * n_relations} unique (s, r) pairs", stage="corpus", key="world.n_facts")
    rng = np.random.default_rng(seed)
    relations = RELATION_NOUNS[:n_relations] + [f"rel{i}" for i in range(len(RELATION_NOUNS), n_relations)]
    reserved = set(FILLERS) | set(relations) | {w for p in PATTERNS for w in p.split()}
    subjects = _pseudowords(rng, n_subjects, reserved)
    objects = _pseudowords(rng, n_objects, reserved | set(subjects))
    pairs = rng.choice(n_subjects * n_relations, size=n_facts, replace=False)
    pairs.sort()
    facts = [(subjects[p // n_relations], relations[p % n_relations], objects[int(rng.integers(n_objects))])
             for p in pairs]
    templates = {r: [p.replace("{r}", r) for p in PATTERNS] for r in relations}
    n_domains = max(1, min(n_domains, n_relations))
    domains = {r: i * n_domains // n_relations for i, r in enumerate(relations)}
    world = FactWorld(subjects, relations, objects, facts, templates, list(FILLERS), domains, int(seed))
    validate_world(world)
    return world


def validate_world(world: FactWorld) -> None:
    problems = []
    pairs = [(s, r) for s, r, _ in world.facts]
    if len(set(pairs)) != len(pairs):
        problems.append("duplicate (subject, relation) pairs")
    subj, rel, obj = set(world.subjects), set(world.relations), set(world.objects)
    for s, r, o in world.facts:
        if s not in subj or r not in rel or o not in obj:
            problems.append(f"fact ({s}, {r}, {o}) references unknown entity")
            break
    for r in world.relations:
        temps = world.templates.get(r, [])
        if len(temps) < 3:
            problems.append(f"relation {r!r} has fewer than 3 templates")
        for t in temps:
            if t.split().count("{s}") != 1 or t.count("{s}") != 1:
                problems.append(f"template {t!r} must contain exactly one subject slot")
    if len(set(world.vocabulary())) != len(world.vocabulary()):
        problems.append("vocabulary is not unique")
    if problems:
        raise DataError("invalid fact world: " + "; ".join(problems), stage="corpus")


# --------------------------------------------------------------------------- streams and probes


@dataclass(frozen=True)
class Probe:
    prompt: tuple[int, ...]
    expected: int
    relation: str | None = None


@dataclass
class ProbeSuite:
    probes: list[Probe]
    role: str  # "locality" | "general_capability"

    def prompts(self) -> list[tuple[int, ...]]:
        return [p.prompt for p in self.probes]

    def expected(self) -> np.ndarray:
        return np.array([p.expected for p in self.probes], dtype=np.int64)


def make_edit_stream(world: FactWorld, n_edits: int, seed: int = 0, n_locality: int = 2,
                     tokenizer: Tokenizer | None = None) -> list[EditRequest]:
    """Sample ``n_edits`` distinct facts and rewrite each to a new object.

    Each request carries every non-canonical template as a paraphrase and
    ``n_locality`` probes drawn from facts that no request in the stream edits.
    """
    if n_edits < 0 or n_edits > len(world.facts):
        raise DataError(f"n_edits={n_edits} exceeds the {len(world.facts)} available facts", stage="corpus",
                        key="stream.n_edits")
    if n_edits == 0:
        return []
    tok = tokenizer or world.tokenizer()
    rng = np.random.default_rng([seed, 0x5EED])
    chosen = rng.permutation(len(world.facts))[:n_edits]
    untouched = np.setdiff1d(np.arange(len(world.facts)), chosen)
    if len(untouched) < n_locality:
        raise DataError("not enough untouched facts for locality probes", stage="corpus", key="stream.n_locality")
    n_obj = len(world.objects)
    out = []
    for fi in chosen:
        s, r, o = world.facts[fi]
        new = world.objects[int(rng.integers(n_obj - 1))]
        if new == o:
            new = world.objects[n_obj - 1]
        n_t = len(world.templates[r])
        probes = []
        for pj in rng.choice(untouched, size=n_locality, replace=False):
            ps, pr, po = world.facts[pj]
            probes.append((tok.encode(world.render(ps, pr, int(rng.integers(len(world.templates[pr]))))),
                           tok.id(po)))
        out.append(EditRequest(
            subject=s,
            prompt=tok.encode(world.render(s, r, 0)),
            old_object=tok.id(o),
            new_object=tok.id(new),
            paraphrases=[tok.encode(world.render(s, r, t)) for t in range(1, n_t)],
            locality_probes=probes,
            relation=r,
        ))
    return out


def make_probe_suite(world: FactWorld, exclude: Sequence[tuple[str, str]] | set, n: int, seed: int = 0,
                     role: str = "general_capability", tokenizer: Tokenizer | None = None,
                     all_templates: bool = False) -> ProbeSuite:
    """Probes from facts whose (s, r) pair is not in ``exclude``."""
    tok = tokenizer or world.tokenizer()
    excl = set(exclude)
    pool = [f for f in world.facts if (f[0], f[1]) not in excl]
    rng = np.random.default_rng([seed, 0x9B0B])
    idx = rng.permutation(len(pool))[:n]
    probes = []
    for i in idx:
        s, r, o = pool[i]
        temps = range(len(world.templates[r])) if all_templates else [int(rng.integers(len(world.templates[r])))]
        for t in temps:
            probes.append(Probe(tuple(tok.encode(world.render(s, r, t))), tok.id(o), r))
    return ProbeSuite(probes, role)


def edited_pairs(world: FactWorld, requests: Sequence[EditRequest], tokenizer: Tokenizer | None = None) -> set:
    """(subject, relation) pairs touched by ``requests``."""
    tok = tokenizer or world.tokenizer()
    by_prompt = {tuple(tok.encode(world.render(s, r, 0))): (s, r) for s, r, _ in world.facts}
    return {by_prompt[tuple(q.prompt)] for q in requests if tuple(q.prompt) in by_prompt}


def context_prefixes(world: FactWorld, n: int, seed: int = 0, tokenizer: Tokenizer | None = None,
                     max_len: int = 3) -> tuple[tuple[int, ...], ...]:
    """``n`` filler-word prefixes of length 1..max_len, prepended to edit
    prompts so the value target and the mask see the fact in context."""
    tok = tokenizer or world.tokenizer()
    rng = np.random.default_rng([seed, 0xC0DE])
    ids = [tok.id(f) for f in world.fillers]
    return tuple(tuple(int(x) for x in rng.choice(ids, size=int(rng.integers(1, max_len + 1)))) for _ in range(n))


def held_out_prompts(world: FactWorld, exclude: set, n: int, seed: int = 0,
                     tokenizer: Tokenizer | None = None) -> list[tuple[int, ...]]:
    """Up to ``n`` prompts (every template, bare and with one filler prefix)
    over facts whose (s, r) pair is not in ``exclude``."""
    tok = tokenizer or world.tokenizer()
    rng = np.random.default_rng([seed, 0x4E1D])
    ids = [tok.id(f) for f in world.fillers]
    out = []
    for s, r, _ in world.facts:
        if (s, r) in exclude:
            continue
        for t in range(len(world.templates[r])):
            p = tuple(tok.encode(world.render(s, r, t)))
            out.append(p)
            out.append(tuple(int(x) for x in rng.choice(ids, size=int(rng.integers(1, 4)))) + p)
    if len(out) > n:
        out = [out[i] for i in sorted(rng.choice(len(out), size=n, replace=False))]
    return out


def role_tasks(world: FactWorld, tokenizer: Tokenizer | None = None,
               exclude: set = frozenset()) -> dict[str, ProbeSuite]:
    """One probe task per relation over its canonical prompts."""
    tok = tokenizer or world.tokenizer()
    tasks: dict[str, list[Probe]] = {}
    for s, r, o in world.facts:
        if (s, r) not in exclude:
            tasks.setdefault(r, []).append(Probe(tuple(tok.encode(world.render(s, r, 0))), tok.id(o), r))
    return {r: ProbeSuite(p, "general_capability") for r, p in sorted(tasks.items())}


# --------------------------------------------------------------------------- JSONL

REQUEST_KEYS = ("subject", "prompt", "target_old", "target_new", "paraphrases", "locality")


def request_to_record(req: EditRequest, tokenizer: Tokenizer) -> dict:
    return {
        "subject": req.subject,
        "prompt": tokenizer.decode(req.prompt),
        "target_old": tokenizer.tokens[req.old_object],
        "target_new": tokenizer.tokens[req.new_object],
        "paraphrases": [tokenizer.decode(p) for p in req.paraphrases],
        "locality": [{"prompt": tokenizer.decode(p), "expected": tokenizer.tokens[e]}
                     for p, e in req.locality_probes],
    }


def save_requests(path: str | Path, requests: Sequence[EditRequest], tokenizer: Tokenizer) -> None:
    with open(path, "w") as fh:
        for req in requests:
            fh.write(json.dumps(request_to_record(req, tokenizer), sort_keys=True) + "\n")


def _parse_record(rec, tokenizer: Tokenizer) -> EditRequest:
    if not isinstance(rec, dict):
        raise DataError("record is not a JSON object")
    for key in REQUEST_KEYS:
        if key not in rec:
            raise DataError(f"missing key {key!r}")
    if not isinstance(rec["paraphrases"], list) or not isinstance(rec["locality"], list):
        raise DataError("'paraphrases' and 'locality' must be lists")
    for loc in rec["locality"]:
        if not isinstance(loc, dict) or "prompt" not in loc or "expected" not in loc:
            raise DataError("locality entries need 'prompt' and 'expected'")
    prompt = tokenizer.encode(rec["prompt"])
    if rec["subject"] not in rec["prompt"].split():
        raise DataError(f"subject {rec['subject']!r} does not occur in prompt")
    return EditRequest(
        subject=rec["subject"],
        prompt=prompt,
        old_object=tokenizer.id(rec["target_old"]),
        new_object=tokenizer.id(rec["target_new"]),
        paraphrases=[tokenizer.encode(p) for p in rec["paraphrases"]],
        locality_probes=[(tokenizer.encode(l["prompt"]), tokenizer.id(l["expected"])) for l in rec["locality"]],
    )


def load_requests(path: str | Path, tokenizer: Tokenizer) -> list[EditRequest]:
    """Parse and validate an edit-request JSONL file.

    Every malformed line is collected; a single DataError lists them all with
    1-based line numbers.
    """
    out, errors = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(_parse_record(json.loads(line), tokenizer))
            except json.JSONDecodeError as e:
                errors.append(f"line {lineno}: invalid JSON ({e.msg})")
            except DataError as e:
                errors.append(f"line {lineno}: {e}")
    if errors:
        raise DataError("malformed edit requests:\n" + "\n".join(errors), stage="load_requests")
    return out
