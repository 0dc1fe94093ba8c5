"""Edit request record shared by the corpus loader and the editor."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import DataError


@dataclass(frozen=True)
class EditRequest:
    """Rewrite (s, r, o) -> (s, r, o*).

    ``prompt`` encodes subject and relation; ``locality_probes`` are
    (prompt, expected token) pairs from facts that must not change.
    """

    subject: str
    prompt: tuple[int, ...]
    old_object: int
    new_object: int
    paraphrases: tuple[tuple[int, ...], ...] = ()
    locality_probes: tuple[tuple[tuple[int, ...], int], ...] = ()
    relation: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        object.__setattr__(self, "paraphrases", tuple(tuple(int(t) for t in p) for p in self.paraphrases))
        object.__setattr__(self, "locality_probes",
                           tuple((tuple(int(t) for t in p), int(e)) for p, e in self.locality_probes))
        if not self.prompt:
            raise DataError("edit prompt is empty", stage="request")
        if self.new_object == self.old_object:
            raise DataError("new_object equals old_object", stage="request")
        covered = {self.prompt, *self.paraphrases}
        for p, _ in self.locality_probes:
            if p in covered:
                raise DataError("locality probe overlaps the edit prompt or a paraphrase", stage="request")
