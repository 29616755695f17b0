"""Biasing lists, first-token entity labels, hard negatives and inference lists."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import DataError
from .phonology import PhonemeInventory, PhonemeSequence, edit_distance

NO_BIAS_TOKEN = "<no-bias>"


class BiasingWarning(UserWarning):
    """A biasing helper returned fewer items than requested."""


@dataclass(frozen=True)
class Entity:
    id: int
    surface: tuple[str, ...]
    phonemes: PhonemeSequence

    def __post_init__(self):
        if not self.surface:
            raise DataError(f"entity {self.id}: empty surface")
        if not self.phonemes:
            raise DataError(f"entity {self.id}: empty phoneme sequence")


NO_BIAS = Entity(0, (NO_BIAS_TOKEN,), (0,))


class BiasingList:
    """Entries 0..L; entry 0 is always the ``<no-bias>`` pseudo-entity."""

    def __init__(self, entities: Iterable[Entity] = ()):
        self.entries: list[Entity] = [NO_BIAS]
        seen: set[tuple[str, ...]] = set()
        for e in entities:
            if e.id < 1:
                raise DataError(f"entity id must be >= 1, got {e.id}")
            if e.surface in seen:
                raise DataError(f"duplicate surface {' '.join(e.surface)!r} in biasing list")
            seen.add(e.surface)
            self.entries.append(e)
        self._pos = {e.id: i for i, e in enumerate(self.entries)}

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> Entity:
        return self.entries[i]

    def __iter__(self):
        return iter(self.entries)

    @property
    def entities(self) -> list[Entity]:
        return self.entries[1:]

    def position(self, entity_id: int) -> int:
        try:
            return self._pos[entity_id]
        except KeyError:
            raise DataError(f"entity {entity_id} not in biasing list") from None

    def ids(self) -> list[int]:
        return [e.id for e in self.entries]


@dataclass(frozen=True)
class EntitySpan:
    start: int
    end: int
    bias_id: int

    def to_dict(self) -> dict:
        return {"start": self.start, "end": self.end, "bias_id": self.bias_id}


@dataclass(frozen=True)
class HardNegativeSet:
    target_id: int
    negative_ids: tuple[int, ...]


def check_spans(spans: Sequence[EntitySpan], length: int) -> list[EntitySpan]:
    ordered = sorted(spans, key=lambda s: s.start)
    for s in ordered:
        if not 0 <= s.start < s.end <= length:
            raise DataError(f"span {s} outside transcript of length {length}")
    for a, b in zip(ordered, ordered[1:]):
        if b.start < a.end:
            raise DataError(f"overlapping spans {a} and {b}")
    return ordered


def build_entity_labels(transcript_len: int, spans: Sequence[EntitySpan]) -> list[int]:
    """Entity index per token position: the span's bias id on its first token, 0 elsewhere."""
    beta = [0] * transcript_len
    for s in check_spans(spans, transcript_len):
        if s.bias_id == 0:
            raise DataError(f"span {s} points at <no-bias>")
        beta[s.start] = s.bias_id
    return beta


def find_entity_spans(transcript: Sequence[str], blist: BiasingList) -> list[EntitySpan]:
    """Greedy leftmost-longest matching of list surfaces; ``bias_id`` is the list position."""
    by_first: dict[str, list[tuple[tuple[str, ...], int]]] = {}
    for pos, e in enumerate(blist.entries[1:], 1):
        by_first.setdefault(e.surface[0], []).append((e.surface, pos))
    for cands in by_first.values():
        cands.sort(key=lambda c: -len(c[0]))
    spans = []
    i, n = 0, len(transcript)
    while i < n:
        hit = None
        for surface, pos in by_first.get(transcript[i], ()):
            if tuple(transcript[i:i + len(surface)]) == surface:
                hit = EntitySpan(i, i + len(surface), pos)
                break
        if hit is None:
            i += 1
        else:
            spans.append(hit)
            i = hit.end
    return spans


def _ranked(target: Entity, pool: Iterable[Entity]) -> list[Entity]:
    cands = [e for e in pool if e.id != target.id and e.surface != target.surface]
    return sorted(cands, key=lambda e: (edit_distance(target.phonemes, e.phonemes), e.id))


def mine_hard_negatives(target: Entity, pool: Sequence[Entity], count: int) -> HardNegativeSet:
    """The ``count`` phonetically nearest pool entities with a different surface."""
    if not 1 <= count <= 3:
        raise DataError(f"hard-negative count must be in [1, 3], got {count}")
    ranked = _ranked(target, pool)
    # ids must be distinct even if the pool repeats an entity
    chosen: list[int] = []
    for e in ranked:
        if e.id not in chosen:
            chosen.append(e.id)
        if len(chosen) == count:
            break
    if len(chosen) < count:
        warnings.warn(f"entity {target.id}: only {len(chosen)} hard negatives available "
                      f"(wanted {count})", BiasingWarning, stacklevel=2)
    return HardNegativeSet(target.id, tuple(chosen))


def assemble_inference_list(gt: Sequence[Entity], distractor_pool: Sequence[Entity],
                            n_distractors: int, seed: int, near_per_gt: int = 5) -> BiasingList:
    """``<no-bias>`` + ground truth + ``n_distractors`` distractors.

    Up to ``near_per_gt`` phoneme-nearest neighbours of each ground-truth
    entity are taken round-robin; the remainder is drawn uniformly from the
    rest of the pool with a seeded generator. Entries after index 0 are
    ordered by entity id so list position carries no information.
    """
    gt_surfaces = {e.surface for e in gt}
    pool = sorted({e.id: e for e in distractor_pool if e.surface not in gt_surfaces}.values(),
                  key=lambda e: e.id)
    chosen: dict[int, Entity] = {}
    queues = [_ranked(g, pool)[:near_per_gt] for g in gt]
    while len(chosen) < n_distractors and any(queues):
        for q in queues:
            while q and q[0].id in chosen:
                q.pop(0)
            if q and len(chosen) < n_distractors:
                e = q.pop(0)
                chosen[e.id] = e
    rest = [e for e in pool if e.id not in chosen]
    need = n_distractors - len(chosen)
    if need > 0 and rest:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(rest), size=min(need, len(rest)), replace=False)
        for i in sorted(picks):
            chosen[rest[i].id] = rest[i]
    if len(chosen) < n_distractors:
        warnings.warn(f"distractor pool exhausted: {len(chosen)} of {n_distractors} distractors",
                      BiasingWarning, stacklevel=2)
    entries = {e.id: e for e in gt}
    entries.update(chosen)
    return BiasingList(sorted(entries.values(), key=lambda e: e.id))


# --- files ----------------------------------------------------------------

def read_biasing_tsv(path: Union[str, Path], inventory: PhonemeInventory) -> list[Entity]:
    """Rows ``id<TAB>surface tokens<TAB>phonemes``; id 0 is reserved."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
        try:
            eid = int(parts[0])
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad id {parts[0]!r}") from None
        if eid == 0:
            raise DataError(f"{path}:{lineno}: id 0 is reserved for <no-bias>")
        out.append(Entity(eid, tuple(parts[1].split()), inventory.encode(parts[2].split())))
    return out


def write_biasing_tsv(entities: Iterable[Entity], inventory: PhonemeInventory,
                      path: Union[str, Path]) -> None:
    lines = []
    for e in entities:
        if e.id == 0:
            continue
        lines.append(f"{e.id}\t{' '.join(e.surface)}\t{' '.join(inventory.decode(e.phonemes))}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def mine_all(entities: Sequence[Entity], pool: Optional[Sequence[Entity]] = None,
             count: int = 3) -> dict[int, HardNegativeSet]:
    pool = entities if pool is None else pool
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BiasingWarning)
        return {e.id: mine_hard_negatives(e, pool, count) for e in entities}
