"""Phoneme inventory, lexicon lookup, phoneme edit distance and top-K retrieval."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .errors import DataError, LexiconError

NO_BIAS_PHONEME = "<nb>"

PhonemeSequence = tuple[int, ...]


class PhonemeInventory:
    """Ordered phoneme symbols; ``<nb>`` always sits at index 0."""

    def __init__(self, symbols: Iterable[str]):
        syms = [s for s in symbols if s != NO_BIAS_PHONEME]
        self.symbols: list[str] = [NO_BIAS_PHONEME] + syms
        self._index = {s: i for i, s in enumerate(self.symbols)}
        if len(self._index) != len(self.symbols):
            raise DataError("phoneme inventory contains duplicate symbols")

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, sym: str) -> bool:
        return sym in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, PhonemeInventory) and self.symbols == other.symbols

    def index(self, sym: str) -> int:
        try:
            return self._index[sym]
        except KeyError:
            raise LexiconError(f"phoneme {sym!r} not in inventory") from None

    def encode(self, syms: Iterable[str]) -> PhonemeSequence:
        return tuple(self.index(s) for s in syms)

    def decode(self, seq: Iterable[int]) -> list[str]:
        return [self.symbols[i] for i in seq]


@dataclass
class Lexicon:
    inventory: PhonemeInventory
    entries: dict[str, PhonemeSequence] = field(default_factory=dict)

    def __post_init__(self):
        for tok, seq in self.entries.items():
            self._check(tok, seq)

    def _check(self, tok: str, seq: PhonemeSequence) -> None:
        if not seq:
            raise DataError(f"lexicon entry {tok!r} has an empty pronunciation")
        if any(not 0 <= p < len(self.inventory) for p in seq):
            raise DataError(f"lexicon entry {tok!r} uses an index outside the inventory")

    def add(self, token: str, phonemes: Sequence[str]) -> None:
        seq = self.inventory.encode(phonemes)
        self._check(token, seq)
        self.entries[token] = seq

    def __contains__(self, token: str) -> bool:
        return token in self.entries

    def __getitem__(self, token: str) -> PhonemeSequence:
        try:
            return self.entries[token]
        except KeyError:
            raise LexiconError(f"token {token!r} missing from lexicon") from None

    def __len__(self) -> int:
        return len(self.entries)

    def tokens(self) -> list[str]:
        return list(self.entries)


def phonemize(tokens: Sequence[str], lex: Lexicon) -> PhonemeSequence:
    out: list[int] = []
    for tok in tokens:
        out.extend(lex[tok])
    return tuple(out)


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance, unit costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def bounded_edit_distance(a: Sequence, b: Sequence, bound: int) -> int:
    """Edit distance, or any value > ``bound`` once the distance must exceed it."""
    if abs(len(a) - len(b)) > bound:
        return bound + 1
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        if min(cur) > bound:
            return bound + 1
        prev = cur
    return prev[-1]


def top_k_similar(query: Sequence, pool: Iterable[tuple[int, Sequence]], k: int) -> list[int]:
    """Ids of the k pool entries nearest to ``query``, ordered by (distance, id)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    heap: list[tuple[int, int]] = []  # max-heap on (distance, id) via negation
    for pid, seq in pool:
        if len(heap) < k:
            d = edit_distance(query, seq)
            heapq.heappush(heap, (-d, -pid))
            continue
        worst_d, worst_id = -heap[0][0], -heap[0][1]
        d = bounded_edit_distance(query, seq, worst_d)
        if (d, pid) < (worst_d, worst_id):
            heapq.heapreplace(heap, (-d, -pid))
    return [pid for _, pid in sorted((-nd, -nid) for nd, nid in heap)]


# --- files ----------------------------------------------------------------

def read_inventory(path: Union[str, Path]) -> PhonemeInventory:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return PhonemeInventory(ln.strip() for ln in lines if ln.strip() and not ln.startswith("#"))


def write_inventory(inv: PhonemeInventory, path: Union[str, Path]) -> None:
    Path(path).write_text("".join(s + "\n" for s in inv.symbols), encoding="utf-8")


def read_lexicon(path: Union[str, Path], inventory: Optional[PhonemeInventory] = None) -> Lexicon:
    """Parse ``surface<TAB>ph ph ...`` lines; ``#`` starts a comment line.

    Without an explicit inventory one is built from the symbols in order of
    first appearance.
    """
    rows: list[tuple[str, list[str]]] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1].split():
            raise DataError(f"{path}:{lineno}: expected 'surface<TAB>phonemes'")
        rows.append((parts[0], parts[1].split()))
    if inventory is None:
        seen: dict[str, None] = {}
        for _, phs in rows:
            for p in phs:
                seen.setdefault(p, None)
        inventory = PhonemeInventory(seen)
    lex = Lexicon(inventory)
    for tok, phs in rows:
        if tok in lex:
            raise DataError(f"{path}: duplicate lexicon entry {tok!r}")
        lex.add(tok, phs)
    return lex


def write_lexicon(lex: Lexicon, path: Union[str, Path]) -> None:
    lines = [f"{tok}\t{' '.join(lex.inventory.decode(seq))}\n" for tok, seq in lex.entries.items()]
    Path(path).write_text("".join(lines), encoding="utf-8")
