"""Inference-time entity filtering and greedy decoding.

Per step the decoder state attends over the whole biasing list; the
arg-max entry (the anchor) selects up to ``k`` phonetically nearest list
entries, attention is recomputed over that filtered set plus ``<no-bias>``,
and the selection is gated to ``<no-bias>`` unless some entity reaches
probability ``sigma``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .asr_model import ContextKV, ParcoModel
from .biasing import NO_BIAS, BiasingList, Entity
from .errors import DataError
from .numerics import DiffArray
from .phonology import top_k_similar
from .vocab import BLANK_ID, EOS_ID, NO_BIAS_ID, SOS_ID

MODES = ("soft", "copy")
NEVER_EMITTED = [BLANK_ID, SOS_ID, NO_BIAS_ID]


@dataclass(frozen=True)
class HEFConfig:
    k: int = 20
    sigma: float = 0.9
    mode: str = "copy"
    enabled: bool = True        # False: plain context attention over the full list, no gate

    def __post_init__(self):
        if self.k < 1:
            raise DataError(f"k must be >= 1, got {self.k}")
        if self.sigma < 0:
            raise DataError(f"sigma must be >= 0, got {self.sigma}")
        if self.mode not in MODES:
            raise DataError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class FilteredBiasSet:
    members: tuple[int, ...]    # list positions, 0 first

    def __len__(self) -> int:
        return len(self.members)


@dataclass
class StepTrace:
    step: int
    anchor: int
    members: list[int]          # entity ids of the candidates, <no-bias> = 0
    probs: list[float]          # gated selection probabilities over members
    gated: bool
    action: str                 # "vocab-token", "entity-copy" or "no-bias"
    tokens: list[str]
    entity_id: Optional[int] = None
    truncated: bool = False

    def to_json(self, utt_id: Optional[str] = None) -> str:
        d = asdict(self)
        if utt_id is not None:
            d = {"utt": utt_id, **d}
        return json.dumps(d)


@dataclass
class DecodeResult:
    tokens: list[str]
    trace: list[StepTrace] = field(default_factory=list)
    truncated: bool = False


# --- the four stages --------------------------------------------------------

def preselect(s) -> int:
    """Arg-max list position; exact ties go to the smaller index."""
    return int(np.argmax(np.asarray(s)))


def filter_candidates(anchor: int, blist: BiasingList, k: int) -> FilteredBiasSet:
    """``{0, anchor}`` plus the ``k - 1`` other entries nearest to the anchor's phonemes.

    This equals ``{0}`` with the top-``k`` of entries 1..L by phoneme
    distance to the anchor, with distance ties resolved in the anchor's
    favour (it is at distance 0 from itself).
    """
    if anchor == 0:
        raise DataError("filter_candidates: the anchor must be an entity, not <no-bias>")
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    pool = [(pos, e.phonemes) for pos, e in enumerate(blist.entries) if pos not in (0, anchor)]
    rest = top_k_similar(blist[anchor].phonemes, pool, k - 1) if k > 1 and pool else []
    return FilteredBiasSet((0, anchor, *rest))


def reattend(model: ParcoModel, D: DiffArray, kv: ContextKV,
             members: Sequence[int]) -> tuple[np.ndarray, ContextKV]:
    """Selection probabilities over ``members`` and their key/value rows."""
    sub = kv.rows(members)
    s, _ = model.context_attention(D, sub)
    return s.value.reshape(-1), sub


def gate(p, sigma: float) -> tuple[np.ndarray, bool]:
    """One-hot on slot 0 when no entity slot reaches ``sigma``; otherwise ``p`` unchanged."""
    p = np.asarray(p, dtype=np.float64)
    best = p[1:].max() if p.size > 1 else 0.0
    if best < sigma:
        out = np.zeros_like(p)
        out[0] = 1.0
        return out, True
    return p, False


# --- cached entity encodings ----------------------------------------------

class EntityBank:
    """Entity keys/values computed once so every list reuses identical rows."""

    def __init__(self, model: ParcoModel, inventory: Iterable[Entity] = ()):
        self.model = model
        self._row: dict[Entity, int] = {}
        self._K: list[np.ndarray] = []
        self._V: list[np.ndarray] = []
        self.add([NO_BIAS, *inventory])

    def add(self, entities: Iterable[Entity]) -> None:
        new = [e for e in dict.fromkeys(entities) if e not in self._row]
        if not new:
            return
        N = self.model.context.encode(new)
        kv = self.model.context_kv(N)
        for i, e in enumerate(new):
            self._row[e] = len(self._K)
            self._K.append(kv.K.value[i])
            self._V.append(kv.V.value[i])

    def kv(self, blist: BiasingList) -> ContextKV:
        self.add(blist.entries)
        idx = [self._row[e] for e in blist.entries]
        return ContextKV(DiffArray(np.stack([self._K[i] for i in idx])),
                         DiffArray(np.stack([self._V[i] for i in idx])))


# --- decoding --------------------------------------------------------------

def decode(model: ParcoModel, frames: np.ndarray, blist: BiasingList, cfg: HEFConfig = HEFConfig(),
           max_len: int = 60, bank: Optional[EntityBank] = None) -> DecodeResult:
    """Greedy decode of one utterance with the given biasing list."""
    bank = bank or EntityBank(model)
    kv = bank.kv(blist)
    audio = model.encode_audio([np.asarray(frames, dtype=np.float64)])
    state = model.initial_state(1)
    prev = SOS_ID
    ids = [e.id for e in blist.entries]
    everyone = tuple(range(len(blist)))
    out: list[int] = []
    trace: list[StepTrace] = []
    step = 0
    while len(out) < max_len:
        step += 1
        D, state = model.decoder_step(state, [prev], audio)
        s_full, _ = model.context_attention(D, kv)
        s_full = s_full.value.reshape(-1)
        if not cfg.enabled:
            anchor, members, p, sub = preselect(s_full), everyone, s_full, kv
            gated_p, delta = p, False
        else:
            anchor = preselect(s_full)
            if anchor != 0:
                members = filter_candidates(anchor, blist, cfg.k).members
                p, sub = reattend(model, D, kv, members)
            else:
                members, p, sub = everyone, s_full, kv
            gated_p, delta = gate(p, cfg.sigma)
        B = nx.matmul(DiffArray(gated_p[None, :]), sub.V)
        logits = model.token_logits(D, B).value[0].copy()
        logits[NEVER_EMITTED] = -np.inf
        token = int(np.argmax(logits))
        pick = preselect(gated_p)
        rec = StepTrace(step=step, anchor=ids[anchor], members=[ids[m] for m in members],
                        probs=[float(x) for x in gated_p], gated=delta, action="vocab-token", tokens=[])
        trace.append(rec)
        if cfg.mode == "copy" and pick != 0:
            entity = blist[members[pick]]
            surface = model.vocab.encode(entity.surface)
            if len(surface) > max_len - len(out):
                break  # never emit part of an entity
            out.extend(surface)
            rec.action, rec.entity_id = "entity-copy", entity.id
            rec.tokens = list(entity.surface)
            # feed the rest of the entity through the decoder without selecting again
            for tok in surface[:-1]:
                _, state = model.decoder_step(state, [tok], audio)
            prev = surface[-1]
            continue
        if delta:
            rec.action = "no-bias"
        if token == EOS_ID:
            return DecodeResult(model.vocab.decode(out), trace, False)
        out.append(token)
        rec.tokens = model.vocab.decode([token])
        prev = token
    if trace:
        trace[-1].truncated = True
    return DecodeResult(model.vocab.decode(out), trace, True)


def plain_decode(model: ParcoModel, frames: np.ndarray, max_len: int = 60,
                 bank: Optional[EntityBank] = None) -> DecodeResult:
    """Decode with only ``<no-bias>`` in the list."""
    return decode(model, frames, BiasingList(), HEFConfig(), max_len=max_len, bank=bank)


def attention_grid(trace: Sequence[StepTrace], blist: BiasingList) -> str:
    """Plain-text grid: one row per step, one column per entity seen in any filtered set."""
    cols: list[int] = []
    for t in trace:
        for m in t.members:
            if m not in cols:
                cols.append(m)
    names = {e.id: " ".join(e.surface) for e in blist.entries}
    width = max(6, *(len(names.get(c, str(c))) for c in cols)) if cols else 6
    head = "step  " + " ".join(names.get(c, str(c)).rjust(width) for c in cols)
    lines = [head]
    for t in trace:
        probs = dict(zip(t.members, t.probs))
        cells = [(f"{probs[c]:.3f}" if c in probs else ".").rjust(width) for c in cols]
        mark = {"entity-copy": "*", "no-bias": "-"}.get(t.action, " ")
        lines.append(f"{t.step:>4}{mark} " + " ".join(cells))
    return "\n".join(lines) + "\n"
