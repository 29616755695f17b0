"""End-to-end runs: generate, train, decode with and without biasing, score.

Also holds the ablation presets and the measurements used to compare
them: entity error rates under different decoding set-ups, how often the
ground-truth entity out-attends its hard negatives, and a span audit of
copy-mode output.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .asr_model import ParcoModel
from .biasing import BiasingList, BiasingWarning, Entity, assemble_inference_list, mine_hard_negatives
from .config import ModelConfig
from .errors import DataError
from .hef import DecodeResult, EntityBank, HEFConfig, attention_grid, decode
from .metrics import EvalReport, evaluate
from .synthdata import SynthConfig, SynthCorpus, Utterance, generate
from .training import TrainConfig, train, vocab_for
from .vocab import EOS_ID

log = logging.getLogger(__name__)

N_DISTRACTORS = 50


@dataclass(frozen=True)
class Preset:
    name: str
    train: dict = field(default_factory=dict)       # TrainConfig overrides
    model: dict = field(default_factory=dict)       # ModelConfig overrides
    hef: dict = field(default_factory=dict)         # HEFConfig overrides


PRESETS = {p.name: p for p in [
    Preset("full"),
    Preset("no_hef", hef={"enabled": False}),
    Preset("no_ced", train={"ced_weight": 0.0}),
    Preset("no_ced_entity", train={"ced_weight": 0.0, "entity_weight": 0.0}),
    Preset("no_pe", model={"use_phonemes": False}),
    Preset("no_te", model={"use_text": False}),
]}


def preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise DataError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# --- biasing lists ---------------------------------------------------------

def gt_entities(corpus: SynthCorpus, utt: Utterance) -> list[Entity]:
    return [corpus.entity(s.bias_id) for s in utt.spans]


def inference_lists(corpus: SynthCorpus, utts: Sequence[Utterance], n_distractors: int = N_DISTRACTORS,
                    seed: int = 0, pool: Optional[Sequence[Entity]] = None) -> list[BiasingList]:
    """One list per utterance: its ground-truth entities plus ``n_distractors`` others."""
    pool = corpus.entities if pool is None else pool
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BiasingWarning)
        return [assemble_inference_list(gt_entities(corpus, u), pool, n_distractors, seed=seed * 1_000_003 + i)
                for i, u in enumerate(utts)]


# --- decoding and scoring --------------------------------------------------

def max_decode_len(utt: Utterance) -> int:
    return 2 * len(utt.tokens) + 5


def decode_all(model: ParcoModel, utts: Sequence[Utterance], lists: Optional[Sequence[BiasingList]],
               cfg: HEFConfig, bank: Optional[EntityBank] = None,
               max_len: Optional[int] = None) -> list[DecodeResult]:
    """Greedy decode per utterance; ``lists=None`` decodes with ``<no-bias>`` only."""
    bank = bank or EntityBank(model)
    out = []
    for i, u in enumerate(utts):
        bl = BiasingList() if lists is None else lists[i]
        out.append(decode(model, u.frames, bl, cfg, max_len=max_len or max_decode_len(u), bank=bank))
    return out


def score(utts: Sequence[Utterance], results: Sequence[DecodeResult],
          baseline: Optional[EvalReport] = None) -> EvalReport:
    return evaluate([u.tokens for u in utts], [u.spans for u in utts], [r.tokens for r in results], baseline)


@dataclass
class SpanAudit:
    emissions: int = 0
    violations: int = 0

    @property
    def ok(self) -> bool:
        return self.violations == 0


def audit_copy_spans(results: Sequence[DecodeResult], lists: Sequence[BiasingList]) -> SpanAudit:
    """Every copy emission must be the full surface of an entity in that utterance's list."""
    audit = SpanAudit()
    for res, bl in zip(results, lists):
        surfaces = {e.id: list(e.surface) for e in bl.entries}
        for t in res.trace:
            if t.action != "entity-copy":
                continue
            audit.emissions += 1
            if surfaces.get(t.entity_id) != t.tokens:
                audit.violations += 1
        # the copied tokens must also appear contiguously in the output
        pos = 0
        for t in res.trace:
            if t.action == "entity-copy":
                if res.tokens[pos:pos + len(t.tokens)] != t.tokens:
                    audit.violations += 1
            pos += len(t.tokens)
    return audit


def gt_attention_rate(model: ParcoModel, corpus: SynthCorpus, utts: Sequence[Utterance],
                      lists: Sequence[BiasingList], n_negatives: int = 3) -> float:
    """Share of entity first-token steps where the GT entity gets the highest
    selection probability among itself and its hard negatives.

    Teacher-forced with each utterance's own list; negatives are mined from
    that list so every compared entry is actually attended over.
    """
    hits = total = 0
    for u, bl in zip(utts, lists):
        targets = model.vocab.encode(u.tokens) + [EOS_ID]
        fwd = model.forward_training([u.frames], [targets], model.context.encode(bl.entries))
        s = fwd.s.value[0]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BiasingWarning)
            for sp in u.spans:
                gt = corpus.entity(sp.bias_id)
                negs = mine_hard_negatives(gt, bl.entities, n_negatives).negative_ids
                cand = [bl.position(gt.id)] + [bl.position(i) for i in negs]
                row = s[sp.start]
                hits += int(cand[int(np.argmax(row[cand]))] == cand[0])
                total += 1
    if total == 0:
        raise DataError("no entity spans to measure")
    return hits / total


# --- one seed, end to end ------------------------------------------------------

@dataclass
class SeedReport:
    seed: int
    ne_er_nobias: float
    ne_er_biased: float
    ne_er_no_hef: float
    er_nobias: float
    er_biased: float
    ne_rrr: float
    gt_attention_ced: float
    gt_attention_no_ced: Optional[float]
    copy_emissions: int
    copy_violations: int
    pipeline_seconds: float
    train_seconds: float
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def run_seed(seed: int, synth: Optional[SynthConfig] = None, tcfg: Optional[TrainConfig] = None,
             model_over: Optional[dict] = None, hef: HEFConfig = HEFConfig(), with_no_ced: bool = True,
             probe_grid: bool = False) -> tuple[SeedReport, dict]:
    """Generate, train, decode three ways and score, all pinned to ``seed``."""
    timings = {}
    t0 = time.perf_counter()
    synth = replace(synth or SynthConfig(), seed=seed)
    corpus = generate(synth)
    timings["generate"] = time.perf_counter() - t0
    tcfg = replace(tcfg or TrainConfig(), seed=seed)
    vocab = vocab_for(corpus)
    mcfg = ModelConfig(vocab_size=len(vocab), n_phonemes=len(corpus.inventory),
                       feature_dim=synth.feature_dim, **(model_over or {}))
    t = time.perf_counter()
    model = train(corpus, mcfg, tcfg).model
    timings["train"] = time.perf_counter() - t
    t = time.perf_counter()
    utts = corpus.test
    lists = inference_lists(corpus, utts, seed=seed)
    bank = EntityBank(model, corpus.entities)
    plain = decode_all(model, utts, None, hef, bank)
    biased = decode_all(model, utts, lists, hef, bank)
    timings["decode"] = time.perf_counter() - t
    t = time.perf_counter()
    rep_plain = score(utts, plain)
    rep_biased = score(utts, biased, rep_plain)
    timings["eval"] = time.perf_counter() - t
    pipeline = time.perf_counter() - t0
    no_hef = score(utts, decode_all(model, utts, lists, replace(hef, enabled=False), bank))
    audit = audit_copy_spans(biased, lists) if hef.mode == "copy" else SpanAudit()
    att_ced = gt_attention_rate(model, corpus, utts, lists)
    att_no_ced = None
    extras = {"model": model, "corpus": corpus, "lists": lists}
    if with_no_ced:
        t = time.perf_counter()
        plain_model = train(corpus, mcfg, replace(tcfg, ced_weight=0.0)).model
        timings["train_no_ced"] = time.perf_counter() - t
        att_no_ced = gt_attention_rate(plain_model, corpus, utts, lists)
        extras["model_no_ced"] = plain_model
    if probe_grid:
        extras["grids"] = probe_grids(extras, hef)
    rep = SeedReport(seed=seed, ne_er_nobias=rep_plain.ne_er, ne_er_biased=rep_biased.ne_er,
                     ne_er_no_hef=no_hef.ne_er, er_nobias=rep_plain.er, er_biased=rep_biased.er,
                     ne_rrr=rep_biased.ne_er_rrr if rep_biased.ne_er_rrr is not None else 0.0,
                     gt_attention_ced=att_ced, gt_attention_no_ced=att_no_ced,
                     copy_emissions=audit.emissions, copy_violations=audit.violations,
                     pipeline_seconds=pipeline, train_seconds=timings["train"], timings=timings)
    return rep, extras


def probe_utterance(corpus: SynthCorpus) -> int:
    """Index of the first test utterance with an entity of two or more tokens."""
    for i, u in enumerate(corpus.test):
        if any(s.end - s.start >= 2 for s in u.spans):
            return i
    return 0


def probe_grids(extras: dict, hef: HEFConfig) -> dict[str, str]:
    corpus, lists = extras["corpus"], extras["lists"]
    i = probe_utterance(corpus)
    u = corpus.test[i]
    grids = {}
    for key in ("model", "model_no_ced"):
        if key in extras:
            res = decode(extras[key], u.frames, lists[i], replace(hef, sigma=0.0), max_len=max_decode_len(u))
            grids[key] = attention_grid(res.trace, lists[i])
    return grids

