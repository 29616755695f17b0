"""Mini-batch SGD over the combined objective, with per-batch biasing lists."""

from __future__ import annotations

import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, TextIO, Union

import numpy as np

from . import numerics as nx
from .asr_model import ParcoModel, init_params, step_mask
from .biasing import BiasingList, BiasingWarning, Entity, EntitySpan, build_entity_labels, mine_hard_negatives
from .config import ModelConfig
from .errors import DataError, NumericalError
from .losses import CEDConfig, LossBreakdown, apply_ced_over_utterance, asr_nll, ctc_loss, entity_loss, total_loss
from .numerics import DiffArray, Tape, checkpoint
from .synthdata import SynthCorpus, Utterance
from .vocab import EOS_ID, Vocab

log = logging.getLogger(__name__)


OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    optimizer: str = "sgd"
    lam: float = 0.7
    tau: float = 0.1
    entity_weight: float = 1.0
    ced_weight: float = 1.0
    n_negatives: int = 3
    ced_nobias_steps: bool = False
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise DataError(f"train config: {name} must be positive")
        if not self.lr > 0:
            raise DataError("train config: lr must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise DataError(f"train config: lam must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.momentum < 1.0:
            raise DataError("train config: momentum must lie in [0, 1)")
        if not self.tau > 0 or not self.clip_norm > 0:
            raise DataError("train config: tau and clip_norm must be positive")
        if self.entity_weight < 0 or self.ced_weight < 0:
            raise DataError("train config: loss multipliers must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise DataError(f"train config: optimizer must be one of {OPTIMIZERS}")
        if not 1 <= self.n_negatives <= 3:
            raise DataError("train config: n_negatives must lie in [1, 3]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise DataError(f"train config: unknown keys {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# --- batches ----------------------------------------------------------------

@dataclass
class Batch:
    utts: list[Utterance]
    blist: BiasingList
    negatives: dict[int, list[int]]     # list position -> negatives' list positions
    targets: list[list[int]]            # token ids ending in <eos>
    betas: list[list[int]]              # list position per target step, 0 elsewhere


class BatchBuilder:
    """Builds the shared biasing list of a batch: ``<no-bias>``, GT entities and their hard negatives."""

    def __init__(self, vocab: Vocab, entities: Sequence[Entity], pool: Optional[Sequence[Entity]] = None,
                 n_negatives: int = 3):
        self.vocab = vocab
        self.by_id = {e.id: e for e in entities}
        pool = list(pool) if pool is not None else list(entities)
        self._negs: dict[int, list[Entity]] = {}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BiasingWarning)
            for e in entities:
                hn = mine_hard_negatives(e, pool, n_negatives)
                self._negs[e.id] = [self.by_id[i] for i in hn.negative_ids]

    def entity(self, eid: int) -> Entity:
        try:
            return self.by_id[eid]
        except KeyError:
            raise DataError(f"span refers to unknown entity id {eid}") from None

    def __call__(self, utts: Sequence[Utterance]) -> Batch:
        gt = {s.bias_id for u in utts for s in u.spans}
        members = set(gt)
        for eid in gt:
            self.entity(eid)
            members.update(e.id for e in self._negs[eid])
        blist = BiasingList(sorted((self.by_id[i] for i in members), key=lambda e: e.id))
        negatives = {blist.position(eid): [blist.position(n.id) for n in self._negs[eid]] for eid in gt}
        targets, betas = [], []
        for u in utts:
            targets.append(self.vocab.encode(u.tokens) + [EOS_ID])
            spans = [EntitySpan(s.start, s.end, blist.position(s.bias_id)) for s in u.spans]
            betas.append(build_entity_labels(len(u.tokens), spans) + [0])
        return Batch(list(utts), blist, negatives, targets, betas)


def _pad(rows: Sequence[Sequence[int]], width: int, fill: int) -> np.ndarray:
    out = np.full((len(rows), width), fill, dtype=np.int64)
    for r, row in enumerate(rows):
        out[r, :len(row)] = row
    return out


def batch_loss(model: ParcoModel, batch: Batch, cfg: TrainConfig) -> tuple[DiffArray, LossBreakdown]:
    """Combined objective of a batch; each part is summed per utterance and averaged over the batch."""
    N = model.context.encode(batch.blist.entries)
    fwd = model.forward_training([u.frames for u in batch.utts], batch.targets, N)
    n_utt = len(batch.utts)
    n_steps = fwd.logp.shape[1]
    mask = step_mask([len(t) for t in batch.targets], n_steps)
    tgt = _pad(batch.targets, n_steps, EOS_ID)
    beta = _pad(batch.betas, n_steps, 0)
    asr = nx.scale(asr_nll(fwd.logp, tgt, mask), 1.0 / n_utt)
    ctc = nx.scale(nx.sum(ctc_loss(fwd.ctc_logits, [t[:-1] for t in batch.targets], fwd.frame_lengths)),
                   1.0 / n_utt)
    ent = nx.scale(entity_loss(fwd.s, beta, mask), 1.0 / n_utt)
    ced_cfg = CEDConfig(cfg.tau)
    parts = []
    for r, b in enumerate(batch.betas):
        if cfg.ced_weight == 0 or not (any(b) or cfg.ced_nobias_steps):
            continue
        gts = sorted({x for x in b if x})
        parts.append(apply_ced_over_utterance(nx.index(fwd.D, r), N, b, batch.negatives, ced_cfg,
                                              nobias_steps=cfg.ced_nobias_steps, gt_positions=gts))
    ced = nx.scale(nx.sum(nx.stack(parts)), 1.0 / n_utt) if parts else DiffArray(0.0)
    return total_loss(asr, ctc, ent, ced, cfg.lam, cfg.entity_weight, cfg.ced_weight)


def _locate_nonfinite(model: ParcoModel, batch: Batch, build: BatchBuilder, cfg: TrainConfig) -> str:
    for u in batch.utts:
        try:
            loss, _ = batch_loss(model, build([u]), cfg)
            if np.isfinite(loss.value):
                continue
        except NumericalError:
            pass
        return u.id
    return ",".join(u.id for u in batch.utts)


# --- optimisation -------------------------------------------------------------

def clip_gradients(params: Sequence[DiffArray], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``; returns the norm before."""
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))
    if total > max_norm:
        factor = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


class SGD:
    def __init__(self, params: Sequence[DiffArray], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            if self.momentum:
                v *= self.momentum
                v += p.grad
                p.value = p.value - self.lr * v
            else:
                p.value = p.value - self.lr * p.grad


class Adam:
    def __init__(self, params: Sequence[DiffArray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- evaluation between epochs ----------------------------------------------

def evaluate_loss(model: ParcoModel, utts: Sequence[Utterance], build: BatchBuilder,
                  cfg: TrainConfig) -> dict:
    """Average loss components plus teacher-forced accuracies, without recording gradients."""
    sums = dict(asr=0.0, ctc=0.0, entity=0.0, ced=0.0, total=0.0)
    tok_ok = tok_n = sel_ok = sel_n = 0
    for start in range(0, len(utts), cfg.batch_size):
        chunk = list(utts[start:start + cfg.batch_size])
        batch = build(chunk)
        _, parts = batch_loss(model, batch, cfg)
        for k in sums:
            sums[k] += getattr(parts, k) * len(chunk)
        N = model.context.encode(batch.blist.entries)
        fwd = model.forward_training([u.frames for u in chunk], batch.targets, N)
        pred = fwd.logp.value.argmax(-1)
        sel = fwd.s.value.argmax(-1)
        for r, (t, b) in enumerate(zip(batch.targets, batch.betas)):
            tok_ok += int(np.sum(pred[r, :len(t)] == t))
            tok_n += len(t)
            for n, x in enumerate(b):
                if x:
                    sel_ok += int(sel[r, n] == x)
                    sel_n += 1
    out = {k: v / max(1, len(utts)) for k, v in sums.items()}
    out["token_acc"] = tok_ok / max(1, tok_n)
    out["selection_acc"] = sel_ok / max(1, sel_n)
    return out


# --- the loop -----------------------------------------------------------------

@dataclass
class TrainResult:
    model: ParcoModel
    best_epoch: int
    best_dev: float
    epochs: list[dict] = field(default_factory=list)


def vocab_for(corpus: SynthCorpus) -> Vocab:
    return Vocab(corpus.lexicon.tokens())


def train(corpus: SynthCorpus, model_cfg: Optional[ModelConfig] = None, cfg: TrainConfig = TrainConfig(),
          log_stream: Optional[TextIO] = None, ckpt_path: Union[str, Path, None] = None,
          train_utts: Optional[Sequence[Utterance]] = None, dev_utts: Optional[Sequence[Utterance]] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train on ``corpus.train`` and keep the parameters with the lowest dev loss.

    ``log_stream`` receives one JSON line per batch (``"kind": "step"``)
    and one per epoch (``"kind": "epoch"``). Nothing time-dependent is
    written there, so identical runs produce identical logs.
    """
    vocab = vocab_for(corpus)
    train_utts = list(corpus.train if train_utts is None else train_utts)
    dev_utts = list(corpus.dev if dev_utts is None else dev_utts)
    if not train_utts:
        raise DataError("no training utterances")
    model_cfg = model_cfg or ModelConfig(vocab_size=len(vocab), n_phonemes=len(corpus.inventory),
                                         feature_dim=train_utts[0].frames.shape[1])
    if model_cfg.vocab_size != len(vocab):
        raise DataError(f"model vocab_size {model_cfg.vocab_size} != corpus vocabulary {len(vocab)}")
    model = ParcoModel(init_params(model_cfg, cfg.seed), vocab)
    pool_ids = corpus.split_entities.get("train")
    pool = [corpus.entity(i) for i in pool_ids] if pool_ids else corpus.entities
    build = BatchBuilder(vocab, corpus.entities, pool, cfg.n_negatives)
    params = list(model.store.values())
    opt = SGD(params, cfg.lr, cfg.momentum) if cfg.optimizer == "sgd" else Adam(params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    best = (np.inf, 0)
    best_snap = model.store.snapshot()
    epochs = []
    step = 0

    def emit(rec: dict) -> None:
        if log_stream is not None:
            log_stream.write(json.dumps(rec, sort_keys=True) + "\n")
            log_stream.flush()

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_utts))
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_utts[int(i)] for i in order[start:start + cfg.batch_size]]
            batch = build(chunk)
            model.store.zero_grad()
            try:
                with Tape() as tape:
                    loss, parts = batch_loss(model, batch, cfg)
                    if not np.isfinite(loss.value):
                        raise NumericalError("total loss is not finite")
                    tape.backward(loss)
            except NumericalError as e:
                bad = _locate_nonfinite(model, batch, build, cfg)
                raise NumericalError(f"non-finite loss at step {step + 1} (utterance {bad}): {e}") from None
            norm = clip_gradients(params, cfg.clip_norm)
            if not np.isfinite(norm):
                bad = _locate_nonfinite(model, batch, build, cfg)
                raise NumericalError(f"non-finite gradient at step {step + 1} (utterance {bad})")
            opt.step()
            step += 1
            emit({"kind": "step", "epoch": epoch, "step": step, "grad_norm": norm, **asdict(parts)})
        dev = evaluate_loss(model, dev_utts, build, cfg) if dev_utts else {}
        rec = {"kind": "epoch", "epoch": epoch, "step": step, **{f"dev_{k}": v for k, v in dev.items()}}
        score = dev.get("total", -epoch)
        if score < best[0]:
            best = (score, epoch)
            best_snap = model.store.snapshot()
        rec["best_epoch"] = best[1]
        epochs.append(rec)
        emit(rec)
        log.info("epoch %d dev total %.4f", epoch, dev.get("total", float("nan")))
        if on_epoch is not None:
            on_epoch(rec)
    model.store.restore(best_snap)
    if ckpt_path is not None:
        save_model(model, ckpt_path)
    return TrainResult(model, best[1], float(best[0]), epochs)


# --- checkpoints ----------------------------------------------------------------

def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".vocab.json")


def save_model(model: ParcoModel, path: Union[str, Path]) -> None:
    """Parameters in the binary format plus a JSON sidecar holding the token vocabulary."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(model.store, path)
    _meta_path(path).write_text(json.dumps({"tokens": model.vocab.tokens}) + "\n", encoding="utf-8")


def load_model(path: Union[str, Path]) -> ParcoModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    meta = _meta_path(path)
    if not meta.exists():
        raise DataError(f"checkpoint vocabulary {meta} is missing")
    tokens = json.loads(meta.read_text(encoding="utf-8"))["tokens"]
    return ParcoModel(checkpoint.load(path), Vocab(tokens))


def stderr_logging(level: int = logging.INFO) -> None:
    logging.basicConfig(stream=sys.stderr, level=level, format="%(asctime)s %(name)s %(message)s")
