"""Phoneme-enriched entity encodings.

Each entity is read twice, once as its surface tokens and once as its
phoneme sequence. Each reading runs through its own embedding table and
LSTM stack; the final hidden state of the top layer summarises it. The two
summaries are concatenated and mapped back to ``d`` by a linear layer.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nx
from .biasing import BiasingList, Entity
from .config import ModelConfig
from .errors import LexiconError
from .numerics import DiffArray, ParamStore
from .vocab import Vocab


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_lstm_stack(store: ParamStore, prefix: str, d_in: int, d: int, layers: int, rng) -> None:
    for k in range(layers):
        din = d_in if k == 0 else d
        store.add(f"{prefix}.l{k}.Wx", _uniform(rng, (din, 4 * d), din))
        store.add(f"{prefix}.l{k}.Wh", _uniform(rng, (d, 4 * d), d))
        b = np.zeros(4 * d)
        b[d:2 * d] = 1.0  # forget gate starts open
        store.add(f"{prefix}.l{k}.b", b)


def run_lstm_stack(store: ParamStore, prefix: str, xs, lengths=None) -> DiffArray:
    k = 0
    while f"{prefix}.l{k}.Wx" in store:
        xs = nx.lstm_layer(xs, store[f"{prefix}.l{k}.Wx"], store[f"{prefix}.l{k}.Wh"],
                           store[f"{prefix}.l{k}.b"], lengths=lengths)
        k += 1
    return xs


def init_context_params(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    d, e = cfg.d, cfg.d_emb
    n_src = 0
    if cfg.use_text:
        store.add("ctx.text.emb", rng.uniform(-0.5, 0.5, size=(cfg.vocab_size, e)))
        add_lstm_stack(store, "ctx.text", e, d, cfg.ctx_layers, rng)
        n_src += 1
    if cfg.use_phonemes:
        store.add("ctx.phon.emb", rng.uniform(-0.5, 0.5, size=(cfg.n_phonemes, e)))
        add_lstm_stack(store, "ctx.phon", e, d, cfg.ctx_layers, rng)
        n_src += 1
    store.add("ctx.fuse.W", _uniform(rng, (n_src * d, d), n_src * d))
    store.add("ctx.fuse.b", np.zeros(d))


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    ids = np.zeros((len(seqs), int(lengths.max())), dtype=np.int64)
    for r, s in enumerate(seqs):
        ids[r, :len(s)] = s
    return ids, lengths


def _summarise(store: ParamStore, branch: str, seqs) -> DiffArray:
    ids, lengths = _pad(seqs)
    xs = nx.index(store[f"{branch}.emb"], ids)
    hs = run_lstm_stack(store, branch, xs, lengths=lengths)
    return nx.index(hs, (slice(None), -1))


class ContextEncoder:
    """Maps entities to ``d``-dimensional vectors using the ``ctx.*`` parameters of a store."""

    def __init__(self, store: ParamStore, vocab: Vocab):
        self.store = store
        self.vocab = vocab
        self.use_text = "ctx.text.emb" in store
        self.use_phonemes = "ctx.phon.emb" in store
        self.n_phonemes = store["ctx.phon.emb"].shape[0] if self.use_phonemes else None

    def _phonemes(self, e: Entity) -> tuple[int, ...]:
        if self.n_phonemes is not None and any(not 0 <= p < self.n_phonemes for p in e.phonemes):
            raise LexiconError(f"entity {e.id}: phoneme index outside the inventory")
        return e.phonemes

    def encode(self, entities: Sequence[Entity]) -> DiffArray:
        """One row per entity, in order. All rows are computed as one padded batch."""
        parts = []
        if self.use_text:
            parts.append(_summarise(self.store, "ctx.text", [self.vocab.encode(e.surface) for e in entities]))
        if self.use_phonemes:
            parts.append(_summarise(self.store, "ctx.phon", [self._phonemes(e) for e in entities]))
        joined = parts[0] if len(parts) == 1 else nx.concat(parts, axis=-1)
        return nx.add(nx.matmul(joined, self.store["ctx.fuse.W"]), self.store["ctx.fuse.b"])

    def encode_entity(self, entity: Entity) -> DiffArray:
        return nx.index(self.encode([entity]), 0)

    def encode_biasing_list(self, blist: BiasingList) -> DiffArray:
        """Row ``l`` encodes entry ``l``; row 0 is ``<no-bias>`` through the same pathway."""
        return self.encode(blist.entries)
