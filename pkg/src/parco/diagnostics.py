"""Finite-difference checks over every primitive and over the full training objective."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .asr_model import ParcoModel, init_params
from .biasing import Entity, EntitySpan
from .config import ModelConfig
from .losses import CEDConfig, asr_nll, ced_loss, ctc_loss, entity_loss
from .numerics import DiffArray, grad_check_detail
from .synthdata import Utterance
from .training import BatchBuilder, TrainConfig, batch_loss
from .vocab import Vocab

PRIMITIVE_LIMIT = 1e-6
FULL_LIMIT = 1e-4


@dataclass
class CheckReport:
    name: str
    max_error: float
    limit: float
    seconds: float
    per_param: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.max_error < self.limit

    def to_dict(self) -> dict:
        return {"name": self.name, "max_rel_error": self.max_error, "limit": self.limit,
                "ok": self.ok, "seconds": round(self.seconds, 3)}


def _p(rng, *shape, name="x", low=None):
    v = rng.standard_normal(shape) if low is None else rng.uniform(low, low + 1.0, size=shape)
    return DiffArray(v, requires_grad=True, name=name)


def _primitive_cases() -> dict[str, tuple[Callable[[], DiffArray], list[DiffArray]]]:
    rng = np.random.default_rng(0)
    a, b = _p(rng, 3, 4, name="a"), _p(rng, 3, 4, name="b")
    row = _p(rng, 4, name="row")
    pos = _p(rng, 3, 4, name="pos", low=0.5)
    m, n = _p(rng, 4, 2, name="m"), _p(rng, 2, 3, 4, name="n")
    w34, w32 = rng.standard_normal((3, 4)), rng.standard_normal((3, 2))
    mask = np.array([[True, True, False, True]] * 3)
    t = np.array([0, 3, 1])
    d = 3
    x, h0, c0 = _p(rng, 2, 4, name="x"), _p(rng, 2, d, name="h"), _p(rng, 2, d, name="c")
    Wx, Wh, bias = _p(rng, 4, 4 * d, name="Wx"), _p(rng, d, 4 * d, name="Wh"), _p(rng, 4 * d, name="b")
    xs = _p(rng, 2, 5, 4, name="xs")
    wh = rng.standard_normal((2, 5, d))
    logits = _p(rng, 2, 6, 4, name="logits")
    s_raw = _p(rng, 5, 4, name="s")
    Dv, pos_v, negs = _p(rng, 6, name="D"), _p(rng, 6, name="pos"), _p(rng, 3, 6, name="negs")
    weigh = lambda y, w: nx.sum(nx.mul(y, w))  # noqa: E731
    return {
        "add": (lambda: weigh(nx.add(a, row), w34), [a, row]),
        "sub": (lambda: weigh(nx.sub(a, b), w34), [a, b]),
        "mul": (lambda: weigh(nx.mul(a, b), w34), [a, b]),
        "scale": (lambda: weigh(nx.scale(a, -2.5), w34), [a]),
        "sigmoid": (lambda: weigh(nx.sigmoid(a), w34), [a]),
        "tanh": (lambda: weigh(nx.tanh(a), w34), [a]),
        "exp": (lambda: weigh(nx.exp(a), w34), [a]),
        "log": (lambda: weigh(nx.log(pos), w34), [pos]),
        "sum": (lambda: weigh(nx.sum(a, axis=0), row.value), [a]),
        "reshape": (lambda: weigh(nx.reshape(a, (4, 3)), w34.reshape(4, 3)), [a]),
        "swapaxes": (lambda: weigh(nx.swapaxes(a, 0, 1), w34.T), [a]),
        "index": (lambda: weigh(nx.index(a, (np.array([0, 2, 2]), slice(1, 3))), w32), [a]),
        "concat": (lambda: weigh(nx.concat([a, b], axis=1), np.tile(w34, 2)), [a, b]),
        "stack": (lambda: weigh(nx.stack([a, b], axis=0), np.stack([w34, -w34])), [a, b]),
        "matmul": (lambda: weigh(nx.matmul(a, m), w32), [a, m]),
        "matmul_batched": (lambda: weigh(nx.matmul(n, nx.swapaxes(n, 1, 2)), np.ones((2, 3, 3))), [n]),
        "softmax_masked": (lambda: weigh(nx.softmax(a, mask=mask), w34), [a]),
        "log_softmax": (lambda: weigh(nx.log_softmax(a), w34), [a]),
        "logsumexp_masked": (lambda: weigh(nx.logsumexp(a, mask=mask), w34[:, 0]), [a]),
        "nll_gather": (lambda: nx.nll_gather(nx.log_softmax(a), t), [a]),
        "cosine_similarity": (lambda: weigh(nx.cosine_similarity(a, b), w34[:, 0]), [a, b]),
        "lstm_cell": (lambda: _lstm_cell_out(x, h0, c0, Wx, Wh, bias), [x, h0, c0, Wx, Wh, bias]),
        "lstm_layer": (lambda: weigh(nx.lstm_layer(xs, Wx, Wh, bias, lengths=np.array([5, 3])), wh),
                       [xs, Wx, Wh, bias]),
        "ctc_loss": (lambda: nx.sum(ctc_loss(logits, [[1, 2], [3, 3]], [6, 5])), [logits]),
        "asr_nll": (lambda: asr_nll(nx.log_softmax(s_raw), [1, 0, 3, 2, 2]), [s_raw]),
        "entity_loss": (lambda: entity_loss(nx.softmax(s_raw), [0, 2, 0, 3, 1]), [s_raw]),
        "ced_loss": (lambda: ced_loss(Dv, pos_v, [negs[i] for i in range(3)], CEDConfig(0.5)),
                     [Dv, pos_v, negs]),
    }


def _lstm_cell_out(x, h0, c0, Wx, Wh, b):
    h, c = nx.lstm_cell(x, h0, c0, Wx, Wh, b)
    return nx.add(nx.sum(nx.mul(h, h)), nx.sum(nx.scale(c, 0.5)))


def check_primitives() -> list[CheckReport]:
    out = []
    for name, (f, params) in _primitive_cases().items():
        t = time.perf_counter()
        detail = grad_check_detail(f, params)
        out.append(CheckReport(name, max(detail.values()), PRIMITIVE_LIMIT, time.perf_counter() - t, detail))
    return out


# --- the whole objective on a two-utterance micro-batch ---------------------

MICRO_TOKENS = ["ba", "pa", "ku", "gu", "Ba1", "Ku1", "Pa1"]


def micro_batch(seed: int = 0):
    """A tiny model, two utterances and three entities; negatives come from the list."""
    rng = np.random.default_rng(seed)
    vocab = Vocab(MICRO_TOKENS)
    cfg = ModelConfig(vocab_size=len(vocab), n_phonemes=6, feature_dim=3, d=4, d_emb=3,
                      enc_layers=1, ctx_layers=1)
    model = ParcoModel(init_params(cfg, seed), vocab)
    ents = [Entity(1, ("Ba1", "Ku1"), (1, 2, 3, 4)), Entity(2, ("Pa1", "Ku1"), (5, 2, 3, 4)),
            Entity(3, ("Ba1",), (1, 2))]
    utts = [Utterance("u1", rng.standard_normal((9, 3)), ["ba", "Ba1", "Ku1"], [EntitySpan(1, 3, 1)]),
            Utterance("u2", rng.standard_normal((7, 3)), ["Ba1", "gu"], [EntitySpan(0, 1, 3)])]
    build = BatchBuilder(vocab, ents, n_negatives=2)
    return model, build(utts)


def check_full_loss(full: bool = False, cfg: TrainConfig = TrainConfig(), coords: int = 4) -> CheckReport:
    """All four terms combined; ``full`` checks every coordinate of every parameter."""
    model, batch = micro_batch()
    f = lambda: batch_loss(model, batch, cfg)[0]  # noqa: E731
    t = time.perf_counter()
    detail = grad_check_detail(f, model.store, coords_per_param=None if full else coords)
    return CheckReport("full_objective", max(detail.values()), FULL_LIMIT, time.perf_counter() - t, detail)


def run_all(full: bool = False) -> list[CheckReport]:
    return check_primitives() + [check_full_loss(full)]
