"""Training objectives: token NLL, CTC, entity selection, contrastive entity loss."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import DataError, NumericalError, ShapeError
from .numerics import DiffArray
from .numerics.tensor import as_diff, record


@dataclass(frozen=True)
class CEDConfig:
    tau: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise DataError(f"CED temperature must be positive, got {self.tau}")


@dataclass(frozen=True)
class LossBreakdown:
    asr: float
    ctc: float
    entity: float
    ced: float
    total: float

    def to_json(self, step: Optional[int] = None) -> str:
        d = asdict(self)
        if step is not None:
            d = {"step": step, **d}
        return json.dumps(d)


# --- token NLL -------------------------------------------------------------

def asr_nll(logp, targets, mask: Optional[np.ndarray] = None, mean: bool = False) -> DiffArray:
    """``-sum log p(t_n)`` from log-probabilities ``logp`` [..., N, V]."""
    logp = as_diff(logp)
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != logp.shape[:-1]:
        raise ShapeError(f"asr_nll: {t.shape} targets for {logp.shape[:-1]} distributions")
    out = nx.nll_gather(logp, t, weights=mask)
    if mean:
        n = t.size if mask is None else float(np.sum(mask))
        out = nx.scale(out, 1.0 / max(n, 1.0))
    return out


# --- CTC -------------------------------------------------------------------

def _extended(targets: Sequence[Sequence[int]], blank: int):
    U = max((len(t) for t in targets), default=0)
    S = 2 * U + 1
    ext = np.full((len(targets), S), blank, dtype=np.int64)
    valid = np.zeros((len(targets), S), dtype=bool)
    for r, t in enumerate(targets):
        ext[r, 1:2 * len(t):2] = t
        valid[r, :2 * len(t) + 1] = True
    skip = np.zeros_like(valid)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    return ext, valid, skip


def ctc_min_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss(logits, targets: Sequence[Sequence[int]], frame_lengths: Optional[Sequence[int]] = None,
             blank: int = 0) -> DiffArray:
    """Per-utterance CTC negative log-likelihood, shape [B].

    ``logits`` is [B, M, C] (unnormalised); frames at or beyond
    ``frame_lengths[b]`` are ignored. The forward and backward recursions
    run in log space over the blank-interleaved label sequence, and the
    gradient w.r.t. the logits is ``softmax - occupancy``.
    """
    logits = as_diff(logits)
    if logits.ndim != 3 or logits.shape[0] != len(targets):
        raise ShapeError(f"ctc_loss: logits {logits.shape} for {len(targets)} targets")
    Bn, M, C = logits.shape
    T = np.full(Bn, M) if frame_lengths is None else np.asarray(frame_lengths, dtype=np.int64)
    for r, t in enumerate(targets):
        if any(not 0 <= x < C or x == blank for x in t):
            raise DataError(f"ctc_loss: target {r} has a label outside the non-blank classes")
        if ctc_min_frames(t) > T[r]:
            raise DataError(f"ctc_loss: target {r} needs {ctc_min_frames(t)} frames, has {T[r]}")
    x = logits.value
    if not np.all(np.isfinite(x)):
        raise NumericalError("ctc_loss: non-finite logits")
    logp = x - x.max(axis=-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))

    ext, valid, skip = _extended(targets, blank)
    S = ext.shape[1]
    # emit[b, t, s] = log p(ext[b, s] at frame t)
    emit = np.take_along_axis(logp, np.broadcast_to(ext[:, None, :], (Bn, M, S)), axis=2)
    emit = np.where(valid[:, None, :], emit, -np.inf)
    S_b = np.array([2 * len(t) + 1 for t in targets])

    with np.errstate(invalid="ignore"):
        alpha = np.full((Bn, M, S), -np.inf)
        alpha[:, 0, 0] = emit[:, 0, 0]
        if S > 1:
            alpha[:, 0, 1] = emit[:, 0, 1]
        for t in range(1, M):
            a = alpha[:, t - 1]
            a1 = np.concatenate([np.full((Bn, 1), -np.inf), a[:, :-1]], axis=1)
            a2 = np.concatenate([np.full((Bn, 2), -np.inf), a[:, :-2]], axis=1)[:, :S]
            a2 = np.where(skip, a2, -np.inf)
            alpha[:, t] = np.logaddexp(np.logaddexp(a, a1), a2) + emit[:, t]

        last = T - 1
        end_a = alpha[np.arange(Bn), last, S_b - 1]
        end_b = np.where(S_b > 1, alpha[np.arange(Bn), last, np.maximum(S_b - 2, 0)], -np.inf)
        ll = np.logaddexp(end_a, end_b)
    if not np.all(np.isfinite(ll)):
        bad = int(np.flatnonzero(~np.isfinite(ll))[0])
        raise NumericalError(f"ctc_loss: target {bad} has zero probability")
    out = DiffArray(-ll)

    def bw(g):
        with np.errstate(invalid="ignore"):
            beta = np.full((Bn, M, S), -np.inf)
            skip_next = np.zeros_like(skip)
            skip_next[:, :-2] = skip[:, 2:]
            for t in range(M - 1, -1, -1):
                nxt = beta[:, t + 1] if t + 1 < M else np.full((Bn, S), -np.inf)
                b1 = np.concatenate([nxt[:, 1:], np.full((Bn, 1), -np.inf)], axis=1)
                b2 = np.concatenate([nxt[:, 2:], np.full((Bn, 2), -np.inf)], axis=1)
                b2 = np.where(skip_next, b2, -np.inf)
                rec = np.logaddexp(np.logaddexp(nxt, b1), b2) + emit[:, t]
                init = np.full((Bn, S), -np.inf)
                init[np.arange(Bn), S_b - 1] = emit[np.arange(Bn), t, S_b - 1]
                prev_end = np.maximum(S_b - 2, 0)
                init[np.arange(Bn), prev_end] = np.where(
                    S_b > 1, emit[np.arange(Bn), t, prev_end], init[np.arange(Bn), prev_end])
                beta[:, t] = np.where((t == last)[:, None], init,
                                      np.where((t < last)[:, None], rec, -np.inf))
            gamma = alpha + beta - emit - ll[:, None, None]
            gamma = np.where(np.isfinite(gamma), gamma, -np.inf)
        post = np.exp(gamma)                                 # [B, M, S]
        onehot = ((ext[:, :, None] == np.arange(C)) & valid[:, :, None]).astype(np.float64)
        occ = post @ onehot
        frame_ok = (np.arange(M)[None, :] < T[:, None])[..., None]
        grad = np.where(frame_ok, np.exp(logp) - occ, 0.0)
        return (grad * g[:, None, None],)

    record([out], [logits], bw)
    return out


# --- entity selection ------------------------------------------------------

def entity_loss(s, beta, mask: Optional[np.ndarray] = None) -> DiffArray:
    """``-sum_n log s[n, beta_n]`` for selection probabilities ``s`` [..., N, L+1]."""
    s = as_diff(s)
    b = np.asarray(beta, dtype=np.int64)
    if b.shape != s.shape[:-1]:
        raise ShapeError(f"entity_loss: labels {b.shape} for selections {s.shape[:-1]}")
    if b.size and (b.min() < 0 or b.max() >= s.shape[-1]):
        raise DataError(f"entity_loss: label outside the {s.shape[-1]}-entry list")
    picked = nx.index(s, tuple(np.indices(b.shape)) + (b,))
    w = np.ones(b.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    return nx.scale(nx.sum(nx.mul(nx.log(picked), w)), -1.0)


# --- contrastive entity disambiguation -------------------------------------

def ced_loss_batch(D, candidates, mask: np.ndarray, cfg: CEDConfig) -> DiffArray:
    """Summed InfoNCE over rows.

    ``D`` [S, d]; ``candidates`` [S, 1+K, d] with the positive in slot 0;
    ``mask`` [S, 1+K] marks real negatives (slot 0 must be True).
    """
    sims = nx.cosine_similarity(nx.reshape(D, (D.shape[0], 1, D.shape[-1])), candidates)
    logits = nx.scale(sims, 1.0 / cfg.tau)
    lse = nx.logsumexp(logits, axis=-1, mask=mask)
    return nx.sum(nx.sub(lse, nx.index(logits, (slice(None), 0))))


def ced_loss(D, positive, negatives, cfg: CEDConfig = CEDConfig()) -> DiffArray:
    D, positive = as_diff(D), as_diff(positive)
    negatives = [as_diff(n) for n in negatives]
    cands = nx.stack([positive] + negatives, axis=0)
    return ced_loss_batch(nx.reshape(D, (1, -1)), nx.reshape(cands, (1,) + cands.shape),
                          np.ones((1, cands.shape[0]), dtype=bool), cfg)


def apply_ced_over_utterance(D, N, beta: Sequence[int], negatives: Mapping[int, Sequence[int]],
                             cfg: CEDConfig = CEDConfig(), nobias_steps: bool = False,
                             gt_positions: Sequence[int] = ()) -> DiffArray:
    """CED summed over entity first-token steps of one utterance.

    ``D`` [N_steps, d] decoder states; ``N`` [L+1, d] list encodings;
    ``negatives`` maps a list position to its negatives' list positions.
    With ``nobias_steps`` the remaining steps also contribute, using row 0
    as positive and the utterance's ground-truth entities as negatives.
    """
    D, N = as_diff(D), as_diff(N)
    steps, cands = [], []
    for n, b in enumerate(beta):
        if b != 0:
            if b not in negatives:
                raise DataError(f"no hard negatives given for list entry {b}")
            steps.append(n)
            cands.append([b] + list(negatives[b]))
        elif nobias_steps and gt_positions:
            steps.append(n)
            cands.append([0] + list(gt_positions))
    if not steps:
        return DiffArray(0.0)
    width = max(len(c) for c in cands)
    idx = np.zeros((len(cands), width), dtype=np.int64)
    mask = np.zeros((len(cands), width), dtype=bool)
    for r, c in enumerate(cands):
        idx[r, :len(c)] = c
        mask[r, :len(c)] = True
    return ced_loss_batch(nx.index(D, np.asarray(steps)), nx.index(N, idx), mask, cfg)


# --- combination -----------------------------------------------------------

def total_loss(asr, ctc, entity, ced, lam: float = 0.7, entity_weight: float = 1.0,
               ced_weight: float = 1.0) -> tuple[DiffArray, LossBreakdown]:
    """``lam * asr + (1 - lam) * ctc + entity + ced`` (the last two optionally reweighted)."""
    if not 0.0 <= lam <= 1.0:
        raise DataError(f"lambda must lie in [0, 1], got {lam}")
    parts = {"asr": as_diff(asr), "ctc": as_diff(ctc), "entity": as_diff(entity), "ced": as_diff(ced)}
    for name, v in parts.items():
        if not np.all(np.isfinite(v.value)):
            raise NumericalError(f"{name} loss is not finite")
    total = nx.add(nx.add(nx.scale(parts["asr"], lam), nx.scale(parts["ctc"], 1.0 - lam)),
                   nx.add(nx.scale(parts["entity"], entity_weight), nx.scale(parts["ced"], ced_weight)))
    vals = {k: float(v.value) for k, v in parts.items()}
    return total, LossBreakdown(total=float(total.value), **vals)


__all__ = ["CEDConfig", "LossBreakdown", "asr_nll", "ctc_loss", "ctc_min_frames", "entity_loss",
           "ced_loss", "ced_loss_batch", "apply_ced_over_utterance", "total_loss"]
