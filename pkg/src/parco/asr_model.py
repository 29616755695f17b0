"""Recurrent attention encoder-decoder with a context-attention biasing head.

Audio: input projection, then a unidirectional LSTM stack (no subsampling).
Decoder: per step, an LSTM cell reads the previous token embedding together
with the previous audio context; its output queries the audio with scaled
dot-product attention, and ``D = tanh([h; a] W_D + b_D)``. Context attention
then scores ``D W_Q`` against the entity keys ``N W_K``, and the token
distribution is ``softmax([D; B] W_out + b_out)`` with ``B = s (N W_V)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .context_encoder import ContextEncoder, _uniform, add_lstm_stack, init_context_params, run_lstm_stack
from .errors import DataError, ShapeError
from .numerics import DiffArray, ParamStore
from .vocab import SOS_ID, Vocab


def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    d, e, V = cfg.d, cfg.d_emb, cfg.vocab_size
    store.add("asr.enc.W_in", _uniform(rng, (cfg.feature_dim, d), cfg.feature_dim))
    store.add("asr.enc.b_in", np.zeros(d))
    add_lstm_stack(store, "asr.enc", d, d, cfg.enc_layers, rng)
    store.add("asr.ctc.W", _uniform(rng, (d, V), d))
    store.add("asr.ctc.b", np.zeros(V))
    store.add("asr.dec.emb", rng.uniform(-0.5, 0.5, size=(V, e)))
    add_lstm_stack(store, "asr.dec", e + d, d, 1, rng)
    store.add("asr.dec.W_att", _uniform(rng, (d, d), d))
    store.add("asr.dec.W_D", _uniform(rng, (2 * d, d), 2 * d))
    store.add("asr.dec.b_D", np.zeros(d))
    store.add("asr.ctx.WQ", _uniform(rng, (d, cfg.d_h), d))
    store.add("asr.ctx.WK", _uniform(rng, (d, cfg.d_h), d))
    store.add("asr.ctx.WV", _uniform(rng, (d, cfg.d_h), d))
    store.add("asr.out.W", _uniform(rng, (d + cfg.d_h, V), d + cfg.d_h))
    store.add("asr.out.b", np.zeros(V))
    init_context_params(store, cfg, rng)
    return store


@dataclass
class EncodedAudio:
    E: DiffArray                # [B, M, d]
    keys_T: DiffArray           # [B, d, M], E transposed for attention
    mask: np.ndarray            # [B, M] bool, True on real frames
    lengths: np.ndarray


@dataclass
class DecodeState:
    h: DiffArray
    c: DiffArray
    a: DiffArray                # previous audio context, fed back as input
    step: int = 1
    audio_weights: Optional[np.ndarray] = None


@dataclass
class ContextKV:
    """Entity keys and values, ``N W_K`` and ``N W_V``."""
    K: DiffArray                # [L+1, d_h]
    V: DiffArray                # [L+1, d_h]

    def rows(self, idx: Sequence[int]) -> "ContextKV":
        idx = np.asarray(idx, dtype=np.int64)
        return ContextKV(nx.index(self.K, idx), nx.index(self.V, idx))

    def __len__(self) -> int:
        return self.K.shape[0]


@dataclass
class TrainingForward:
    logp: DiffArray             # [B, N, V] token log-probabilities
    s: DiffArray                # [B, N, L+1] entity selection probabilities
    D: DiffArray                # [B, N, d]
    E: DiffArray                # [B, M, d]
    ctc_logits: DiffArray       # [B, M, V]
    frame_lengths: np.ndarray


def pad_frames(frames: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    if not frames:
        raise ShapeError("no utterances given")
    lengths = np.array([len(f) for f in frames], dtype=np.int64)
    if lengths.min() < 1:
        raise ShapeError("an utterance has zero frames")
    F = np.asarray(frames[0]).shape[1]
    out = np.zeros((len(frames), int(lengths.max()), F))
    for r, f in enumerate(frames):
        out[r, :len(f)] = f
    return out, lengths


class ParcoModel:
    def __init__(self, store: ParamStore, vocab: Vocab):
        self.store = store
        self.vocab = vocab
        self.cfg = ModelConfig.from_params(store)
        if self.cfg.vocab_size != len(vocab):
            raise DataError(f"checkpoint vocabulary size {self.cfg.vocab_size} != {len(vocab)} tokens")
        self.context = ContextEncoder(store, vocab)
        self._scale = 1.0 / np.sqrt(self.cfg.d)

    def p(self, name: str) -> DiffArray:
        return self.store[name]

    # --- audio ------------------------------------------------------------

    def encode_audio(self, frames: Sequence[np.ndarray]) -> EncodedAudio:
        x, lengths = pad_frames(frames)
        if x.shape[2] != self.cfg.feature_dim:
            raise ShapeError(f"frames have {x.shape[2]} features, model expects {self.cfg.feature_dim}")
        xs = nx.add(nx.matmul(x, self.p("asr.enc.W_in")), self.p("asr.enc.b_in"))
        E = run_lstm_stack(self.store, "asr.enc", xs, lengths=lengths)
        mask = np.arange(x.shape[1])[None, :] < lengths[:, None]
        return EncodedAudio(E, nx.swapaxes(E, 1, 2), mask, lengths)

    def ctc_logits(self, E: DiffArray) -> DiffArray:
        return nx.add(nx.matmul(E, self.p("asr.ctc.W")), self.p("asr.ctc.b"))

    # --- decoder ----------------------------------------------------------

    def initial_state(self, batch: int) -> DecodeState:
        z = np.zeros((batch, self.cfg.d))
        return DecodeState(DiffArray(z), DiffArray(z.copy()), DiffArray(z.copy()))

    def decoder_step(self, state: DecodeState, prev_tokens, audio: EncodedAudio) -> tuple[DiffArray, DecodeState]:
        """Advance one step; returns ``D`` [B, d] and the next state."""
        prev = np.asarray(prev_tokens, dtype=np.int64).reshape(-1)
        if prev.min() < 0 or prev.max() >= self.cfg.vocab_size:
            raise DataError(f"token id outside [0, {self.cfg.vocab_size})")
        x = nx.concat([nx.index(self.p("asr.dec.emb"), prev), state.a], axis=-1)
        h, c = nx.lstm_cell(x, state.h, state.c, self.p("asr.dec.l0.Wx"), self.p("asr.dec.l0.Wh"),
                            self.p("asr.dec.l0.b"))
        q = nx.reshape(nx.matmul(h, self.p("asr.dec.W_att")), (h.shape[0], 1, self.cfg.d))
        scores = nx.scale(nx.matmul(q, audio.keys_T), self._scale)              # [B, 1, M]
        att = nx.softmax(scores, axis=-1, mask=audio.mask[:, None, :])
        a = nx.reshape(nx.matmul(att, audio.E), (h.shape[0], self.cfg.d))
        D = nx.tanh(nx.add(nx.matmul(nx.concat([h, a], axis=-1), self.p("asr.dec.W_D")),
                           self.p("asr.dec.b_D")))
        return D, DecodeState(h, c, a, state.step + 1, att.value[:, 0])

    # --- context attention ------------------------------------------------

    def context_kv(self, N: DiffArray) -> ContextKV:
        if N.ndim != 2 or N.shape[0] < 1:
            raise ShapeError(f"entity encodings must be [L+1, d] with L+1 >= 1, got {N.shape}")
        return ContextKV(nx.matmul(N, self.p("asr.ctx.WK")), nx.matmul(N, self.p("asr.ctx.WV")))

    def context_attention(self, D: DiffArray, kv: ContextKV) -> tuple[DiffArray, DiffArray]:
        """Selection probabilities ``s`` [..., L+1] and bias vector ``B`` [..., d_h]."""
        if len(kv) < 1:
            raise ShapeError("context attention needs at least one entity row")
        q = nx.matmul(D, self.p("asr.ctx.WQ"))
        scores = nx.scale(nx.matmul(q, nx.swapaxes(kv.K, 0, 1)), self._scale)
        s = nx.softmax(scores, axis=-1)
        return s, nx.matmul(s, kv.V)

    def token_logits(self, D: DiffArray, B: DiffArray) -> DiffArray:
        if D.shape[:-1] != B.shape[:-1]:
            raise ShapeError(f"decoder state {D.shape} and bias vector {B.shape} do not line up")
        return nx.add(nx.matmul(nx.concat([D, B], axis=-1), self.p("asr.out.W")), self.p("asr.out.b"))

    def predict_token(self, D: DiffArray, B: DiffArray) -> DiffArray:
        return nx.softmax(self.token_logits(D, B), axis=-1)

    # --- teacher forcing --------------------------------------------------

    def forward_training(self, frames: Sequence[np.ndarray], targets: Sequence[Sequence[int]],
                         N: DiffArray) -> TrainingForward:
        """Teacher-forced rollout over a batch sharing one entity matrix ``N``.

        ``targets`` are id sequences (already ending in ``<eos>`` when a
        stop decision should be learned); one distribution is produced per
        target id. Rows shorter than the longest are padded with ``<eos>``;
        callers mask those steps out of the losses.
        """
        if any(len(t) == 0 for t in targets):
            raise DataError("empty target sequence")
        audio = self.encode_audio(frames)
        Bsz = len(targets)
        n_steps = max(len(t) for t in targets)
        tgt = np.full((Bsz, n_steps), self.vocab.index("<eos>"), dtype=np.int64)
        for r, t in enumerate(targets):
            tgt[r, :len(t)] = t
        prev = np.concatenate([np.full((Bsz, 1), SOS_ID), tgt[:, :-1]], axis=1)
        state = self.initial_state(Bsz)
        Ds = []
        for n in range(n_steps):
            D, state = self.decoder_step(state, prev[:, n], audio)
            Ds.append(D)
        D = nx.stack(Ds, axis=1)
        kv = self.context_kv(N)
        s, B = self.context_attention(D, kv)
        logp = nx.log_softmax(self.token_logits(D, B), axis=-1)
        return TrainingForward(logp, s, D, audio.E, self.ctc_logits(audio.E), audio.lengths)


def step_mask(lengths: Sequence[int], n_steps: Optional[int] = None) -> np.ndarray:
    lengths = np.asarray(lengths)
    n = int(lengths.max()) if n_steps is None else n_steps
    return (np.arange(n)[None, :] < lengths[:, None]).astype(np.float64)
