"""Model dimensions, inferred back from checkpoints when loading."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .errors import DataError
from .numerics import ParamStore


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_phonemes: int
    feature_dim: int
    d: int = 64
    d_emb: int = 32
    enc_layers: int = 2
    ctx_layers: int = 2
    use_text: bool = True
    use_phonemes: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "n_phonemes", "feature_dim", "d", "d_emb", "enc_layers", "ctx_layers"):
            if getattr(self, name) < 1:
                raise DataError(f"model config: {name} must be positive")
        if not (self.use_text or self.use_phonemes):
            raise DataError("model config: the context encoder needs the text or the phoneme branch")

    @property
    def d_h(self) -> int:
        return self.d

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_params(cls, store: ParamStore) -> "ModelConfig":
        """Recover dimensions from parameter names and shapes."""
        try:
            vocab_size, d_emb = store["asr.dec.emb"].shape
            feature_dim, d = store["asr.enc.W_in"].shape
            enc_layers = sum(1 for n in store.names() if n.startswith("asr.enc.l") and n.endswith(".Wx"))
            use_text = "ctx.text.emb" in store
            use_phonemes = "ctx.phon.emb" in store
            branch = "ctx.text" if use_text else "ctx.phon"
            ctx_layers = sum(1 for n in store.names() if n.startswith(branch + ".l") and n.endswith(".Wx"))
            # without the phoneme branch the inventory size plays no role in the model
            n_phonemes = store["ctx.phon.emb"].shape[0] if use_phonemes else 1
        except KeyError as e:
            raise DataError(f"checkpoint is missing parameter {e.args[0]!r}") from None
        return cls(vocab_size=int(vocab_size), n_phonemes=int(n_phonemes), feature_dim=int(feature_dim),
                   d=int(d), d_emb=int(d_emb), enc_layers=enc_layers, ctx_layers=ctx_layers,
                   use_text=use_text, use_phonemes=use_phonemes)


PAPER_SCALE = dict(d=512, d_emb=512, enc_layers=12, ctx_layers=3)
