"""Output token vocabulary with reserved special symbols."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence, Union

from .biasing import NO_BIAS_TOKEN
from .errors import DataError, LexiconError

BLANK = "<blank>"
SOS = "<sos>"
EOS = "<eos>"
SPECIALS = (BLANK, SOS, EOS, NO_BIAS_TOKEN)
BLANK_ID, SOS_ID, EOS_ID, NO_BIAS_ID = range(4)


class Vocab:
    """Token ids: 0 blank (CTC only), 1 start, 2 end, 3 ``<no-bias>``, then ordinary tokens."""

    def __init__(self, tokens: Iterable[str]):
        toks = [t for t in tokens if t not in SPECIALS]
        self.tokens: list[str] = list(SPECIALS) + toks
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def index(self, tok: str) -> int:
        try:
            return self._index[tok]
        except KeyError:
            raise LexiconError(f"token {tok!r} not in vocabulary") from None

    def encode(self, toks: Sequence[str]) -> list[int]:
        return [self.index(t) for t in toks]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def ordinary(self) -> list[str]:
        return self.tokens[len(SPECIALS):]


def read_vocab(path: Union[str, Path]) -> Vocab:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return Vocab(ln.strip() for ln in lines if ln.strip())


def write_vocab(vocab: Vocab, path: Union[str, Path]) -> None:
    Path(path).write_text("".join(t + "\n" for t in vocab.tokens), encoding="utf-8")
