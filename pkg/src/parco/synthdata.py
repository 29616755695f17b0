"""Deterministic synthetic corpora dense in homophones.

Tokens are syllables (one initial phoneme plus one final phoneme). Phonemes
come in confusable pairs whose acoustic prototypes lie close together.
Entities are built in families: a base entity plus members that swap a
phoneme of the first syllable for its partner. Every entity token is a rare homophone of a common
filler token, so without a biasing list the acoustics point at the common
spelling. Features are the phoneme prototype repeated for a few frames plus
Gaussian noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .biasing import Entity, EntitySpan, check_spans, read_biasing_tsv, write_biasing_tsv
from .errors import DataError
from .phonology import Lexicon, PhonemeInventory, read_inventory, read_lexicon, write_inventory, write_lexicon

INITIALS = ["b", "p", "m", "f", "d", "t", "n", "l", "g", "k",
            "h", "j", "q", "x", "zh", "ch", "sh", "r", "z", "c"]
FINALS = ["a", "o", "e", "i", "u", "v", "ai", "ei", "ao", "ou",
          "an", "ang", "en", "eng", "in", "ing", "ong", "un", "ia", "ie"]


@dataclass(frozen=True)
class SynthConfig:
    n_phonemes: int = 40
    n_tokens: int = 200
    n_entities: int = 60
    family_size: int = 3
    entity_syllables: tuple[int, int] = (2, 3)
    utt_tokens: tuple[int, int] = (5, 12)
    entities_per_utt: tuple[int, int] = (1, 2)
    frames_per_phoneme: tuple[int, int] = (2, 4)
    feature_dim: int = 20
    noise: float = 0.3
    partner_offset: float = 0.8
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    ood: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("n_phonemes", "n_tokens", "n_entities", "feature_dim", "n_train", "n_dev", "n_test"):
            if getattr(self, name) < 1:
                raise DataError(f"synth config: {name} must be positive")
        if self.n_phonemes % 4:
            raise DataError("synth config: n_phonemes must be a multiple of 4 (paired initials and finals)")
        if self.family_size < 2:
            raise DataError("synth config: family_size must be >= 2")
        if self.n_entities % self.family_size:
            raise DataError("synth config: n_entities must be a multiple of family_size")
        for name in ("entity_syllables", "utt_tokens", "entities_per_utt", "frames_per_phoneme"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise DataError(f"synth config: {name} must satisfy 1 <= low <= high")
        if self.family_size > 4:
            raise DataError("synth config: family_size must be <= 4 (first-syllable perturbations)")
        if self.n_entities // self.family_size > (self.n_phonemes // 4) ** 2:
            raise DataError("synth config: too many families for the phoneme inventory")
        if self.noise < 0 or self.partner_offset < 0:
            raise DataError("synth config: noise scales must be non-negative")
        if self.ood and self.n_entities // self.family_size < 3:
            raise DataError("synth config: the out-of-domain split needs at least 3 families")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise DataError(f"synth config: unknown keys {sorted(extra)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Utterance:
    id: str
    frames: np.ndarray
    tokens: list[str]
    spans: list[EntitySpan] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "frames": self.frames.tolist(), "tokens": self.tokens,
                           "spans": [s.to_dict() for s in self.spans]})

    @classmethod
    def from_json(cls, line: str) -> "Utterance":
        try:
            obj = json.loads(line)
            frames = np.asarray(obj["frames"], dtype=np.float64)
            spans = [EntitySpan(int(s["start"]), int(s["end"]), int(s["bias_id"])) for s in obj["spans"]]
            utt = cls(str(obj["id"]), frames, list(obj["tokens"]), spans)
        except (ValueError, KeyError, TypeError) as e:
            raise DataError(f"bad utterance record: {e}") from None
        if frames.ndim != 2 or len(frames) == 0:
            raise DataError(f"utterance {utt.id}: frames must be a non-empty 2-D array")
        check_spans(spans, len(utt.tokens))
        return utt

    def phonemes(self, lex: Lexicon) -> list[tuple[int, ...]]:
        return [lex[t] for t in self.tokens]


@dataclass
class SynthCorpus:
    config: SynthConfig
    inventory: PhonemeInventory
    lexicon: Lexicon
    entities: list[Entity]
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]
    split_entities: dict[str, list[int]] = field(default_factory=dict)

    def entity(self, eid: int) -> Entity:
        return self._by_id[eid]

    def __post_init__(self):
        self._by_id = {e.id: e for e in self.entities}

    def save(self, out: Union[str, Path]) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for name in ("train", "dev", "test"):
            with open(out / f"{name}.jsonl", "w", encoding="utf-8") as f:
                for u in getattr(self, name):
                    f.write(u.to_json() + "\n")
        write_inventory(self.inventory, out / "phonemes.txt")
        write_lexicon(self.lexicon, out / "lexicon.txt")
        write_biasing_tsv(self.entities, self.inventory, out / "entities.tsv")
        meta = {"synth": self.config.to_dict(), "split_entities": self.split_entities}
        (out / "synth_config.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_utterances(path: Union[str, Path]) -> list[Utterance]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                out.append(Utterance.from_json(line))
            except DataError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
    return out


def load_corpus(data_dir: Union[str, Path]) -> SynthCorpus:
    d = Path(data_dir)
    if not d.is_dir():
        raise DataError(f"data directory {d} does not exist")
    inv = read_inventory(d / "phonemes.txt")
    lex = read_lexicon(d / "lexicon.txt", inv)
    ents = read_biasing_tsv(d / "entities.tsv", inv)
    meta_path = d / "synth_config.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    cfg = SynthConfig.from_dict(meta.get("synth", {}))
    splits = {name: read_utterances(d / f"{name}.jsonl") if (d / f"{name}.jsonl").exists() else []
              for name in ("train", "dev", "test")}
    corpus = SynthCorpus(cfg, inv, lex, ents, splits["train"], splits["dev"], splits["test"],
                         meta.get("split_entities", {}))
    for name, utts in splits.items():
        for u in utts:
            for t in u.tokens:
                lex[t]  # unknown tokens raise here, naming the token
            for s in u.spans:
                if s.bias_id not in corpus._by_id:
                    raise DataError(f"{name} utterance {u.id}: span refers to unknown entity {s.bias_id}")
    return corpus


# --- generation -----------------------------------------------------------

def _phoneme_names(n_half: int, pool: Sequence[str], tag: str) -> list[str]:
    return list(pool[:n_half]) if n_half <= len(pool) else [f"{tag}{k}" for k in range(n_half)]


def _partner(p: int) -> int:
    """Phonemes 1..P are paired (1,2), (3,4), ...; index 0 is reserved."""
    return p + 1 if p % 2 == 1 else p - 1


class _Builder:
    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        half = cfg.n_phonemes // 2
        self.initial_names = _phoneme_names(half, INITIALS, "I")
        self.final_names = _phoneme_names(half, FINALS, "F")
        self.inventory = PhonemeInventory(self.initial_names + self.final_names)
        self.initials = [self.inventory.index(s) for s in self.initial_names]
        self.finals = [self.inventory.index(s) for s in self.final_names]
        F = cfg.feature_dim
        protos = np.zeros((len(self.inventory), F))
        for p in range(1, len(self.inventory), 2):
            protos[p] = self.rng.standard_normal(F)
            protos[p + 1] = protos[p] + cfg.partner_offset * self.rng.standard_normal(F)
        self.protos = protos

    def syllable_name(self, syl: tuple[int, int]) -> str:
        return "".join(self.inventory.decode(syl))

    def random_syllable(self) -> tuple[int, int]:
        return (int(self.rng.choice(self.initials)), int(self.rng.choice(self.finals)))

    def families(self) -> list[list[list[tuple[int, int]]]]:
        """Families of entities, each entity a list of syllables.

        Members differ from the base in the first syllable only (its
        initial, its final, or both swapped for their partners), so the
        sound that tells them apart is heard at the entity's first token.
        Each family owns its block of first syllables outright.
        """
        cfg = self.cfg
        taken: set[tuple[int, int]] = set()
        fams = []
        while len(fams) < cfg.n_entities // cfg.family_size:
            L = int(self.rng.integers(cfg.entity_syllables[0], cfg.entity_syllables[1] + 1))
            base = [self.random_syllable() for _ in range(L)]
            block = ((base[0][0] + 1) // 2, (base[0][1] + 1) // 2)
            if block in taken:
                continue
            taken.add(block)
            first, other = [(0,), (1,)] if self.rng.random() < 0.5 else [(1,), (0,)]
            members = [base]
            for swap in [first, other, (0, 1)][:cfg.family_size - 1]:
                head = list(base[0])
                for which in swap:
                    head[which] = _partner(head[which])
                members.append([tuple(head)] + base[1:])
            fams.append(members)
        return fams

    def build(self) -> SynthCorpus:
        cfg = self.cfg
        fams = self.families()
        # one rare token per (family, position, syllable); members share unchanged syllables
        entity_tokens: dict[tuple, str] = {}
        per_syllable: dict[tuple[int, int], int] = {}
        entities: list[Entity] = []
        family_of: dict[int, int] = {}
        eid = 0
        for f, members in enumerate(fams):
            for m in members:
                surface = []
                for pos, syl in enumerate(m):
                    key = (f, pos, syl)
                    if key not in entity_tokens:
                        per_syllable[syl] = per_syllable.get(syl, 0) + 1
                        entity_tokens[key] = f"{self.syllable_name(syl).capitalize()}{per_syllable[syl]}"
                    surface.append(entity_tokens[key])
                eid += 1
                entities.append(Entity(eid, tuple(surface), tuple(p for s in m for p in s)))
                family_of[eid] = f
        n_common = cfg.n_tokens - len(entity_tokens)
        if n_common < len(per_syllable):
            raise DataError(f"synth config: n_tokens={cfg.n_tokens} leaves {n_common} common tokens, "
                            f"but entities use {len(per_syllable)} distinct syllables")
        all_syl = [(i, f) for i in self.initials for f in self.finals]
        if n_common > len(all_syl):
            raise DataError(f"synth config: at most {len(all_syl)} common syllables available")
        common = sorted(per_syllable)
        others = [s for s in all_syl if s not in per_syllable]
        extra = self.rng.permutation(len(others))[:n_common - len(common)]
        common += [others[i] for i in sorted(extra)]
        lex = Lexicon(self.inventory)
        common_tokens = []
        for syl in common:
            name = self.syllable_name(syl)
            lex.entries[name] = syl
            common_tokens.append(name)
        for (f, pos, syl), name in entity_tokens.items():
            lex.entries[name] = syl
        if len(lex) != cfg.n_tokens:
            raise DataError("synth config: syllable spellings collide; choose different phoneme counts")

        fam_ids = list(range(len(fams)))
        if cfg.ood:
            order = [int(x) for x in self.rng.permutation(fam_ids)]
            n_eval = max(1, len(order) // 5)
            split_fams = {"test": order[:n_eval], "dev": order[n_eval:2 * n_eval], "train": order[2 * n_eval:]}
        else:
            split_fams = {k: fam_ids for k in ("train", "dev", "test")}
        split_entities = {k: [e.id for e in entities if family_of[e.id] in set(v)] for k, v in split_fams.items()}
        by_id = {e.id: e for e in entities}
        splits = {}
        for name, n in (("train", cfg.n_train), ("dev", cfg.n_dev), ("test", cfg.n_test)):
            pool = [by_id[i] for i in split_entities[name]]
            splits[name] = [self.utterance(f"{name}-{k:05d}", pool, common_tokens, lex) for k in range(n)]
        return SynthCorpus(cfg, self.inventory, lex, entities, splits["train"], splits["dev"], splits["test"],
                           split_entities)

    def utterance(self, uid: str, pool: list[Entity], common: list[str], lex: Lexicon) -> Utterance:
        cfg = self.cfg
        rng = self.rng
        n_ent = int(rng.integers(cfg.entities_per_utt[0], cfg.entities_per_utt[1] + 1))
        picks = [pool[int(i)] for i in rng.choice(len(pool), size=min(n_ent, len(pool)), replace=False)]
        length = int(rng.integers(cfg.utt_tokens[0], cfg.utt_tokens[1] + 1))
        n_fill = max(0, length - sum(len(e.surface) for e in picks))
        segments: list[tuple[Optional[Entity], list[str]]] = [(e, list(e.surface)) for e in picks]
        segments += [(None, [common[int(rng.integers(len(common)))]]) for _ in range(n_fill)]
        order = rng.permutation(len(segments))
        tokens: list[str] = []
        spans: list[EntitySpan] = []
        for i in order:
            e, toks = segments[int(i)]
            if e is not None:
                spans.append(EntitySpan(len(tokens), len(tokens) + len(toks), e.id))
            tokens.extend(toks)
        frames = []
        for t in tokens:
            for p in lex[t]:
                k = int(rng.integers(cfg.frames_per_phoneme[0], cfg.frames_per_phoneme[1] + 1))
                frames.append(self.protos[p] + cfg.noise * rng.standard_normal((k, cfg.feature_dim)))
        feats = np.round(np.concatenate(frames, axis=0), 5)
        return Utterance(uid, feats, tokens, spans)


def generate(cfg: SynthConfig) -> SynthCorpus:
    return _Builder(cfg).build()
