import json
from dataclasses import replace

import numpy as np
import pytest

from parco.biasing import check_spans
from parco.errors import DataError
from parco.phonology import edit_distance
from parco.synthdata import SynthConfig, generate, load_corpus, read_utterances

SMALL = SynthConfig(n_train=40, n_dev=10, n_test=10, seed=3)


@pytest.fixture(scope="module")
def corpus():
    return generate(SMALL)


def _bytes(tmp_path, cfg, name):
    out = tmp_path / name
    generate(cfg).save(out)
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_same_seed_gives_identical_files(tmp_path):
    a = _bytes(tmp_path, SMALL, "a")
    b = _bytes(tmp_path, SMALL, "b")
    assert a == b
    c = _bytes(tmp_path, replace(SMALL, seed=4), "c")
    assert c["train.jsonl"] != a["train.jsonl"]


def test_default_sizes(corpus):
    cfg = SynthConfig()
    assert (cfg.n_phonemes, cfg.n_tokens, cfg.n_entities, cfg.family_size) == (40, 200, 60, 3)
    assert (cfg.n_train, cfg.n_dev, cfg.n_test) == (2000, 200, 200)
    assert len(corpus.inventory) == 41        # plus the reserved <nb> symbol
    assert len(corpus.lexicon) == 200
    assert len(corpus.entities) == 60


def test_every_entity_has_two_close_pool_members(corpus):
    for e in corpus.entities:
        close = [o for o in corpus.entities if o.id != e.id and edit_distance(e.phonemes, o.phonemes) <= 2]
        assert len(close) >= 2, e


def test_families_are_single_phoneme_perturbations(corpus):
    fam = SMALL.family_size
    for start in range(0, len(corpus.entities), fam):
        members = corpus.entities[start:start + fam]
        for a in members:
            for b in members:
                if a.id != b.id:
                    assert 1 <= edit_distance(a.phonemes, b.phonemes) <= 2
                    assert len(a.phonemes) == len(b.phonemes)


def test_family_members_differ_only_in_the_first_syllable(corpus):
    lex = corpus.lexicon
    fam = SMALL.family_size
    for start in range(0, len(corpus.entities), fam):
        members = corpus.entities[start:start + fam]
        heads = {lex[m.surface[0]] for m in members}
        assert len(heads) == fam
        assert len({m.surface[1:] for m in members}) == 1


def test_entity_tokens_are_homophones_of_common_tokens(corpus):
    lex = corpus.lexicon
    entity_tokens = {t for e in corpus.entities for t in e.surface}
    common = {lex[t] for t in lex.tokens() if t not in entity_tokens}
    assert all(lex[t] in common for t in entity_tokens)
    for e in corpus.entities:
        assert tuple(p for t in e.surface for p in lex[t]) == e.phonemes


def test_spans_valid_and_in_inventory(corpus):
    ids = {e.id for e in corpus.entities}
    for u in corpus.train + corpus.dev + corpus.test:
        check_spans(u.spans, len(u.tokens))
        assert 1 <= len(u.spans) <= 2
        for s in u.spans:
            assert s.bias_id in ids
            assert tuple(u.tokens[s.start:s.end]) == corpus.entity(s.bias_id).surface


def test_frame_count_matches_phonemes():
    cfg = replace(SMALL, noise=0.0, frames_per_phoneme=(3, 3))
    c = generate(cfg)
    for u in c.train:
        n_ph = sum(len(p) for p in u.phonemes(c.lexicon))
        assert len(u.frames) == 3 * n_ph


def test_zero_noise_frames_of_a_phoneme_are_identical():
    cfg = replace(SMALL, noise=0.0, frames_per_phoneme=(2, 2))
    c = generate(cfg)
    seen = {}
    for u in c.train:
        ph = [p for seq in u.phonemes(c.lexicon) for p in seq]
        for k, p in enumerate(ph):
            for f in (u.frames[2 * k], u.frames[2 * k + 1]):
                if p in seen:
                    assert np.array_equal(seen[p], f)
                seen[p] = f


def test_ood_splits_are_disjoint():
    c = generate(replace(SMALL, ood=True))
    tr, te = set(c.split_entities["train"]), set(c.split_entities["test"])
    assert tr and te and not tr & te
    assert all(s.bias_id in te for u in c.test for s in u.spans)
    assert all(s.bias_id in tr for u in c.train for s in u.spans)


def test_round_trip(tmp_path, corpus):
    corpus.save(tmp_path)
    back = load_corpus(tmp_path)
    assert back.config == SMALL
    assert [e for e in back.entities] == corpus.entities
    for a, b in zip(corpus.test, back.test):
        assert a.tokens == b.tokens and a.spans == b.spans and np.array_equal(a.frames, b.frames)


def test_corrupt_record_names_the_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps({"id": "x", "frames": [[0.0]], "tokens": ["a"],
                             "spans": [{"start": 0, "end": 2, "bias_id": 1}]}) + "\n")
    with pytest.raises(DataError, match="bad.jsonl:1"):
        read_utterances(p)


@pytest.mark.parametrize("bad", [dict(family_size=1), dict(family_size=5, n_entities=60), dict(n_entities=61), dict(n_phonemes=42),
                                 dict(n_tokens=20), dict(utt_tokens=(6, 5)), dict(noise=-1.0)])
def test_inconsistent_config_rejected(bad):
    with pytest.raises(DataError):
        generate(replace(SMALL, **bad))
