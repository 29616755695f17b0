import itertools
import random
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parco.biasing import (NO_BIAS_TOKEN, BiasingList, BiasingWarning, Entity, EntitySpan,
                           assemble_inference_list, build_entity_labels, find_entity_spans,
                           mine_hard_negatives, read_biasing_tsv, write_biasing_tsv)
from parco.errors import DataError
from parco.phonology import PhonemeInventory, edit_distance


def ent(i, surface, phon):
    return Entity(i, tuple(surface.split()), tuple(phon))


def test_first_token_label_layout():
    spans = [EntitySpan(0, 3, 1), EntitySpan(3, 6, 2), EntitySpan(6, 8, 5)]
    assert build_entity_labels(10, spans) == [1, 0, 0, 2, 0, 0, 5, 0, 0, 0]


def test_labels_trivial_cases():
    assert build_entity_labels(4, []) == [0, 0, 0, 0]
    assert build_entity_labels(3, [EntitySpan(0, 3, 7)]) == [7, 0, 0]


def test_labels_reject_overlap_and_no_bias():
    with pytest.raises(DataError, match="overlap"):
        build_entity_labels(6, [EntitySpan(0, 3, 1), EntitySpan(2, 4, 2)])
    with pytest.raises(DataError, match="no-bias"):
        build_entity_labels(6, [EntitySpan(0, 3, 0)])
    with pytest.raises(DataError):
        build_entity_labels(2, [EntitySpan(1, 3, 1)])


@st.composite
def span_layouts(draw):
    n = draw(st.integers(1, 20))
    cuts = sorted(draw(st.sets(st.integers(0, n), max_size=8)))
    spans = []
    for a, b in zip(cuts[::2], cuts[1::2]):
        if a < b:
            spans.append(EntitySpan(a, b, draw(st.integers(1, 9))))
    return n, spans


@settings(max_examples=100, deadline=None)
@given(span_layouts())
def test_labels_only_mark_span_starts(layout):
    n, spans = layout
    beta = build_entity_labels(n, spans)
    assert len(beta) == n
    assert sum(b != 0 for b in beta) == len(spans)
    for s in spans:
        assert beta[s.start] == s.bias_id
        assert all(b == 0 for b in beta[s.start + 1:s.end])


def test_biasing_list_reserves_index_zero():
    bl = BiasingList([ent(3, "a b", [1, 2])])
    assert bl[0].surface == (NO_BIAS_TOKEN,) and bl[0].phonemes == (0,)
    assert bl.position(3) == 1
    with pytest.raises(DataError):
        BiasingList([ent(3, "a", [1]), ent(4, "a", [2])])
    with pytest.raises(DataError):
        Entity(1, (), (1,))


def test_find_spans_cases():
    bl = BiasingList([ent(1, "a b", [1]), ent(2, "a b c", [2]), ent(3, "x", [3])])
    assert find_entity_spans(["a", "b", "c"], bl) == [EntitySpan(0, 3, 2)]
    assert find_entity_spans(["x"], bl) == [EntitySpan(0, 1, 3)]
    assert find_entity_spans(["q", "r"], bl) == []


def _all_matchings(tokens, surfaces):
    """Every set of non-overlapping surface occurrences, as sorted (start, end) tuples."""
    occ = [(i, i + len(s)) for s in surfaces for i in range(len(tokens))
           if tuple(tokens[i:i + len(s)]) == s]
    out = []
    for r in range(len(occ) + 1):
        for combo in itertools.combinations(sorted(set(occ)), r):
            if all(b[0] >= a[1] for a, b in zip(combo, combo[1:])):
                out.append(combo)
    return out


def test_find_spans_longest_wins_vs_enumeration():
    surfaces = [("a", "b"), ("a", "b", "c")]
    bl = BiasingList([Entity(i + 1, s, (1,)) for i, s in enumerate(surfaces)])
    tokens = ["a", "b", "c"]
    got = [(s.start, s.end) for s in find_entity_spans(tokens, bl)]
    matchings = _all_matchings(tokens, surfaces)
    assert ((0, 2),) in matchings and ((0, 3),) in matchings
    assert got == [(0, 3)]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("abc"), max_size=12),
       st.lists(st.lists(st.sampled_from("abc"), min_size=1, max_size=3).map(tuple),
                min_size=1, max_size=4, unique=True))
def test_find_spans_sorted_and_disjoint(tokens, surfaces):
    bl = BiasingList([Entity(i + 1, s, (1,)) for i, s in enumerate(surfaces)])
    spans = find_entity_spans(tokens, bl)
    for a, b in zip(spans, spans[1:]):
        assert a.end <= b.start
    for s in spans:
        assert tuple(tokens[s.start:s.end]) == bl[s.bias_id].surface
    # scanning rule: no span could begin at any skipped position
    covered = {i for s in spans for i in range(s.start, s.end)}
    for i in range(len(tokens)):
        if i not in covered:
            assert not any(tuple(tokens[i:i + len(x)]) == x for x in surfaces)


def test_mine_hard_negatives_distance_order():
    # target l i3 l ing2 -> ids 1..4 as phoneme codes
    target = ent(1, "t", [1, 2, 1, 4])
    pool = [target,
            ent(10, "p", [1, 3, 1, 4]),       # 1
            ent(11, "q", [1, 2, 1, 5]),       # 1
            ent(12, "r", [1, 3, 1, 5]),       # 2
            ent(13, "s", [6, 6, 6, 6, 6])]    # 5
    assert [edit_distance(target.phonemes, e.phonemes) for e in pool[1:]] == [1, 1, 2, 5]
    assert mine_hard_negatives(target, pool, 3).negative_ids == (10, 11, 12)
    assert mine_hard_negatives(target, pool, 1).negative_ids == (10,)


def test_mine_excludes_surface_twins_and_warns():
    target = ent(1, "t", [1, 2])
    with pytest.warns(BiasingWarning):
        assert mine_hard_negatives(target, [target], 2).negative_ids == ()
    twin = ent(2, "t", [1, 2])
    far = ent(3, "u", [5, 5, 5])
    with pytest.warns(BiasingWarning):
        assert mine_hard_negatives(target, [twin, far], 2).negative_ids == (3,)
    with pytest.raises(DataError):
        mine_hard_negatives(target, [far], 4)


def test_mine_matches_brute_force():
    rng = random.Random(3)
    pool = [Entity(i, (f"w{i}",), tuple(rng.randrange(6) for _ in range(rng.randint(1, 5))))
            for i in range(1, 80)]
    for target in pool[:20]:
        brute = sorted((edit_distance(target.phonemes, e.phonemes), e.id)
                       for e in pool if e.id != target.id)[:3]
        got = mine_hard_negatives(target, pool, 3).negative_ids
        assert got == tuple(i for _, i in brute)


def _pool(n, seed=0):
    rng = random.Random(seed)
    return [Entity(100 + i, (f"d{i}",), tuple(rng.randrange(8) for _ in range(4))) for i in range(n)]


def test_inference_list_cases():
    g = ent(1, "g", [1, 2, 3, 4])
    pool = _pool(30)
    assert assemble_inference_list([g], pool, 0, seed=0).ids() == [0, 1]
    near = ent(50, "near", [1, 2, 3, 5])
    far_pool = [Entity(200 + i, (f"f{i}",), (7, 7, 7, 7, 7, 7)) for i in range(5)]
    assert assemble_inference_list([g], far_pool + [near], 1, seed=0).ids() == [0, 1, 50]


def test_inference_list_seeded_random_fill():
    pool = _pool(40)
    a = assemble_inference_list([], pool, 5, seed=7)
    b = assemble_inference_list([], pool, 5, seed=7)
    assert len(a) == 6 and a.ids() == b.ids()
    assert a.ids() != assemble_inference_list([], pool, 5, seed=8).ids()


def test_inference_list_contains_gt_and_warns_when_short():
    gts = [ent(1, "g", [1, 2, 3, 4]), ent(2, "h", [4, 3, 2, 1])]
    pool = _pool(60)
    bl = assemble_inference_list(gts, pool, 20, seed=1)
    assert bl[0].surface == (NO_BIAS_TOKEN,)
    assert {1, 2} <= set(bl.ids()) and len(bl) == 23
    assert bl.ids()[1:] == sorted(bl.ids()[1:])
    with pytest.warns(BiasingWarning):
        short = assemble_inference_list(gts, pool[:3], 10, seed=1)
    assert len(short) == 6


def test_inference_list_nearest_first():
    g = ent(1, "g", [1, 2, 3, 4])
    pool = _pool(200, seed=4)
    bl = assemble_inference_list([g], pool, 5, seed=0)
    chosen = [e for e in bl.entities if e.id != 1]
    best = sorted((edit_distance(g.phonemes, e.phonemes), e.id) for e in pool)[:5]
    assert sorted(e.id for e in chosen) == sorted(i for _, i in best)


def test_biasing_tsv_round_trip(tmp_path):
    inv = PhonemeInventory(["l", "i3", "ing2"])
    ents = [Entity(1, ("li", "ling"), inv.encode(["l", "i3", "l", "ing2"])), Entity(4, ("li",), (1, 2))]
    path = tmp_path / "bias.tsv"
    write_biasing_tsv(ents, inv, path)
    assert path.read_text(encoding="utf-8").splitlines()[0] == "1\tli ling\tl i3 l ing2"
    assert read_biasing_tsv(path, inv) == ents
    path.write_text("0\t<no-bias>\t<nb>\n", encoding="utf-8")
    with pytest.raises(DataError, match="reserved"):
        read_biasing_tsv(path, inv)


def test_no_warning_when_pool_sufficient():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assemble_inference_list([], _pool(10), 5, seed=0)
