import random
from functools import lru_cache

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parco.biasing import EntitySpan
from parco.errors import DataError
from parco.metrics import (DEL, INS, MATCH, SUB, align, entity_error_rate, evaluate_files,
                           relative_reduction, token_error_rate, write_spans, write_transcripts)
from parco.phonology import edit_distance


def exhaustive_cost(a, b):
    """Plain exponential recursion over the three moves."""
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(go(i + 1, j + 1) + (a[i] != b[j]), go(i + 1, j) + 1, go(i, j + 1) + 1)

    return go(0, 0)


def cost(ops):
    return sum(op != MATCH for _, _, op in ops)


def test_align_cases():
    assert [op for *_, op in align("abc", "abc")] == [MATCH] * 3
    assert align("abc", "ac") == [(0, 0, MATCH), (1, None, DEL), (2, 1, MATCH)]
    assert align("", "xy") == [(None, 0, INS), (None, 1, INS)]


def test_align_prefers_substitution_over_indel():
    assert [op for *_, op in align("ab", "ax")] == [MATCH, SUB]


seqs = st.lists(st.sampled_from("abc"), max_size=6)


@settings(max_examples=200, deadline=None)
@given(seqs, seqs)
def test_align_cost_and_reconstruction(a, b):
    ops = align(a, b)
    assert cost(ops) == exhaustive_cost(tuple(a), tuple(b)) == edit_distance(a, b)
    assert [a[i] for i, _, _ in ops if i is not None] == a
    assert [b[j] for _, j, _ in ops if j is not None] == b


def test_token_error_rate_cases():
    refs = [list("abcdefghij"), list("klmnopqrst")]
    assert token_error_rate(refs, refs) == 0.0
    assert token_error_rate(refs, [[], []]) == 1.0
    # c->X and p->Y substituted, U inserted
    hyps = [list("abXdefghij"), list("klmnoYqrstU")]
    assert token_error_rate(refs, hyps) == pytest.approx(3 / 20)
    with pytest.raises(DataError):
        token_error_rate(refs, hyps[:1])


def test_entity_error_rate_cases():
    ref = list("abcdefg")
    spans = [[EntitySpan(2, 5, 1)]]
    assert entity_error_rate([ref], spans, [list("xbcdefy")]) == 0.0
    assert entity_error_rate([ref], spans, [list("abcXefg")]) == pytest.approx(1 / 3)
    ref2 = list("abcd")
    assert entity_error_rate([ref2], [[EntitySpan(1, 3, 4)]], [list("ad")]) == 1.0
    # insertion between two entity tokens counts, insertion at the border does not
    assert entity_error_rate([ref], spans, [list("abcdZefg")]) == pytest.approx(1 / 3)
    assert entity_error_rate([ref], spans, [list("abZcdefg")]) == 0.0
    with pytest.raises(DataError):
        entity_error_rate([ref], [[EntitySpan(0, 3, 1), EntitySpan(2, 4, 2)]], [ref])


def test_entity_rate_ignores_errors_outside_spans():
    rng = random.Random(0)
    ref = list("abcdefghij")
    spans = [[EntitySpan(3, 6, 1)]]
    hyp = list(ref)
    base = entity_error_rate([ref], spans, [hyp])
    for _ in range(20):
        h = list(ref)
        h[rng.choice([0, 1, 8, 9])] = "Q"
        assert entity_error_rate([ref], spans, [h]) == base


def test_relative_reduction():
    assert round(relative_reduction(9.60, 3.56), 2) == 62.92
    assert round(relative_reduction(26.64, 17.15), 2) == 35.62
    assert relative_reduction(5.0, 5.0) == 0.0
    assert relative_reduction(7.3, 0.0) == 100.0
    with pytest.raises(DataError):
        relative_reduction(0.0, 1.0)


def test_evaluate_files_identity(tmp_path):
    refs = {"u1": ["a", "b", "c"], "u2": ["d", "e"]}
    write_transcripts(refs, tmp_path / "ref.txt")
    write_spans({"u1": [EntitySpan(1, 3, 2)], "u2": []}, tmp_path / "spans.jsonl")
    rep = evaluate_files(tmp_path / "ref.txt", tmp_path / "ref.txt", tmp_path / "spans.jsonl")
    assert rep.er == 0.0 and rep.ne_er == 0.0
    assert "0.00" in rep.table()
    write_transcripts({"u1": ["a", "x", "c"], "u2": ["d", "e"]}, tmp_path / "base.txt")
    rep = evaluate_files(tmp_path / "ref.txt", tmp_path / "ref.txt", tmp_path / "spans.jsonl",
                         tmp_path / "base.txt")
    assert rep.ne_er_rrr == 100.0 and "(+100.00)" in rep.table()
