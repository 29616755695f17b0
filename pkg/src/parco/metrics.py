"""Token error rate, entity-restricted error rate and relative reductions."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

from .biasing import EntitySpan, check_spans
from .errors import DataError

MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"

AlignOp = tuple[Optional[int], Optional[int], str]


def align(ref: Sequence, hyp: Sequence) -> list[AlignOp]:
    """Minimum-cost alignment with unit costs.

    The backtrace prefers match, then substitution, deletion, insertion
    whenever several moves reach the same cost.
    """
    n, m = len(ref), len(hyp)
    D = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        D[i][0] = i
    for j in range(m + 1):
        D[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i][j] = min(D[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]), D[i - 1][j] + 1, D[i][j - 1] + 1)
    ops: list[AlignOp] = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and D[i][j] == D[i - 1][j - 1]:
            ops.append((i - 1, j - 1, MATCH))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and D[i][j] == D[i - 1][j - 1] + 1:
            ops.append((i - 1, j - 1, SUB))
            i, j = i - 1, j - 1
        elif i > 0 and D[i][j] == D[i - 1][j] + 1:
            ops.append((i - 1, None, DEL))
            i -= 1
        else:
            ops.append((None, j - 1, INS))
            j -= 1
    ops.reverse()
    return ops


@dataclass
class Counts:
    S: int = 0
    D: int = 0
    I: int = 0  # noqa: E741 - conventional name
    N: int = 0

    @property
    def errors(self) -> int:
        return self.S + self.D + self.I

    def rate(self) -> float:
        if self.N == 0:
            raise DataError("error rate undefined: no reference tokens")
        return self.errors / self.N

    def add_op(self, op: str) -> None:
        if op == SUB:
            self.S += 1
        elif op == DEL:
            self.D += 1
        elif op == INS:
            self.I += 1


def _check_sizes(refs, hyps) -> None:
    if len(refs) != len(hyps):
        raise DataError(f"{len(refs)} references but {len(hyps)} hypotheses")


def token_counts(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> Counts:
    _check_sizes(refs, hyps)
    c = Counts()
    for r, h in zip(refs, hyps):
        c.N += len(r)
        for _, _, op in align(r, h):
            c.add_op(op)
    return c


def token_error_rate(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    """Corpus-level (S + D + I) / N."""
    return token_counts(refs, hyps).rate()


def entity_counts(refs: Sequence[Sequence], spans: Sequence[Sequence[EntitySpan]],
                  hyps: Sequence[Sequence]) -> Counts:
    """Errors attributed to reference entity spans.

    Substitutions and deletions count when their reference position lies in
    a span. An insertion counts when the nearest reference positions on
    both sides of it in the alignment fall inside the same span.
    """
    _check_sizes(refs, hyps)
    if len(spans) != len(refs):
        raise DataError(f"{len(spans)} span lists for {len(refs)} references")
    c = Counts()
    for r, sp, h in zip(refs, spans, hyps):
        sp = check_spans(sp, len(r))
        owner = [None] * len(r)
        for k, s in enumerate(sp):
            c.N += s.end - s.start
            for i in range(s.start, s.end):
                owner[i] = k
        ops = align(r, h)
        left: list[Optional[int]] = []
        last = None
        for i, _, _ in ops:
            left.append(last)
            if i is not None:
                last = i
        right: list[Optional[int]] = [None] * len(ops)
        nxt = None
        for k in range(len(ops) - 1, -1, -1):
            right[k] = nxt
            if ops[k][0] is not None:
                nxt = ops[k][0]
        for k, (i, _, op) in enumerate(ops):
            if op == MATCH:
                continue
            if i is not None:
                if owner[i] is not None:
                    c.add_op(op)
            else:
                a, b = left[k], right[k]
                if a is not None and b is not None and owner[a] is not None and owner[a] == owner[b]:
                    c.add_op(op)
    return c


def entity_error_rate(refs, spans, hyps) -> float:
    return entity_counts(refs, spans, hyps).rate()


def relative_reduction(base: float, new: float) -> float:
    """Percentage reduction of ``new`` relative to ``base``."""
    if not base > 0:
        raise DataError(f"relative reduction needs a positive baseline, got {base}")
    return (base - new) / base * 100.0


def format_cell(rate_pct: float, rrr: Optional[float]) -> str:
    return f"{rate_pct:.2f}" if rrr is None else f"{rate_pct:.2f} ({rrr:+.2f})"


@dataclass
class EvalReport:
    er: float                    # percent
    ne_er: float                 # percent
    counts: dict = field(default_factory=dict)
    entity_counts: dict = field(default_factory=dict)
    er_rrr: Optional[float] = None
    ne_er_rrr: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def table(self, name: str = "system") -> str:
        head = f"{'':<12} {'ER (RRR)':>18} {'NE-ER (NE-RRR)':>18}"
        row = f"{name:<12} {format_cell(self.er, self.er_rrr):>18} {format_cell(self.ne_er, self.ne_er_rrr):>18}"
        return head + "\n" + row + "\n"


def evaluate(refs, spans, hyps, baseline: Optional["EvalReport"] = None) -> EvalReport:
    tc = token_counts(refs, hyps)
    ec = entity_counts(refs, spans, hyps)
    rep = EvalReport(er=100.0 * tc.rate(), ne_er=100.0 * ec.rate(), counts=asdict(tc), entity_counts=asdict(ec))
    if baseline is not None:
        rep.er_rrr = relative_reduction(baseline.er, rep.er) if baseline.er > 0 else None
        rep.ne_er_rrr = relative_reduction(baseline.ne_er, rep.ne_er) if baseline.ne_er > 0 else None
    return rep


# --- files ----------------------------------------------------------------

def read_transcripts(path: Union[str, Path]) -> dict[str, list[str]]:
    """``utt_id<TAB>space-joined tokens`` per line; the token field may be empty."""
    out: dict[str, list[str]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        utt, _, toks = line.partition("\t")
        if utt in out:
            raise DataError(f"{path}:{lineno}: duplicate utterance id {utt!r}")
        out[utt] = toks.split()
    return out


def write_transcripts(items: dict[str, Sequence[str]], path: Union[str, Path]) -> None:
    Path(path).write_text("".join(f"{u}\t{' '.join(t)}\n" for u, t in items.items()), encoding="utf-8")


def read_spans(path: Union[str, Path]) -> dict[str, list[EntitySpan]]:
    """JSON lines ``{"id": ..., "spans": [{"start", "end", "bias_id"}, ...]}``."""
    out: dict[str, list[EntitySpan]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out[obj["id"]] = [EntitySpan(int(s["start"]), int(s["end"]), int(s["bias_id"]))
                              for s in obj["spans"]]
        except (ValueError, KeyError, TypeError) as e:
            raise DataError(f"{path}:{lineno}: bad span record ({e})") from None
    return out


def write_spans(items: dict[str, Sequence[EntitySpan]], path: Union[str, Path]) -> None:
    lines = [json.dumps({"id": u, "spans": [s.to_dict() for s in sp]}) + "\n" for u, sp in items.items()]
    Path(path).write_text("".join(lines), encoding="utf-8")


def evaluate_files(ref_path, hyp_path, spans_path, baseline_path=None) -> EvalReport:
    refs, hyps, spans = read_transcripts(ref_path), read_transcripts(hyp_path), read_spans(spans_path)
    missing = [u for u in refs if u not in hyps]
    if missing:
        raise DataError(f"hypothesis file lacks {len(missing)} utterances, e.g. {missing[0]!r}")
    ids = list(refs)
    base = None
    if baseline_path is not None:
        bh = read_transcripts(baseline_path)
        if any(u not in bh for u in ids):
            raise DataError("baseline file does not cover every reference utterance")
        base = evaluate([refs[u] for u in ids], [spans.get(u, []) for u in ids], [bh[u] for u in ids])
    return evaluate([refs[u] for u in ids], [spans.get(u, []) for u in ids], [hyps[u] for u in ids], base)
