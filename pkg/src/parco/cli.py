"""Command-line entry points.

Every subcommand writes machine-readable JSON (or transcript files) to
stdout or the named output files, and human-oriented logs to stderr.
Exit status: 0 success, 1 usage error, 2 data or contract error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

from .biasing import BiasingList, BiasingWarning, mine_hard_negatives, read_biasing_tsv
from .config import ModelConfig
from .errors import ParcoError
from .hef import EntityBank, HEFConfig, attention_grid
from .metrics import evaluate_files, write_transcripts
from .phonology import read_inventory
from .synthdata import SynthConfig, load_corpus
from .training import TrainConfig, load_model, save_model, stderr_logging, train, vocab_for

log = logging.getLogger("parco")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
SPLITS = ("train", "dev", "test")


class UsageError(Exception):
    pass


# --- run configuration ------------------------------------------------------

MODEL_KEYS = ("d", "d_emb", "enc_layers", "ctx_layers", "use_text", "use_phonemes")


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    hef: HEFConfig = field(default_factory=HEFConfig)
    model: dict = field(default_factory=dict)
    n_distractors: int = 50
    paths: dict = field(default_factory=dict)

    def model_config(self, vocab_size: int, n_phonemes: int, feature_dim: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, n_phonemes=n_phonemes, feature_dim=feature_dim, **self.model)


def _section(cls, d, name):
    if not isinstance(d, dict):
        raise ParcoError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ParcoError(f"config section {name!r}: unknown keys {sorted(extra)}")
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**d)


def load_run_config(path: Optional[str]) -> RunConfig:
    """Strict loader: unknown keys are errors; paths are resolved against the file's directory."""
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ParcoError(f"config file {p} does not exist") from None
    except json.JSONDecodeError as e:
        raise ParcoError(f"config file {p} is not valid JSON: {e}") from None
    allowed = {"synth", "train", "hef", "model", "n_distractors", "paths"}
    extra = set(doc) - allowed
    if extra:
        raise ParcoError(f"config: unknown keys {sorted(extra)}")
    model = doc.get("model", {})
    bad = set(model) - set(MODEL_KEYS)
    if bad:
        raise ParcoError(f"config section 'model': unknown keys {sorted(bad)}")
    paths = {k: str((p.parent / v).resolve()) for k, v in doc.get("paths", {}).items()}
    bad = set(paths) - {"data", "ckpt", "out"}
    if bad:
        raise ParcoError(f"config section 'paths': unknown keys {sorted(bad)}")
    return RunConfig(synth=_section(SynthConfig, doc.get("synth", {}), "synth"),
                     train=_section(TrainConfig, doc.get("train", {}), "train"),
                     hef=_section(HEFConfig, doc.get("hef", {}), "hef"),
                     model=dict(model), n_distractors=int(doc.get("n_distractors", 50)), paths=paths)


def _path(arg: Optional[str], cfg: RunConfig, key: str, flag: str) -> Path:
    value = arg if arg is not None else cfg.paths.get(key)
    if value is None:
        raise UsageError(f"{flag} is required (or set paths.{key} in the config)")
    return Path(value)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


# --- subcommands -------------------------------------------------------------

def cmd_gen_data(a, cfg: RunConfig) -> int:
    synth = cfg.synth if a.seed is None else replace(cfg.synth, seed=a.seed)
    out = _path(a.out, cfg, "data", "--out")
    from .synthdata import generate
    corpus = generate(synth)
    corpus.save(out)
    for split in SPLITS:
        write_transcripts({u.id: u.tokens for u in getattr(corpus, split)}, out / f"{split}.ref")
    log.info("wrote corpus to %s", out)
    _emit({"out": str(out), "entities": len(corpus.entities), "tokens": len(corpus.lexicon),
           **{split: len(getattr(corpus, split)) for split in SPLITS}})
    return EXIT_OK


def cmd_train(a, cfg: RunConfig) -> int:
    over = {k: v for k, v in (("epochs", a.epochs), ("lr", a.lr), ("seed", a.seed),
                              ("batch_size", a.batch_size)) if v is not None}
    tcfg = replace(cfg.train, **over)
    corpus = load_corpus(_path(a.data, cfg, "data", "--data"))
    out = _path(a.out, cfg, "ckpt", "--out")
    vocab = vocab_for(corpus)
    mcfg = cfg.model_config(len(vocab), len(corpus.inventory), corpus.train[0].frames.shape[1])
    log_path = Path(a.log) if a.log else out.with_name(out.name + ".log.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", encoding="utf-8") as stream:
        res = train(corpus, mcfg, tcfg, log_stream=stream, ckpt_path=out,
                    on_epoch=lambda rec: log.info("epoch %d dev_total %.4f", rec["epoch"], rec.get("dev_total", 0)))
    _emit({"ckpt": str(out), "log": str(log_path), "best_epoch": res.best_epoch, "best_dev_total": res.best_dev})
    return EXIT_OK


def cmd_decode(a, cfg: RunConfig) -> int:
    from .experiments import decode_all, inference_lists
    hef = replace(cfg.hef, **{k: v for k, v in (("k", a.k), ("sigma", a.sigma), ("mode", a.mode)) if v is not None})
    if a.no_hef:
        hef = replace(hef, enabled=False)
    model = load_model(_path(a.ckpt, cfg, "ckpt", "--ckpt"))
    corpus = load_corpus(_path(a.data, cfg, "data", "--data"))
    utts = getattr(corpus, a.split)
    bank = EntityBank(model, corpus.entities)
    if a.bias is None:
        lists = None
    else:
        pool = read_biasing_tsv(a.bias, corpus.inventory)
        if a.distractors is None:
            lists = [BiasingList(pool)] * len(utts)
        else:
            lists = inference_lists(corpus, utts, a.distractors, seed=a.list_seed, pool=pool)
    results = decode_all(model, utts, lists, hef, bank)
    hyps = {u.id: r.tokens for u, r in zip(utts, results)}
    if a.hyp:
        write_transcripts(hyps, a.hyp)
    else:
        sys.stdout.write("".join(f"{u}\t{' '.join(t)}\n" for u, t in hyps.items()))
    if a.trace:
        with open(a.trace, "w", encoding="utf-8") as f:
            for u, r in zip(utts, results):
                for t in r.trace:
                    f.write(t.to_json(u.id) + "\n")
    if a.grid:
        blist = lists[0] if lists else BiasingList()
        Path(a.grid).write_text(attention_grid(results[0].trace, blist), encoding="utf-8")
    log.info("decoded %d utterances (%d truncated)", len(utts), sum(r.truncated for r in results))
    return EXIT_OK


def cmd_eval(a, cfg: RunConfig) -> int:
    rep = evaluate_files(a.ref, a.hyp, a.spans, a.baseline)
    sys.stderr.write(rep.table(Path(a.hyp).stem))
    _emit(json.loads(rep.to_json()))
    return EXIT_OK


def cmd_mine(a, cfg: RunConfig) -> int:
    if not 1 <= a.min <= a.max <= 3:
        raise UsageError("--min and --max must satisfy 1 <= min <= max <= 3")
    phon = Path(a.phonemes) if a.phonemes else Path(a.bias).with_name("phonemes.txt")
    ents = read_biasing_tsv(a.bias, read_inventory(phon))
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BiasingWarning)
        for e in ents:
            hn = mine_hard_negatives(e, ents, a.max)
            if len(hn.negative_ids) < a.min:
                raise ParcoError(f"entity {e.id} has only {len(hn.negative_ids)} negatives (need {a.min})")
            rows.append(f"{e.id}\t{' '.join(e.surface)}\t{','.join(map(str, hn.negative_ids))}\n")
    Path(a.out).write_text("".join(rows), encoding="utf-8")
    _emit({"out": a.out, "entities": len(rows)})
    return EXIT_OK


def cmd_gradcheck(a, cfg: RunConfig) -> int:
    from .diagnostics import run_all
    reports = run_all(full=a.full)
    for r in reports:
        _emit(r.to_dict())
    ok = all(r.ok for r in reports)
    log.info("gradient check %s", "passed" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_DATA


def cmd_ablate(a, cfg: RunConfig) -> int:
    from .experiments import decode_all, inference_lists, preset, score
    pre = preset(a.preset)
    tcfg = replace(cfg.train, **pre.train)
    if a.seed is not None:
        tcfg = replace(tcfg, seed=a.seed)
    hef = replace(cfg.hef, **pre.hef)
    corpus = load_corpus(_path(a.data, cfg, "data", "--data"))
    out = _path(a.out, cfg, "out", "--out")
    out.mkdir(parents=True, exist_ok=True)
    vocab = vocab_for(corpus)
    mcfg = replace(cfg.model_config(len(vocab), len(corpus.inventory), corpus.train[0].frames.shape[1]),
                   **pre.model)
    with open(out / f"{pre.name}.log.jsonl", "w", encoding="utf-8") as stream:
        model = train(corpus, mcfg, tcfg, log_stream=stream).model
    save_model(model, out / f"{pre.name}.ckpt")
    utts = corpus.test
    lists = inference_lists(corpus, utts, cfg.n_distractors, seed=tcfg.seed)
    bank = EntityBank(model, corpus.entities)
    base = score(utts, decode_all(model, utts, None, hef, bank))
    res = decode_all(model, utts, lists, hef, bank)
    rep = score(utts, res, base)
    write_transcripts({u.id: r.tokens for u, r in zip(utts, res)}, out / f"{pre.name}.hyp")
    sys.stderr.write(rep.table(pre.name))
    _emit({"preset": pre.name, "train": asdict(tcfg), "model": asdict(mcfg), "hef": asdict(hef),
           "er": rep.er, "ne_er": rep.ne_er, "er_nobias": base.er, "ne_er_nobias": base.ne_er,
           "ne_rrr": rep.ne_er_rrr})
    return EXIT_OK


# --- parser --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="parco", description="Contextual biasing with entity filtering on synthetic speech.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and keep the best-dev checkpoint")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--log", help="per-step and per-epoch JSON lines (default: CKPT.log.jsonl)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="greedy decode with a biasing list")
    d.add_argument("--config")
    d.add_argument("--ckpt")
    d.add_argument("--data")
    d.add_argument("--bias", help="biasing list TSV; omit for <no-bias> only")
    d.add_argument("--k", type=int)
    d.add_argument("--sigma", type=float)
    d.add_argument("--mode", choices=["soft", "copy"])
    d.add_argument("--no-hef", action="store_true", help="attend over the full list without filtering or gating")
    d.add_argument("--trace", help="per-step decision trace (JSON lines)")
    d.add_argument("--hyp", help="hypothesis transcripts (default: stdout)")
    d.add_argument("--split", choices=SPLITS, default="test")
    d.add_argument("--distractors", type=int,
                   help="per-utterance lists: ground truth plus this many entries of --bias")
    d.add_argument("--list-seed", type=int, default=0)
    d.add_argument("--grid", help="attention grid of the first utterance (text)")
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", help="error rate and entity error rate")
    e.add_argument("--ref", required=True)
    e.add_argument("--hyp", required=True)
    e.add_argument("--spans", required=True)
    e.add_argument("--baseline")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("mine", help="phonetic hard negatives for each entity of a list")
    m.add_argument("--bias", required=True)
    m.add_argument("--min", type=int, default=1)
    m.add_argument("--max", type=int, default=3)
    m.add_argument("--out", required=True)
    m.add_argument("--phonemes", help="phoneme inventory (default: phonemes.txt beside --bias)")
    m.set_defaults(func=cmd_mine)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--full", action="store_true", help="every coordinate of the full objective")
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train and score one ablation preset")
    a.add_argument("--preset", required=True)
    a.add_argument("--config")
    a.add_argument("--data")
    a.add_argument("--out")
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    stderr_logging(logging.DEBUG if args.verbose else logging.INFO)
    try:
        cfg = load_run_config(getattr(args, "config", None))
        return args.func(args, cfg)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"parco: error: {e}\n")
        return EXIT_USAGE
    except (ParcoError, FileNotFoundError, TypeError, ValueError) as e:
        sys.stderr.write(f"parco: error: {e}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
