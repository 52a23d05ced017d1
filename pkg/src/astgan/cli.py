"""Command line entry point: make-corpus, train, eval, generate, compare."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, GrammarHashMismatchError, load_checkpoint, save_checkpoint
from .config import REGIMES, Config, ConfigError, load_config
from .data import CorpusError, generate_synthetic_corpus, load_corpus, save_corpus, tokenize
from .experiment import build_models, pack, read_grammar, run_regime, unpack
from .grammar import GrammarError, actions_to_ast, render_code
from .report import plot_metrics, plot_regimes, regime_table
from .training import MetricsLog, evaluate_exact_match

EXIT_OK, EXIT_CONFIG, EXIT_COLLAPSE, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("astgan")


class UsageError(Exception):
    pass


def _config(args) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(*item.split("=", 1))
    for key in ("regime", "seed", "metrics"):
        v = getattr(args, key, None)
        if v is not None:
            cfg.set(key, str(v))
    return cfg.validate()


def cmd_make_corpus(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    targets = [out]
    if args.split is not None:
        if not 0 < args.split < args.n:
            raise ConfigError(f"--split must lie strictly between 0 and --n ({args.n})")
        targets += [out.with_suffix(".train.jsonl"), out.with_suffix(".dev.jsonl")]
    for t in targets:
        if t.exists() and not args.force:
            raise FileExistsError(f"{t} exists; pass --force to overwrite")
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    g = read_grammar(args.grammar or Config().grammar)
    examples = generate_synthetic_corpus(g, args.n, np.random.default_rng(args.seed))
    save_corpus(examples, out)
    if args.split is not None:
        save_corpus(examples[: args.split], targets[1])
        save_corpus(examples[args.split :], targets[2])
    print(f"wrote {len(examples)} examples to {out}")
    return EXIT_OK


def _train_one(cfg: Config, metrics_path):
    g = read_grammar(cfg.grammar)
    train, dev = load_corpus(cfg.train, g), load_corpus(cfg.dev, g)
    if not train or not dev:
        raise CorpusError("train and dev splits must be non-empty")
    models = build_models(cfg, g, train)
    metrics = MetricsLog(metrics_path)
    state = run_regime(cfg, models, train, dev, metrics)
    return models, state, metrics


def cmd_train(args) -> int:
    cfg = _config(args)
    models, state, _ = _train_one(cfg, cfg.metrics)
    save_checkpoint(args.out_ckpt, pack(models, state.best_params))
    if args.plot:
        plot_metrics(state.history, args.plot)
    print(f"regime={cfg.regime} status={state.status} best_dev_em={state.best_dev:.4f}")
    return EXIT_COLLAPSE if state.status == "collapse" else EXIT_OK


def _load_models(args):
    ckpt = load_checkpoint(args.ckpt)
    cfg_grammar = ckpt.meta["config"].get("grammar", "")
    grammar_path = args.grammar or (cfg_grammar if Path(cfg_grammar).exists() else None)
    grammar = read_grammar(grammar_path) if grammar_path else None
    if grammar is not None and grammar.hash64() != ckpt.grammar_hash:
        raise GrammarHashMismatchError(
            f"checkpoint grammar hash {ckpt.grammar_hash:016x} != active grammar {grammar.hash64():016x}")
    return unpack(ckpt, grammar)


def cmd_eval(args) -> int:
    models = _load_models(args)
    cfg = models.cfg
    path = {"train": cfg.train, "dev": cfg.dev}.get(args.split, args.split)
    examples = load_corpus(path, models.grammar)
    if not examples:
        raise CorpusError(f"split {path} is empty")
    beam = args.beam or cfg.beam_width
    acc, rows = evaluate_exact_match(models.gen, examples, beam, cfg.max_steps, details=True)
    if args.verbose:
        for ex, out, ok in rows:
            print(f"{'PASS' if ok else 'FAIL'}\t{ex.id}\t{out if out is not None else '<none>'}")
    print(f"{acc:.4f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    if not args.nl.strip():
        raise UsageError("--nl must be a non-empty utterance")
    models = _load_models(args)
    beam = args.beam or models.cfg.beam_width
    hyps = models.gen.beam_search(tokenize(args.nl), beam, models.cfg.max_steps)
    for h in hyps:
        print(f"{h.score:.4f}\t{render_code(actions_to_ast(h.actions, models.grammar), models.grammar)}")
    return EXIT_OK


def cmd_compare(args) -> int:
    base = _config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, histories = [], {}
    for regime in REGIMES:
        cfg = Config.from_dict(base.to_dict())
        cfg.regime = regime
        _, state, _ = _train_one(cfg, out / f"metrics_{regime}.tsv")
        final = state.history[-1]["dev_em"] if state.history else 0.0
        rows.append({"regime": regime, "status": state.status, "best_dev_em": max(state.best_dev, 0.0),
                     "final_dev_em": final, "d_heldout_acc": state.d_heldout_acc})
        histories[regime] = state.history
    table = regime_table(rows)
    (out / "regimes.tsv").write_text(table, encoding="utf-8")
    plot_regimes(histories, rows, out / "regimes.png")
    sys.stdout.write(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="astgan", description=__doc__)
    ap.add_argument("-v", "--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="write a synthetic job-query corpus")
    p.add_argument("--grammar")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=250)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=int, help="also write OUT.train.jsonl (first SPLIT) and OUT.dev.jsonl")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_make_corpus)

    def config_args(p):
        p.add_argument("--config")
        p.add_argument("--regime", choices=REGIMES)
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")

    p = sub.add_parser("train", help="train one regime and write the best-dev checkpoint")
    config_args(p)
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--metrics")
    p.add_argument("--plot", help="also render training curves to this image file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="exact-match accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="dev", help="'train', 'dev' or a corpus path")
    p.add_argument("--beam", type=int)
    p.add_argument("--grammar")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="decode one utterance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--nl", required=True)
    p.add_argument("--beam", type=int)
    p.add_argument("--grammar")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("compare", help="train all three regimes and report dev exact match")
    config_args(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError, CorpusError, GrammarError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
