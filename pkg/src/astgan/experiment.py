"""Wiring: build models from a config, run a training regime, pack checkpoints."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import AdamState
from .checkpoint import Checkpoint
from .config import Config
from .data import Vocabulary, build_vocab, leaf_tokens
from .discriminator import Discriminator
from .generator import Generator
from .grammar import ActionSpace, Grammar, load_grammar
from .training import MetricsLog, Schedule, TrainState, adversarial_loop, run_d_pretrain, run_mle

log = logging.getLogger(__name__)


@dataclass
class Models:
    grammar: Grammar
    gen: Generator
    dis: Discriminator
    cfg: Config


def read_grammar(path) -> Grammar:
    return load_grammar(Path(path).read_text(encoding="utf-8"))


def build_models(cfg: Config, grammar: Grammar, train) -> Models:
    nl_vocab, code_vocab, space = build_vocab(train, grammar, cfg.min_freq, cfg.max_input_len)
    # the discriminator keeps its own vocabularies; rare tokens map to <unk> so that embedding gets trained
    d_nl = Vocabulary.build(Counter(t for ex in train for t in ex.nl), cfg.min_freq)
    d_code = Vocabulary.build(Counter(t for ex in train for t in leaf_tokens(ex.ast)), cfg.min_freq)
    return _make(cfg, grammar, nl_vocab, code_vocab, space, d_nl, d_code)


def _make(cfg, grammar, nl_vocab, code_vocab, space, d_nl, d_code) -> Models:
    gen = Generator(grammar, nl_vocab, code_vocab, space, cfg.hidden_size, cfg.embed_size, seed=cfg.seed,
                    readout=cfg.readout, dropout=cfg.dropout)
    dis = Discriminator(grammar, d_nl, d_code, cfg.hidden_size, cfg.embed_size, seed=cfg.seed + 1,
                        program_encoder=cfg.dis_encoder, dropout=cfg.dis_dropout, unk_rate=cfg.dis_unk_rate)
    return Models(grammar, gen, dis, cfg)


def schedule_for(cfg: Config) -> Schedule:
    base = dict(g_steps=cfg.g_steps, d_steps=cfg.d_steps, batch_size=cfg.batch_size, d_batch_size=cfg.d_batch_size,
                beam_width=cfg.beam_width, max_steps=cfg.max_steps)
    if cfg.regime == "mle":
        return Schedule(mle_epochs=cfg.epochs, **base)
    if cfg.regime == "gan":
        return Schedule(gan_epochs=cfg.gan_epochs, **base)
    return Schedule(mle_epochs=cfg.pretrain_epochs, d_pretrain_steps=cfg.d_pretrain_steps,
                    gan_epochs=cfg.gan_epochs, **base)


def run_regime(cfg: Config, models: Models, train, dev, metrics: MetricsLog) -> TrainState:
    """Train per ``cfg.regime``; the best-dev parameters end up in ``state.best_params``."""
    gen, dis = models.gen, models.dis
    sched = schedule_for(cfg)
    state = TrainState(seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1000)
    g_opt = AdamState.for_params(gen.params, lr=cfg.lr_gen)
    d_opt = AdamState.for_params(dis.params, lr=cfg.lr_dis)
    if sched.mle_epochs:
        run_mle(train, dev, gen, g_opt, sched, state, rng, metrics, dis)
    if sched.d_pretrain_steps:
        # the MLE-trained utterance encoder is a much better starting point than a random one
        if sched.mle_epochs and not dis.warm_start_encoder(gen):
            log.warning("discriminator encoder not warm-started: vocabularies or sizes differ")
        run_d_pretrain(train, dev, gen, dis, d_opt, sched, state, rng, metrics)
    if sched.gan_epochs:
        pg_opt = AdamState.for_params(gen.params, lr=cfg.lr_pg)
        adversarial_loop(train, dev, gen, dis, pg_opt, d_opt, sched, state, rng, metrics)
    if state.best_params is None:
        state.best_params = {"gen": gen.params.arrays(), "dis": dis.params.arrays()}
    return state


# ---------------------------------------------------------------- checkpoints


def pack(models: Models, arrays=None) -> Checkpoint:
    gen, dis = models.gen, models.dis
    meta = {
        "config": models.cfg.to_dict(),
        "grammar": [str(p) for p in models.grammar.productions if not p.synthetic],
        "nl_vocab": gen.nl_vocab.ordinary,
        "code_vocab": gen.code_vocab.ordinary,
        "dis_nl_vocab": dis.nl_vocab.ordinary,
        "dis_code_vocab": dis.code_vocab.ordinary,
        "max_input_len": gen.max_input_len,
    }
    if arrays is None:
        arrays = {"gen": gen.params.arrays(), "dis": dis.params.arrays()}
    flat = dict(arrays["gen"])
    if arrays.get("dis") is not None:
        flat.update(arrays["dis"])
    return Checkpoint(models.grammar.hash64(), meta, flat)


def unpack(ckpt: Checkpoint, grammar: Grammar | None = None) -> Models:
    """Rebuild models from a checkpoint; without ``grammar`` the embedded one is used."""
    meta = ckpt.meta
    grammar = grammar or load_grammar("\n".join(meta["grammar"]))
    cfg = Config.from_dict(meta["config"])
    code_vocab = Vocabulary(meta["code_vocab"])
    space = ActionSpace(grammar, code_vocab.ordinary, meta["max_input_len"])
    models = _make(cfg, grammar, Vocabulary(meta["nl_vocab"]), code_vocab, space,
                   Vocabulary(meta["dis_nl_vocab"]), Vocabulary(meta["dis_code_vocab"]))
    models.gen.params.load_arrays({k: v for k, v in ckpt.arrays.items() if k.startswith("gen.")})
    models.dis.params.load_arrays({k: v for k, v in ckpt.arrays.items() if k.startswith("dis.")})
    return models
