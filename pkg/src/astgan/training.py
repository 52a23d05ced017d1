"""Generator MLE, discriminator pretraining and adversarial policy-gradient training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState
from .discriminator import Discriminator
from .generator import Generator
from .grammar import END, actions_to_ast, random_derivation, render_code

log = logging.getLogger(__name__)

BASELINE_DECAY = 0.95
COLLAPSE_REWARD = 0.01
COLLAPSE_EPOCHS = 3


@dataclass
class Schedule:
    mle_epochs: int = 0  # generator MLE (pre)training epochs
    d_pretrain_steps: int = 0
    gan_epochs: int = 0
    g_steps: int = 1
    d_steps: int = 1
    batch_size: int = 16
    d_batch_size: int = 32  # discriminator pretraining, half real half negative
    beam_width: int = 5
    max_steps: int = 200


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    baseline: float = 0.0
    baseline_set: bool = False
    seed: int = 0
    status: str = "ok"
    history: list = field(default_factory=list)
    best_dev: float = -1.0
    best_params: dict | None = None
    d_heldout_acc: float | None = None

    def update_baseline(self, mean_reward: float):
        if not self.baseline_set:
            self.baseline, self.baseline_set = mean_reward, True
        else:
            self.baseline = BASELINE_DECAY * self.baseline + (1 - BASELINE_DECAY) * mean_reward


@dataclass
class RewardVector:
    """Per-step rewards of one sample; every step gets the terminal score."""

    terminal: float
    steps: np.ndarray

    @classmethod
    def broadcast(cls, terminal: float, n_steps: int, complete=True) -> "RewardVector":
        r = float(terminal) if complete else 0.0
        return cls(r, np.full(n_steps, r))


def _batches(items, size, rng):
    order = rng.permutation(len(items))
    for i in range(0, len(items), size):
        yield [items[j] for j in order[i : i + size]]


# ----------------------------------------------------------------- MLE


def mle_epoch(corpus, gen: Generator, opt: AdamState, rng, batch_size=16) -> float:
    """One pass of minibatch Adam on the summed gold-derivation NLL.

    ``rng`` shuffles the corpus and draws the generator's dropout masks.
    """
    if not corpus:
        raise ValueError("mle_epoch: empty corpus")
    total = 0.0
    for batch in _batches(corpus, batch_size, rng):
        loss = gen.batch_nll(batch, rng)
        ad.backward(loss)
        ad.adam_step(gen.params, opt)
        total += loss.item() * len(batch)
    return total / len(corpus)


def corpus_nll(corpus, gen: Generator, batch_size=32) -> float:
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(corpus), batch_size):
            batch = corpus[i : i + batch_size]
            total += gen.batch_nll(batch).item() * len(batch)
    return total / len(corpus)


# ---------------------------------------------------------- fake sources


class GeneratorSampler:
    """Fakes drawn from the generator; None for incomplete samples."""

    def __init__(self, gen: Generator, max_steps=200):
        self.gen, self.max_steps = gen, max_steps

    def __call__(self, nl_lists, rng):
        with ad.no_grad():
            results, _ = self.gen.sample_batch(nl_lists, rng, self.max_steps)
        return [actions_to_ast(a, self.gen.g) if ok else None for a, ok, _ in results]


class RandomPolicySampler:
    """Uniform-random legal derivations; tokens from the vocabulary or the utterance."""

    def __init__(self, g, vocab_tokens, max_steps=200, p_end=0.5):
        self.g, self.vocab_tokens = g, list(vocab_tokens)
        self.max_steps, self.p_end = max_steps, p_end

    def __call__(self, nl_lists, rng):
        out = []
        for nl in nl_lists:
            acts = random_derivation(self.g, rng, self.vocab_tokens + [t for t in nl if t != END],
                                     self.p_end, self.max_steps)
            out.append(actions_to_ast(acts, self.g) if acts is not None else None)
        return out


def _mismatched(ex, corpus, rng):
    for _ in range(20):
        other = corpus[int(rng.integers(len(corpus)))]
        if other.code != ex.code:
            return other.ast
    return None


def real_fake_batch(examples, corpus, sampler, rng):
    """Labelled (nl, ast, label) triples: one real per example plus one negative.

    Negatives alternate between sampler output and a gold tree borrowed from
    another example.  Samples that are incomplete or reproduce the gold tree
    are not negatives; a mismatched pair takes their place.
    """
    batch = [(ex.nl, ex.ast, 1) for ex in examples]
    use_sampler = [i % 2 == 0 for i in range(len(examples))]
    samples = sampler([ex.nl for ex, s in zip(examples, use_sampler) if s], rng) if any(use_sampler) else []
    it = iter(samples)
    for ex, s in zip(examples, use_sampler):
        fake = next(it) if s else None
        if fake is None or fake == ex.ast:
            fake = _mismatched(ex, corpus, rng)
        if fake is not None:
            batch.append((ex.nl, fake, 0))
    return batch


def d_accuracy(dis: Discriminator, batch) -> float:
    nl, asts, labels = zip(*batch)
    p = dis.p_sim(list(nl), list(asts))
    pred = (p > 0.5).astype(int)
    return float(np.mean(pred == np.asarray(labels)))


def pretrain_discriminator(corpus, gen: Generator | None, dis: Discriminator, opt: AdamState, steps: int, rng,
                           heldout, batch_size=16, sampler=None, max_steps=200, losses=None, lr_decay=False) -> float:
    """Train D on balanced real/fake batches; returns held-out accuracy.

    ``sampler`` defaults to the (frozen) generator.  ``heldout`` is a list of
    labelled triples, built once by the caller with :func:`real_fake_batch`.
    Per-step losses are appended to ``losses`` when given.  ``lr_decay``
    anneals the step size linearly to zero over the run.
    """
    sampler = sampler or GeneratorSampler(gen, max_steps)
    half = max(1, batch_size // 2)
    base_lr = opt.lr
    for i in range(steps):
        if lr_decay:
            opt.lr = base_lr * (1 - i / steps)
        idx = rng.choice(len(corpus), size=min(half, len(corpus)), replace=False)
        batch = real_fake_batch([corpus[i] for i in idx], corpus, sampler, rng)
        loss = _d_update(dis, opt, batch, rng)
        if losses is not None:
            losses.append(loss)
    opt.lr = base_lr
    return d_accuracy(dis, heldout)


def _d_update(dis, opt, batch, rng=None) -> float:
    nl, asts, labels = zip(*batch)
    loss = dis.loss(list(nl), list(asts), list(labels), rng)
    ad.backward(loss)
    ad.adam_step(dis.params, opt)
    return loss.item()


# ------------------------------------------------------ policy gradient


def sample_rewards(gen: Generator, dis: Discriminator, nl_lists, rng, max_steps=200, grad=True):
    """Sample one derivation per utterance and score it with D.

    Returns ``(rewards, complete, asts, logp)`` with ``logp`` the (B,) Value of
    summed sample log-probabilities.
    """
    if grad:
        results, logp = gen.sample_batch(nl_lists, rng, max_steps)
    else:
        with ad.no_grad():
            results, logp = gen.sample_batch(nl_lists, rng, max_steps)
    complete = np.array([ok for _, ok, _ in results])
    asts = [actions_to_ast(a, gen.g) if ok else None for a, ok, _ in results]
    rewards = np.zeros(len(nl_lists))
    idx = [i for i, a in enumerate(asts) if a is not None]
    if idx:
        rewards[idx] = dis.p_sim([nl_lists[i] for i in idx], [asts[i] for i in idx])
    return rewards, complete, asts, logp


def pg_surrogate(logp, rewards, baseline) -> ad.Value:
    """-mean_b (R_b - baseline) * log p(Y_b); the advantage is a constant."""
    adv = np.asarray(rewards, dtype=np.float64) - baseline
    return ad.mul(ad.mean(ad.mul(logp, adv.astype(np.float32))), -1.0)


def policy_gradient_step(nl_lists, gen: Generator, dis: Discriminator, opt: AdamState, state: TrainState, rng,
                         max_steps=200) -> float:
    """One REINFORCE update of the generator with D frozen; returns mean reward."""
    rewards, complete, _, logp = sample_rewards(gen, dis, nl_lists, rng, max_steps)
    mean_r = float(rewards.mean())
    if not complete.any():
        log.warning("policy_gradient_step: every sample was incomplete; skipping update")
        gen.params.zero_grad()
    else:
        if not state.baseline_set:
            state.update_baseline(mean_r)
        loss = pg_surrogate(logp, rewards, state.baseline)
        ad.backward(loss)
        ad.adam_step(gen.params, opt)
        state.update_baseline(mean_r)
    dis.params.zero_grad()
    state.step += 1
    return mean_r


# ------------------------------------------------------------ evaluation


def predict(gen: Generator, nl_tokens, beam_width=5, max_steps=200):
    hyps = gen.beam_search(nl_tokens, beam_width, max_steps)
    if not hyps:
        return None
    return render_code(actions_to_ast(hyps[0].actions, gen.g), gen.g)


def evaluate_exact_match(gen: Generator, examples, beam_width=5, max_steps=200, details=False):
    if not examples:
        raise ValueError("evaluate_exact_match: empty split")
    rows = []
    for ex in examples:
        out = predict(gen, ex.nl, beam_width, max_steps)
        rows.append((ex, out, out == ex.code))
    acc = sum(ok for _, _, ok in rows) / len(rows)
    return (acc, rows) if details else acc


# ------------------------------------------------------------ main loops


class MetricsLog:
    """Tab-separated per-epoch metrics: epoch, mle_nll, d_loss, mean_reward, dev_exact_match."""

    HEADER = "epoch\tmle_nll\td_loss\tmean_reward\tdev_exact_match"

    def __init__(self, path=None):
        self.lines = ["# " + self.HEADER]
        self.path = path
        self._flush()

    def _flush(self):
        if self.path is not None:
            with open(self.path, "w", encoding="utf-8") as fh:
                fh.write("\n".join(self.lines) + "\n")

    def phase(self, name):
        self.lines.append(f"# phase={name}")
        self._flush()

    def row(self, epoch, mle_nll, d_loss, mean_reward, dev_em):
        def f(x):
            return "-" if x is None else f"{x:.6f}"

        self.lines.append(f"{epoch}\t{f(mle_nll)}\t{f(d_loss)}\t{f(mean_reward)}\t{dev_em:.4f}")
        self._flush()

    def text(self):
        return "\n".join(self.lines) + "\n"


def _snapshot(state: TrainState, dev_em, gen, dis):
    if dev_em > state.best_dev:
        state.best_dev = dev_em
        state.best_params = {"gen": gen.params.arrays(), "dis": dis.params.arrays() if dis else None}


def run_mle(train, dev, gen, opt, sched: Schedule, state: TrainState, rng, metrics: MetricsLog, dis=None):
    metrics.phase("mle")
    for _ in range(sched.mle_epochs):
        nll = mle_epoch(train, gen, opt, rng, sched.batch_size)
        state.epoch += 1
        em = evaluate_exact_match(gen, dev, sched.beam_width, sched.max_steps)
        _snapshot(state, em, gen, dis)
        state.history.append({"epoch": state.epoch, "mle_nll": nll, "dev_em": em})
        metrics.row(state.epoch, nll, None, None, em)
    return state


def heldout_batch(heldout, corpus, sampler, seed):
    return real_fake_batch(heldout, corpus, sampler, np.random.default_rng(seed))


def run_d_pretrain(train, dev, gen, dis, d_opt, sched, state, rng, metrics, sampler=None):
    metrics.phase("d_pretrain")
    sampler = sampler or GeneratorSampler(gen, sched.max_steps)
    held = heldout_batch(dev, dev + train, sampler, state.seed + 7)
    losses = []
    acc = pretrain_discriminator(train, gen, dis, d_opt, sched.d_pretrain_steps, rng, held, sched.d_batch_size,
                                 sampler, sched.max_steps, losses, lr_decay=True)
    d_loss = float(np.mean(losses)) if losses else None
    state.d_heldout_acc = acc
    em = evaluate_exact_match(gen, dev, sched.beam_width, sched.max_steps)
    state.epoch += 1
    state.history.append({"epoch": state.epoch, "d_loss": d_loss, "d_acc": acc, "dev_em": em})
    metrics.row(state.epoch, corpus_nll(train, gen), d_loss, None, em)
    log.info("discriminator pretraining: held-out accuracy %.4f", acc)
    return acc


def adversarial_loop(train, dev, gen, dis, g_opt, d_opt, sched: Schedule, state: TrainState, rng,
                     metrics: MetricsLog):
    """Alternate PG updates (D frozen) and D updates on fresh samples (G frozen).

    Halts with ``state.status = "collapse"`` when the epoch mean reward stays
    below 0.01 for three consecutive epochs.
    """
    metrics.phase("adversarial")
    low = 0
    for _ in range(sched.gan_epochs):
        rewards, d_losses = [], []
        for batch in _batches(train, sched.batch_size, rng):
            nl = [ex.nl for ex in batch]
            for _ in range(sched.g_steps):
                rewards.append(policy_gradient_step(nl, gen, dis, g_opt, state, rng, sched.max_steps))
            for _ in range(sched.d_steps):
                with ad.no_grad():
                    results, _ = gen.sample_batch(nl, rng, sched.max_steps)
                triples = [(ex.nl, ex.ast, 1) for ex in batch]
                for ex, (acts, ok, _) in zip(batch, results):
                    if ok:
                        fake = actions_to_ast(acts, gen.g)
                        if fake != ex.ast:
                            triples.append((ex.nl, fake, 0))
                d_losses.append(_d_update(dis, d_opt, triples, rng))
                gen.params.zero_grad()
        state.epoch += 1
        mean_r = float(np.mean(rewards))
        em = evaluate_exact_match(gen, dev, sched.beam_width, sched.max_steps)
        _snapshot(state, em, gen, dis)
        nll = corpus_nll(train, gen)
        d_loss = float(np.mean(d_losses))
        state.history.append({"epoch": state.epoch, "mle_nll": nll, "d_loss": d_loss, "mean_reward": mean_r,
                              "dev_em": em})
        metrics.row(state.epoch, nll, d_loss, mean_r, em)
        low = low + 1 if mean_r < COLLAPSE_REWARD else 0
        if low >= COLLAPSE_EPOCHS:
            state.status = "collapse"
            log.warning("GAN collapse: mean reward below %.2f for %d epochs", COLLAPSE_REWARD, COLLAPSE_EPOCHS)
            break
    return state
