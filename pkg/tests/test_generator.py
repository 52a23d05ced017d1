import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from astgan import autodiff as ad
from astgan.data import build_vocab
from astgan.generator import Generator, Hypothesis, IllegalGoldAction
from astgan.grammar import (
    END, ApplyRule, FrontierState, GenToken, actions_to_ast, ast_to_actions, check_ast, parse_code, render_code,
)

from gradcheck import check_param_grad
from helpers import jobs_grammar

G = jobs_grammar()


def small_gen(corpus_train, seed=0, readout="attentional", dropout=0.0):
    nl, code, space = build_vocab(corpus_train, G, 2, 40)
    return Generator(G, nl, code, space, hidden_size=8, embed_size=6, seed=seed, readout=readout, dropout=dropout)


@pytest.fixture(scope="module")
def gen(corpus):
    return small_gen(corpus[0])


def replay_log_prob(gen, nl, actions):
    """Independent oracle: step the decoder one action at a time and read off probabilities."""
    hyp = Hypothesis(FrontierState.initial(G))
    enc = gen.encode(nl)
    total = 0.0
    for a in actions:
        st_ = gen.decode_step(hyp, nl, enc)
        probs = st_.action_probs(gen.space, 0, len(nl))
        if isinstance(a, ApplyRule):
            p = probs[a.production]
        else:
            k = gen.space.vocab_index(a.token)
            p = probs[gen.space.vocab_offset + k] if k is not None else 0.0
            p += sum(probs[gen.space.copy_offset + i] for i, t in enumerate(nl) if t == a.token)
        total += math.log(p + 1e-10)
        hyp.states.append(st_.h.data[0])
        hyp.h, hyp.c = st_.h.data[0], st_.c.data[0]
        hyp.actions.append(a)
        hyp.frontier = hyp.frontier.apply(a, G)
    return total


def test_parameter_names(gen):
    for name in ["gen.enc.emb", "gen.init.W", "gen.att.W", "gen.ptr.W", "gen.rule.W", "gen.tok.W", "gen.gate.W",
                 "gen.read.W"]:
        assert name in gen.params


def test_state_readout_has_no_extra_projection(corpus):
    assert "gen.read.W" not in small_gen(corpus[0], readout="state").params


def test_action_probs_are_distributions(gen, corpus):
    ex = corpus[1][0]
    hyp = Hypothesis(FrontierState.initial(G))
    enc = gen.encode(ex.nl)
    for a in ast_to_actions(ex.ast, G):
        st_ = gen.decode_step(hyp, ex.nl, enc)
        p = st_.action_probs(gen.space, 0, len(ex.nl))
        assert p.sum() == pytest.approx(1.0, abs=1e-5)
        hyp.states.append(st_.h.data[0])
        hyp.h, hyp.c = st_.h.data[0], st_.c.data[0]
        hyp.actions.append(a)
        hyp.frontier = hyp.frontier.apply(a, G)


def test_sequence_log_prob_matches_stepwise_replay(gen, corpus):
    for ex in corpus[1][:8]:
        acts = ast_to_actions(ex.ast, G)
        lp = gen.sequence_log_prob(ex.nl, acts).item()
        assert lp == pytest.approx(replay_log_prob(gen, ex.nl, acts), abs=1e-3)
        assert lp == pytest.approx(sum(gen.step_log_probs(ex.nl, acts)), abs=1e-3)
        assert lp < 0


def test_batch_nll_is_mean_of_sequence_nll(gen, corpus):
    batch = corpus[0][:5]
    want = -np.mean([gen.sequence_log_prob(ex.nl, ast_to_actions(ex.ast, G)).item() for ex in batch])
    assert gen.batch_nll(batch).item() == pytest.approx(want, rel=1e-4)


def test_illegal_gold_action(gen):
    with pytest.raises(IllegalGoldAction) as exc:
        gen.sequence_log_prob(["jobs"], [ApplyRule(G.by_constructor["answer"].id), GenToken("x")])
    assert exc.value.step == 1
    with pytest.raises(IllegalGoldAction):
        gen.sequence_log_prob(["jobs"], [ApplyRule(G.by_constructor["answer"].id)])


def test_end_cannot_open_a_field(gen):
    acts = [ApplyRule(G.by_constructor["answer"].id), ApplyRule(G.cons_id["Goal"]),
            ApplyRule(G.by_constructor["loc"].id), GenToken(END)]
    with pytest.raises(IllegalGoldAction):
        gen.sequence_log_prob(["jobs"], acts)


def test_encode_rejects_empty_and_overlong(gen):
    with pytest.raises(ValueError):
        gen.encode([])
    with pytest.raises(ValueError):
        gen.encode(["a"] * 41)


def test_oov_token_copied_from_input(gen):
    nl = ["jobs", "in", "zzqx"]
    acts = ast_to_actions(parse_code("answer([loc(zzqx)])", G), G)
    assert math.isfinite(gen.sequence_log_prob(nl, acts).item())
    assert gen.sequence_log_prob(nl, acts).item() > -60


def test_sample_is_legal_and_deterministic(gen, corpus):
    nl = corpus[1][3].nl
    a1, tr1, ok1 = gen.sample(nl, np.random.default_rng(7))
    a2, tr2, ok2 = gen.sample(nl, np.random.default_rng(7))
    assert a1 == a2 and tr1 == tr2
    if ok1:
        check_ast(actions_to_ast(a1, G), G)
        assert sum(tr1) == pytest.approx(gen.sequence_log_prob(nl, a1).item(), abs=1e-3)


def test_sample_batch_logp_matches_rows(gen, corpus):
    nls = [ex.nl for ex in corpus[1][:4]]
    results, logp = gen.sample_batch(nls, np.random.default_rng(3), max_steps=60)
    for b, (acts, complete, trace) in enumerate(results):
        assert logp.data[b] == pytest.approx(sum(trace), abs=1e-3)


def test_sample_respects_max_steps(gen, corpus):
    acts, trace, complete = gen.sample(corpus[1][0].nl, np.random.default_rng(0), max_steps=2)
    assert len(acts) <= 2 and not complete


def test_beam_outputs(gen, corpus):
    nl = corpus[1][5].nl
    hyps = gen.beam_search(nl, 4, 60)
    assert 1 <= len(hyps) <= 4
    scores = [h.score for h in hyps]
    assert scores == sorted(scores, reverse=True)
    for h in hyps:
        ast = actions_to_ast(h.actions, G)
        assert parse_code(render_code(ast, G), G) == ast
        assert h.score == pytest.approx(gen.sequence_log_prob(nl, h.actions).item(), abs=1e-3)
    greedy = gen.greedy(nl, 60)
    if greedy is not None:  # an untrained model may not finish greedily
        assert hyps[0].score >= greedy.score - 1e-9


def test_beam_width_one_is_greedy(gen, corpus):
    nl = corpus[1][2].nl
    assert gen.beam_search(nl, 1, 60)[0].actions == gen.greedy(nl, 60).actions


def test_beam_rejects_zero_width(gen):
    with pytest.raises(ValueError):
        gen.beam_search(["jobs"], 0)


def test_dropout_only_with_rng(corpus):
    g = small_gen(corpus[0], dropout=0.5)
    batch = corpus[0][:4]
    assert g.batch_nll(batch).item() == g.batch_nll(batch).item()
    a = g.batch_nll(batch, np.random.default_rng(0)).item()
    b = g.batch_nll(batch, np.random.default_rng(1)).item()
    assert a != b


@pytest.mark.parametrize("readout", ["state", "attentional"])
def test_batch_nll_gradient(corpus, readout):
    g = small_gen(corpus[0], seed=2, readout=readout)
    batch = corpus[0][:3]
    err = check_param_grad(lambda: g.batch_nll(batch), g.params, np.random.default_rng(0), n_entries=30)
    assert err < 1e-4


def test_mle_training_lowers_nll(corpus):
    g = small_gen(corpus[0], seed=1)
    batch = corpus[0][:8]
    opt = ad.AdamState.for_params(g.params, lr=0.02)
    before = g.batch_nll(batch).item()
    for _ in range(15):
        ad.backward(g.batch_nll(batch))
        ad.adam_step(g.params, opt)
    assert g.batch_nll(batch).item() < 0.7 * before


_PROP = {}


def prop_setup():
    if not _PROP:
        from astgan.config import asset
        from astgan.data import load_corpus

        _PROP["train"] = load_corpus(asset("train.jsonl"), G)
        _PROP["dev"] = load_corpus(asset("dev.jsonl"), G)
        _PROP["gen"] = small_gen(_PROP["train"], seed=4)
    return _PROP


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_samples_always_parse_when_complete(seed):
    p = prop_setup()
    ex = p["dev"][seed % len(p["dev"])]
    acts, _, complete = p["gen"].sample(ex.nl, np.random.default_rng(seed), max_steps=80)
    if complete:
        ast = actions_to_ast(acts, G)
        assert parse_code(render_code(ast, G), G) == ast


def test_encoder_summary_takes_each_direction_final_state():
    from astgan.autodiff import ParameterStore
    from astgan.nn import BiEncoder

    enc = BiEncoder(ParameterStore(), "e", 10, 4, 5, np.random.default_rng(0))
    rows = [[1, 2, 3, 4], [5, 6]]
    out = enc(rows)
    H, S = out.H.data, out.summary.data
    for b, ids in enumerate(rows):
        n = len(ids)
        np.testing.assert_allclose(S[b, :5], H[b, n - 1, :5], atol=1e-6)
        np.testing.assert_allclose(S[b, 5:], H[b, 0, 5:], atol=1e-6)
        # padding never reaches a shorter row
        np.testing.assert_allclose(S[b], enc([ids]).summary.data[0], atol=1e-6)


def test_memorises_a_single_example(corpus):
    from astgan.config import Config
    from astgan.training import mle_epoch

    cfg = Config()
    nl, code, space = build_vocab(corpus[0], G, cfg.min_freq, cfg.max_input_len)
    g = Generator(G, nl, code, space, hidden_size=cfg.hidden_size, embed_size=cfg.embed_size, seed=0)
    one = corpus[0][:1]
    opt = ad.AdamState.for_params(g.params, lr=cfg.lr_gen)
    rng = np.random.default_rng(0)
    for _ in range(200):
        mle_epoch(one, g, opt, rng)
    assert g.batch_nll(one).item() < 0.01


def test_one_epoch_beats_untrained(corpus):
    from astgan.training import corpus_nll, mle_epoch

    g = small_gen(corpus[0], seed=3)
    before = corpus_nll(corpus[0], g)
    mle_epoch(corpus[0], g, ad.AdamState.for_params(g.params, lr=3e-3), np.random.default_rng(0))
    assert corpus_nll(corpus[0], g) < before
