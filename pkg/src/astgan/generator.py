"""Grammar-constrained encoder-decoder that emits AST construction actions.

The decoder state follows ``s_t = LSTM([a_{t-1} : c_t : p_t], s_{t-1})`` where
``c_t`` is bilinear soft attention over the encoder states (queried with
``s_{t-1}``) and ``p_t`` is the decoder state of the step that expanded the
parent slot.  At a rule slot the next-action distribution is a softmax over
the legal productions.  At a token slot it is a gated mixture

    p(tok) = g * p_vocab(tok) + (1 - g) * sum_{i: x_i = tok} alpha_i

of a vocabulary softmax and a pointer distribution over input positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Value, xavier_uniform
from .data import END_ID, Vocabulary
from .grammar import (
    END,
    TOKEN,
    ActionSpace,
    ApplyRule,
    FrontierState,
    GenToken,
    Grammar,
    IllegalActionError,
    action_key,
    ast_to_actions,
    rule_mask,
)
from .nn import BiEncoder, EncoderStates, dropper, init_lstm, lstm_cell

EPS = 1e-10  # keeps log() finite when the copy gate saturates in float32


class IllegalGoldAction(ValueError):
    def __init__(self, step, msg):
        super().__init__(f"gold action at step {step}: {msg}")
        self.step = step


@dataclass
class DecoderStep:
    h: Value
    c: Value
    a_prev: Value
    context: Value
    parent_feed: Value
    rule_probs: Value
    vocab_probs: Value
    gate: Value  # (B,) probability of generating from the vocabulary
    copy_probs: Value

    def action_probs(self, space: ActionSpace, row=0, n_input=None) -> np.ndarray:
        """Distribution over the action index space for one row."""
        out = np.zeros(space.size)
        if self._is_rule[row]:
            out[: space.n_rules] = self.rule_probs.data[row]
        else:
            g = float(self.gate.data[row])
            pv = self.vocab_probs.data[row]
            out[space.vocab_offset : space.end_index + 1] = g * pv
            n = self.copy_probs.shape[1] if n_input is None else n_input
            out[space.copy_offset : space.copy_offset + n] = (1 - g) * self.copy_probs.data[row, :n]
        return out


@dataclass
class Hypothesis:
    frontier: FrontierState
    actions: list = field(default_factory=list)
    score: float = 0.0
    h: np.ndarray | None = None
    c: np.ndarray | None = None
    states: list = field(default_factory=list)  # decoder state after each step
    done_at: int = -1


@dataclass
class StepTargets:
    """Per-row gold targets for one decoding step of a batch."""

    is_rule: np.ndarray
    is_tok: np.ndarray
    rule_target: np.ndarray
    rule_mask: np.ndarray
    vocab_target: np.ndarray
    in_vocab: np.ndarray
    tok_mask: np.ndarray
    copy_match: np.ndarray
    parent: np.ndarray
    prev_act: np.ndarray


class Generator:
    def __init__(self, grammar: Grammar, nl_vocab: Vocabulary, code_vocab: Vocabulary, space: ActionSpace,
                 hidden_size=128, embed_size=64, seed=0, params: ParameterStore | None = None,
                 readout="attentional", dropout=0.0):
        if readout not in ("state", "attentional"):
            raise ValueError(f"readout must be 'state' or 'attentional', got {readout!r}")
        self.g = grammar
        self.readout = readout
        self.dropout = dropout
        self.nl_vocab = nl_vocab
        self.code_vocab = code_vocab
        self.space = space
        self.hidden = hidden_size
        self.embed = embed_size
        self.max_input_len = space.max_input_len
        rng = np.random.default_rng(seed)
        self.params = params if params is not None else ParameterStore(seed)
        p, H, E = self.params, hidden_size, embed_size
        P, K = space.n_rules, space.n_vocab
        self.encoder = BiEncoder(p, "gen.enc", len(nl_vocab), E, H, rng)
        p.add("gen.init.W", xavier_uniform((2 * H, H), 2 * H, H, rng))
        p.add("gen.init.b", np.zeros(H))
        p.add("gen.act_emb", xavier_uniform((P + len(code_vocab), E), P + len(code_vocab), E, rng))
        init_lstm(p, "gen.dec", E + 2 * H + H, H, rng)
        p.add("gen.att.W", xavier_uniform((2 * H, H), 2 * H, H, rng))
        p.add("gen.ptr.W", xavier_uniform((2 * H, H), 2 * H, H, rng))
        if readout == "attentional":
            p.add("gen.read.W", xavier_uniform((3 * H, H), 3 * H, H, rng))
            p.add("gen.read.b", np.zeros(H))
        p.add("gen.rule.W", xavier_uniform((H, P), H, P, rng))
        p.add("gen.rule.b", np.zeros(P))
        p.add("gen.tok.W", xavier_uniform((H, K + 1), H, K + 1, rng))
        p.add("gen.tok.b", np.zeros(K + 1))
        p.add("gen.gate.W", xavier_uniform((H, 1), H, 1, rng))
        p.add("gen.gate.b", np.zeros(1))
        self._prep_cache: dict = {}

    # ------------------------------------------------------------ encoder

    def _nl_ids(self, nl_tokens):
        if not nl_tokens:
            raise ValueError("encode: empty input")
        if len(nl_tokens) > self.max_input_len:
            raise ValueError(f"encode: {len(nl_tokens)} tokens exceed max_input_len={self.max_input_len}")
        return self.nl_vocab.ids(nl_tokens)

    def encode_batch(self, nl_lists, drop=None) -> EncoderStates:
        enc = self.encoder([self._nl_ids(x) for x in nl_lists], drop)
        if drop is not None:
            enc.H = drop(enc.H)
        enc.att_keys = ad.matmul(enc.H, self.params["gen.att.W"])
        enc.ptr_keys = ad.matmul(enc.H, self.params["gen.ptr.W"])
        return enc

    def encode(self, nl_tokens) -> EncoderStates:
        return self.encode_batch([nl_tokens])

    def initial_state(self, enc: EncoderStates):
        c0 = ad.add(ad.matmul(enc.summary, self.params["gen.init.W"]), self.params["gen.init.b"])
        return ad.tanh(c0), c0

    @staticmethod
    def _scores(keys: Value, s: Value):
        B, H = s.shape
        return ad.sum(ad.mul(keys, ad.reshape(s, (B, 1, H))), axis=2)

    def attend(self, s: Value, enc: EncoderStates):
        """Context vector and attention weights for decoder state ``s`` (B, H)."""
        alpha = ad.softmax(self._scores(enc.att_keys, s), axis=1, mask=enc.mask)
        B, n = alpha.shape
        ctx = ad.sum(ad.mul(ad.reshape(alpha, (B, n, 1)), enc.H), axis=1)
        return ctx, alpha

    # ------------------------------------------------------------ decoder

    def _step(self, enc, h, c, a_prev, parent_feed, rmask, tmask, is_rule, drop=None) -> DecoderStep:
        p = self.params
        ctx, _ = self.attend(h, enc)
        x = ad.concat([a_prev, ctx, parent_feed], axis=1)
        h2, c2 = lstm_cell(p, "gen.dec", x, h, c)
        r = h2
        if self.readout == "attentional":
            # predict from the new state and what it attends to
            ctx2, _ = self.attend(h2, enc)
            r = ad.tanh(ad.add(ad.matmul(ad.concat([h2, ctx2], axis=1), p["gen.read.W"]), p["gen.read.b"]))
        if drop is not None:
            r = drop(r)
        rule_probs = ad.softmax(ad.add(ad.matmul(r, p["gen.rule.W"]), p["gen.rule.b"]), axis=1, mask=rmask)
        vocab_probs = ad.softmax(ad.add(ad.matmul(r, p["gen.tok.W"]), p["gen.tok.b"]), axis=1, mask=tmask)
        gate = ad.reshape(ad.sigmoid(ad.add(ad.matmul(r, p["gen.gate.W"]), p["gen.gate.b"])), (h2.shape[0],))
        copy_probs = ad.softmax(self._scores(enc.ptr_keys, h2), axis=1, mask=enc.mask)
        st = DecoderStep(h2, c2, a_prev, ctx, parent_feed, rule_probs, vocab_probs, gate, copy_probs)
        st._is_rule = is_rule
        return st

    def _target_logp(self, st: DecoderStep, tg: StepTargets) -> Value:
        """Per-row log-probability of the targets; inactive rows contribute 0."""
        p_rule = ad.pick(st.rule_probs, tg.rule_target)
        p_vocab = ad.mul(ad.pick(st.vocab_probs, tg.vocab_target), tg.in_vocab)
        p_copy = ad.sum(ad.mul(st.copy_probs, tg.copy_match), axis=1)
        p_tok = ad.add(ad.mul(st.gate, p_vocab), ad.mul(ad.add(ad.mul(st.gate, -1.0), 1.0), p_copy))
        inactive = 1.0 - tg.is_rule - tg.is_tok
        prob = ad.add(ad.add(ad.mul(p_rule, tg.is_rule), ad.mul(p_tok, tg.is_tok)), inactive + EPS)
        return ad.log(prob)

    def _act_index(self, a) -> int:
        if isinstance(a, ApplyRule):
            return a.production
        return self.space.n_rules + (END_ID if a.token == END else self.code_vocab.id(a.token))

    def _tok_mask(self, frontier: FrontierState):
        m = np.ones(self.space.n_vocab + 1, dtype=bool)
        if not frontier.complete and frontier.top.type == TOKEN and frontier.ntok == 0:
            m[-1] = False
        return m

    def _row_target(self, frontier: FrontierState, a, nl_tokens, n, step):
        """Target fields for one row; raises if ``a`` is not legal here."""
        P = self.space.n_rules
        rm = rule_mask(frontier, self.g)
        tm = self._tok_mask(frontier)
        cm = np.zeros(n, dtype=np.float32)
        if frontier.top.type == TOKEN:
            if not isinstance(a, GenToken):
                raise IllegalGoldAction(step, f"expected a token, got {a}")
            if a.token == END and frontier.ntok == 0:
                raise IllegalGoldAction(step, "end token cannot open a field")
            vi = self.space.vocab_index(a.token)
            for i, t in enumerate(nl_tokens):
                if t == a.token and a.token != END:
                    cm[i] = 1.0
            if vi is None and not cm.any():
                raise IllegalGoldAction(step, f"token {a.token!r} is neither in the vocabulary nor copyable")
            return (0.0, 1.0, 0, np.ones(P, dtype=bool), vi if vi is not None else 0,
                    1.0 if vi is not None else 0.0, tm, cm)
        if not isinstance(a, ApplyRule) or not 0 <= a.production < P or not rm[a.production]:
            raise IllegalGoldAction(step, f"{a} is not legal for slot {frontier.top.type}")
        return (1.0, 0.0, a.production, rm, 0, 0.0, np.ones(self.space.n_vocab + 1, dtype=bool), cm)

    def prepare(self, nl_tokens, actions):
        """Teacher-forcing arrays for one gold derivation."""
        n = len(nl_tokens)
        frontier = FrontierState.initial(self.g)
        rows = []
        for t, a in enumerate(actions):
            if frontier.complete:
                raise IllegalGoldAction(t, "derivation already complete")
            fields = self._row_target(frontier, a, nl_tokens, n, t)
            prev = self._act_index(actions[t - 1]) if t else 0
            rows.append(fields + (frontier.top.parent, prev))
            try:
                frontier = frontier.apply(a, self.g)
            except IllegalActionError as exc:
                raise IllegalGoldAction(t, str(exc)) from None
        if not frontier.complete:
            raise IllegalGoldAction(len(actions), "derivation incomplete")
        return rows

    def _batch_targets(self, prepared, t, n):
        B, P, K1 = len(prepared), self.space.n_rules, self.space.n_vocab + 1
        tg = StepTargets(np.zeros(B, np.float32), np.zeros(B, np.float32), np.zeros(B, np.int64),
                         np.ones((B, P), bool), np.zeros(B, np.int64), np.zeros(B, np.float32),
                         np.ones((B, K1), bool), np.zeros((B, n), np.float32), np.full(B, -1, np.int64),
                         np.zeros(B, np.int64))
        for b, rows in enumerate(prepared):
            if t < len(rows):
                ir, it, rt, rm, vt, iv, tm, cm, par, prev = rows[t]
                tg.is_rule[b], tg.is_tok[b], tg.rule_target[b], tg.rule_mask[b] = ir, it, rt, rm
                tg.vocab_target[b], tg.in_vocab[b], tg.tok_mask[b] = vt, iv, tm
                tg.copy_match[b, : len(cm)] = cm
                tg.parent[b], tg.prev_act[b] = par, prev
        return tg

    def _teacher_forced(self, nl_lists, prepared, rng=None):
        """(B,) summed log-probabilities and the per-step (B,) log-prob Values.

        With ``rng`` given, dropout is applied at rate ``self.dropout``.
        """
        drop = dropper(self.dropout, rng)
        enc = self.encode_batch(nl_lists, drop)
        B, n = len(nl_lists), enc.n
        h, c = self.initial_state(enc)
        states = [Value(np.zeros((B, self.hidden)))]
        zero_a = Value(np.zeros((B, self.embed)))
        total, steps = None, []
        for t in range(max(len(r) for r in prepared)):
            tg = self._batch_targets(prepared, t, n)
            a = zero_a if t == 0 else ad.embedding_lookup(self.params["gen.act_emb"], tg.prev_act)
            pf = ad.gather_steps(states, tg.parent + 1)
            st = self._step(enc, h, c, a, pf, tg.rule_mask, tg.tok_mask, tg.is_rule > 0, drop)
            lp = self._target_logp(st, tg)
            steps.append(lp)
            total = lp if total is None else ad.add(total, lp)
            h, c = st.h, st.c
            states.append(h)
        return total, steps

    def _prepared(self, ex):
        key = id(ex)
        hit = self._prep_cache.get(key)
        if hit is None or hit[0] is not ex:
            hit = (ex, self.prepare(ex.nl, self.actions_of(ex)))
            self._prep_cache[key] = hit
        return hit[1]

    def actions_of(self, ex):
        return ast_to_actions(ex.ast, self.g)

    def batch_nll(self, examples, rng=None) -> Value:
        """Mean over the batch of the summed negative log-likelihood; ``rng`` enables dropout."""
        total, _ = self._teacher_forced([ex.nl for ex in examples], [self._prepared(ex) for ex in examples], rng)
        return ad.mul(ad.mean(total), -1.0)

    def sequence_log_prob(self, nl_tokens, actions) -> Value:
        total, _ = self._teacher_forced([nl_tokens], [self.prepare(nl_tokens, list(actions))])
        return ad.sum(total)

    def step_log_probs(self, nl_tokens, actions) -> list[float]:
        _, steps = self._teacher_forced([nl_tokens], [self.prepare(nl_tokens, list(actions))])
        return [float(s.data[0]) for s in steps]

    # ------------------------------------------------------- single steps

    def decode_step(self, hyp: Hypothesis, nl_tokens, enc: EncoderStates | None = None) -> DecoderStep:
        """Next-action distribution for one partial derivation."""
        if hyp.frontier.complete:
            raise ValueError("decode_step: hypothesis is complete")
        with ad.no_grad():
            enc = enc or self.encode(nl_tokens)
            if hyp.h is None:
                h, c = self.initial_state(enc)
                hyp.h, hyp.c = h.data[0], c.data[0]
            st = self._row_step(enc, [hyp])
        return st

    def _row_step(self, enc, hyps) -> DecoderStep:
        B = len(hyps)
        if hyps[0].actions:
            a = ad.embedding_lookup(self.params["gen.act_emb"], [self._act_index(x.actions[-1]) for x in hyps])
        else:
            a = Value(np.zeros((B, self.embed)))
        pf = np.zeros((B, self.hidden), dtype=np.float32)
        for b, x in enumerate(hyps):
            par = x.frontier.top.parent
            if par >= 0:
                pf[b] = x.states[par]
        rm = np.stack([rule_mask(x.frontier, self.g) for x in hyps])
        is_rule = np.array([x.frontier.top.type != TOKEN for x in hyps])
        rm[~is_rule] = True
        tm = np.stack([self._tok_mask(x.frontier) for x in hyps])
        h = Value(np.stack([x.h for x in hyps]))
        c = Value(np.stack([x.c for x in hyps]))
        return self._step(enc, h, c, a, Value(pf), rm, tm, is_rule)

    # ------------------------------------------------------------ sampling

    def sample_batch(self, nl_lists, rng: np.random.Generator, max_steps=200):
        """Ancestral sampling for a batch, recording the graph when grad is on.

        Returns ``(results, logp)`` where results holds ``(actions, complete,
        step_logps)`` per row and ``logp`` is the (B,) Value of summed
        log-probabilities.
        """
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        enc = self.encode_batch(nl_lists)
        B, n = len(nl_lists), enc.n
        h, c = self.initial_state(enc)
        states = [Value(np.zeros((B, self.hidden)))]
        zero_a = Value(np.zeros((B, self.embed)))
        fronts = [FrontierState.initial(self.g) for _ in range(B)]
        actions = [[] for _ in range(B)]
        traces = [[] for _ in range(B)]
        prev = np.zeros(B, np.int64)
        total = None
        space = self.space
        for t in range(max_steps):
            live = [b for b in range(B) if not fronts[b].complete]
            if not live:
                break
            rm = np.ones((B, space.n_rules), bool)
            tm = np.ones((B, space.n_vocab + 1), bool)
            is_rule = np.zeros(B, bool)
            parent = np.full(B, -1, np.int64)
            for b in live:
                f = fronts[b]
                parent[b] = f.top.parent
                if f.top.type != TOKEN:
                    is_rule[b] = True
                    rm[b] = rule_mask(f, self.g)
                else:
                    tm[b] = self._tok_mask(f)
            a = zero_a if t == 0 else ad.embedding_lookup(self.params["gen.act_emb"], prev)
            pf = ad.gather_steps(states, parent + 1)
            st = self._step(enc, h, c, a, pf, rm, tm, is_rule)
            u = rng.random(len(live))
            rows = []
            for j, b in enumerate(live):
                probs = st.action_probs(space, b, len(nl_lists[b]))
                cdf = np.cumsum(probs)
                idx = int(np.searchsorted(cdf, u[j] * cdf[-1], side="right"))
                idx = min(idx, len(probs) - 1)
                while probs[idx] <= 0:  # guard against landing on a zero-width bin
                    idx -= 1
                act = space.action_at(idx, nl_lists[b])
                rows.append((b, act))
            tg_rows = {}
            for b, act in rows:
                tg_rows[b] = self._row_target(fronts[b], act, nl_lists[b], n, t)
            tg = StepTargets(np.zeros(B, np.float32), np.zeros(B, np.float32), np.zeros(B, np.int64), rm,
                             np.zeros(B, np.int64), np.zeros(B, np.float32), tm, np.zeros((B, n), np.float32),
                             parent, prev)
            for b, (ir, it, rt, _rm, vt, iv, _tm, cm) in tg_rows.items():
                tg.is_rule[b], tg.is_tok[b], tg.rule_target[b] = ir, it, rt
                tg.vocab_target[b], tg.in_vocab[b] = vt, iv
                tg.copy_match[b, : len(cm)] = cm
            lp = self._target_logp(st, tg)
            total = lp if total is None else ad.add(total, lp)
            prev = prev.copy()
            for b, act in rows:
                actions[b].append(act)
                traces[b].append(float(lp.data[b]))
                fronts[b] = fronts[b].apply(act, self.g)
                prev[b] = self._act_index(act)
            h, c = st.h, st.c
            states.append(h)
        if total is None:
            total = Value(np.zeros(B))
        results = [(actions[b], fronts[b].complete, traces[b]) for b in range(B)]
        return results, total

    def sample(self, nl_tokens, rng, max_steps=200):
        """One sampled derivation: ``(actions, step_logps, complete)``."""
        with ad.no_grad():
            (res,), _ = self.sample_batch([nl_tokens], rng, max_steps)
        actions, complete, trace = res
        return actions, trace, complete

    # ---------------------------------------------------------- beam search

    def _candidates(self, st: DecoderStep, row, hyp, nl_tokens):
        """Legal next actions of one hypothesis with their log-probabilities."""
        out = []
        if hyp.frontier.top.type != TOKEN:
            probs = st.rule_probs.data[row]
            for pid in self.g.by_lhs[hyp.frontier.top.type]:
                out.append((ApplyRule(pid), math.log(float(probs[pid]) + EPS)))
            return out
        g = float(st.gate.data[row])
        pv = st.vocab_probs.data[row].astype(np.float64)
        mass: dict[str, float] = {}
        for k, tok in enumerate(self.space.vocab_tokens):
            mass[tok] = g * pv[k]
        if hyp.frontier.ntok > 0:
            mass[END] = g * pv[-1]
        cp = st.copy_probs.data[row]
        for i, tok in enumerate(nl_tokens):
            mass[tok] = mass.get(tok, 0.0) + (1 - g) * float(cp[i])
        for tok, m in mass.items():
            if m > 0:
                out.append((GenToken(tok), math.log(m + EPS)))
        return out

    def _beam(self, nl_tokens, beam_width, max_steps):
        with ad.no_grad():
            enc = self.encode(nl_tokens)
            h, c = self.initial_state(enc)
            live = [Hypothesis(FrontierState.initial(self.g), [], 0.0, h.data[0], c.data[0], [])]
            finished = []
            for t in range(max_steps):
                if not live or len(finished) >= beam_width:
                    break
                live.sort(key=lambda x: [action_key(a) for a in x.actions])
                st = self._row_step(enc, live)
                cands = []
                for r, hyp in enumerate(live):
                    for act, lp in self._candidates(st, r, hyp, nl_tokens):
                        cands.append((-(hyp.score + lp), r, action_key(act), act))
                cands.sort(key=lambda x: x[:3])
                keep = beam_width - len(finished)
                new_live = []
                for neg, r, _, act in cands[:keep]:
                    parent = live[r]
                    hyp = Hypothesis(parent.frontier.apply(act, self.g), parent.actions + [act], -neg,
                                     st.h.data[r], st.c.data[r], parent.states + [st.h.data[r]])
                    if hyp.frontier.complete:
                        hyp.done_at = t + 1
                        finished.append(hyp)
                    else:
                        new_live.append(hyp)
                live = new_live
        return finished

    def beam_search(self, nl_tokens, beam_width=5, max_steps=200) -> list[Hypothesis]:
        """Completed hypotheses, best first.

        The greedy derivation is always part of the final pool, so the top
        hypothesis never scores below greedy decoding.
        """
        if beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        pool = self._beam(nl_tokens, beam_width, max_steps)
        if beam_width > 1:
            seen = {tuple(h.actions) for h in pool}
            for h in self._beam(nl_tokens, 1, max_steps):
                if tuple(h.actions) not in seen:
                    pool.append(h)
        pool.sort(key=lambda x: (-x.score, x.done_at, [action_key(a) for a in x.actions]))
        return pool[:beam_width]

    def greedy(self, nl_tokens, max_steps=200):
        res = self._beam(nl_tokens, 1, max_steps)
        return res[0] if res else None
