"""Recurrent building blocks shared by the generator and the discriminator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Value, xavier_uniform


def init_lstm(params: ParameterStore, prefix: str, n_in: int, hidden: int, rng) -> None:
    params.add(f"{prefix}.W", xavier_uniform((n_in + hidden, 4 * hidden), n_in + hidden, 4 * hidden, rng))
    b = np.zeros(4 * hidden, dtype=np.float32)
    b[hidden : 2 * hidden] = 1.0  # forget gate
    params.add(f"{prefix}.b", b)


def lstm_cell(params: ParameterStore, prefix: str, x: Value, h: Value, c: Value):
    """One LSTM step on a batch; gate order is input, forget, output, candidate."""
    H = h.shape[-1]
    z = ad.add(ad.matmul(ad.concat([x, h], axis=1), params[f"{prefix}.W"]), params[f"{prefix}.b"])
    gates = ad.sigmoid(ad.slice(z, (slice(None), slice(0, 3 * H))))
    cand = ad.tanh(ad.slice(z, (slice(None), slice(3 * H, 4 * H))))
    i = ad.slice(gates, (slice(None), slice(0, H)))
    f = ad.slice(gates, (slice(None), slice(H, 2 * H)))
    o = ad.slice(gates, (slice(None), slice(2 * H, 3 * H)))
    c2 = ad.add(ad.mul(f, c), ad.mul(i, cand))
    h2 = ad.mul(o, ad.tanh(c2))
    return h2, c2


def dropout(x: Value, rate: float, rng) -> Value:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(np.float32) / (1.0 - rate)
    return ad.mul(x, keep)


def dropper(rate: float, rng):
    """A dropout function bound to ``rate`` and ``rng``, or None when inactive."""
    if rng is None or rate <= 0:
        return None
    return lambda v: dropout(v, rate, rng)


@dataclass
class EncoderStates:
    """Per-token states ``H`` (B, n, 2*hidden) and the summary (B, 2*hidden) of both final states."""

    H: Value
    summary: Value
    mask: np.ndarray  # (B, n) bool
    lengths: np.ndarray

    @property
    def n(self):
        return self.H.shape[1]


class BiEncoder:
    """Bidirectional LSTM over token ids; ``h_t`` is [left-to-right : right-to-left]."""

    def __init__(self, params: ParameterStore, prefix: str, vocab_size: int, embed: int, hidden: int, rng):
        self.params, self.prefix, self.hidden = params, prefix, hidden
        params.add(f"{prefix}.emb", xavier_uniform((vocab_size, embed), vocab_size, embed, rng))
        init_lstm(params, f"{prefix}.fwd", embed, hidden, rng)
        init_lstm(params, f"{prefix}.bwd", embed, hidden, rng)

    def __call__(self, id_lists, drop=None) -> EncoderStates:
        if any(len(ids) == 0 for ids in id_lists):
            raise ValueError("encode: empty input sequence")
        B = len(id_lists)
        lengths = np.array([len(x) for x in id_lists])
        n = int(lengths.max())
        ids = np.zeros((B, n), dtype=np.int64)
        mask = np.zeros((B, n), dtype=bool)
        for b, x in enumerate(id_lists):
            ids[b, : len(x)] = x
            mask[b, : len(x)] = True
        p = self.params
        emb = ad.embedding_lookup(p[f"{self.prefix}.emb"], ids)
        if drop is not None:
            emb = drop(emb)
        xs = [ad.slice(emb, (slice(None), t)) for t in range(n)]
        zero = Value(np.zeros((B, self.hidden)))
        h, c = zero, zero
        fwd = []
        # positions past a row's length are never read, so no masking here
        for t in range(n):
            h, c = lstm_cell(p, f"{self.prefix}.fwd", xs[t], h, c)
            fwd.append(h)
        h, c = zero, zero
        bwd = [None] * n
        ragged = not mask.all()
        for t in reversed(range(n)):
            h, c = lstm_cell(p, f"{self.prefix}.bwd", xs[t], h, c)
            if ragged and not mask[:, t].all():
                m = Value(mask[:, t : t + 1].astype(np.float32))
                h, c = ad.mul(h, m), ad.mul(c, m)
            bwd[t] = h
        F = ad.stack(fwd, axis=1)
        H = ad.concat([F, ad.stack(bwd, axis=1)], axis=2)
        # each direction's final state: left-to-right at the last token, right-to-left at the first
        summary = ad.concat([ad.pick(F, lengths - 1), bwd[0]], axis=1)
        return EncoderStates(H, summary, mask, lengths)
