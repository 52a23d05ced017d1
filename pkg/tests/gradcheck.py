"""Central finite differences in float64, shared by the gradient tests."""

import numpy as np

from astgan import autodiff as ad

H = 1e-3


def rel_error(a, n):
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))))


def check_grad(fn, inputs, h=H):
    """Max relative error between analytic and numeric gradients of scalar ``fn``.

    Relative error is |a - n| / max(1, |a|, |n|) per entry, so gradients
    near zero are compared on an absolute scale.
    """
    with ad.precision(np.float64):
        leaves = [ad.Value(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
        ad.backward(fn(*leaves))
        worst = 0.0
        for i, x in enumerate(inputs):
            analytic = leaves[i].grad.copy()
            numeric = np.zeros_like(analytic)
            for idx in np.ndindex(x.shape):
                vals = []
                for sign in (1, -1):
                    xs = [np.array(v, dtype=np.float64) for v in inputs]
                    xs[i][idx] += sign * h
                    vals.append(fn(*[ad.Value(v) for v in xs]).item())
                numeric[idx] = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, rel_error(analytic, numeric))
    return worst


def check_param_grad(loss_fn, params: ad.ParameterStore, rng, n_entries=40, h=H):
    """Finite-difference check of ``loss_fn()`` against a random subset of parameter entries.

    Parameters are promoted to float64 for the duration of the check.
    """
    with ad.precision(np.float64):
        saved = params.arrays()
        for v in params.entries.values():
            v.data = v.data.astype(np.float64)
        try:
            params.zero_grad()
            ad.backward(loss_fn())
            names = list(params)
            worst = 0.0
            for _ in range(n_entries):
                name = names[int(rng.integers(len(names)))]
                v = params[name]
                idx = tuple(int(rng.integers(s)) for s in v.shape)
                a = float(v.grad[idx])
                old = v.data[idx]
                with ad.no_grad():
                    v.data[idx] = old + h
                    up = loss_fn().item()
                    v.data[idx] = old - h
                    down = loss_fn().item()
                v.data[idx] = old
                n = (up - down) / (2 * h)
                worst = max(worst, abs(a - n) / max(1.0, abs(a), abs(n)))
        finally:
            params.zero_grad()
            params.load_arrays(saved)
    return worst
