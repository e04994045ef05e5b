"""Shared oracles for the test suite."""

import numpy as np

from genn2n import tensor as T


def fd_check(loss_fn, leaves, n_probes=100, h=1e-5, rng=None, rel_floor=1e-8):
    """Compare analytic gradients with central differences on random coordinates.

    ``loss_fn()`` builds a fresh scalar Tensor from the current leaf data.
    Returns the worst relative error over the probes, where the error is
    |a - n| / max(|a|, |n|, rel_floor) with a small absolute escape for
    gradients that are essentially zero on both sides.
    """
    rng = rng or np.random.default_rng(0)
    T.zero_grads(leaves)
    T.backward(loss_fn())
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in leaves]
    sizes = np.array([p.size for p in leaves])
    worst = 0.0
    for _ in range(n_probes):
        k = int(rng.choice(len(leaves), p=sizes / sizes.sum()))
        idx = int(rng.integers(leaves[k].size))
        flat = leaves[k].data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        up = float(loss_fn().data)
        flat[idx] = orig - h
        down = float(loss_fn().data)
        flat[idx] = orig
        num = (up - down) / (2 * h)
        ana = grads[k].reshape(-1)[idx]
        scale = max(abs(ana), abs(num), rel_floor)
        err = abs(ana - num) / scale
        if abs(ana - num) < 1e-9:
            err = 0.0
        worst = max(worst, err)
    return worst
