"""Central finite-difference audit shared by the gradient tests."""

import numpy as np

from octokit import autograd as ag


def fd_audit(params, loss_fn, n=200, h=1e-4, seed=0, floor=1e-5):
    """Largest relative error between reverse-mode and central differences.

    ``n`` coordinates are drawn uniformly over all parameter entries. The
    denominator is floored so coordinates with near-zero gradient are judged
    on an absolute scale.
    """
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    _, g = ag.grad(params, loss_fn)
    names = list(params)
    sizes = np.array([params[k].size for k in names])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n, int(sizes.sum())), replace=False)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    worst = 0.0
    for f in flat:
        k = int(np.searchsorted(starts, f, side="right") - 1)
        name, i = names[k], int(f - starts[k])
        arr = params[name].reshape(-1)
        old = arr[i]
        arr[i] = old + h
        up = float(loss_fn({k2: ag.Tensor(v) for k2, v in params.items()}).data)
        arr[i] = old - h
        down = float(loss_fn({k2: ag.Tensor(v) for k2, v in params.items()}).data)
        arr[i] = old
        num = (up - down) / (2 * h)
        ana = float(g[name].reshape(-1)[i])
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst
