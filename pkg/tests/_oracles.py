"""Shared independent oracles for the test suite."""

import numpy as np
import scipy.linalg

from ekan.groups import sample_element

# Acceptance summary lines, printed at the end of the session by conftest.py.
ACCEPTANCE_REPORT = []


def finite_difference_check(model, x, rng, step=1e-5, max_entries=None):
    """Worst relative error between analytic and central-difference parameter gradients.

    The scalar objective is ``sum(f(x) * r)`` for a fixed random ``r``.
    """
    r = rng.normal(size=model.forward(x).shape)

    def objective():
        return float(np.sum(model.forward(x) * r))

    model.forward(x)
    model.backward(r)
    grads = {k: g.copy() for k, g in model.named_gradients()}
    worst = 0.0
    for key, p in model.named_parameters():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        an = grads[key].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + step
            up = objective()
            flat[i] = old - step
            down = objective()
            flat[i] = old
            fd = (up - down) / (2 * step)
            err = abs(fd - an[i]) / max(abs(fd), abs(an[i]), 1e-6)
            worst = max(worst, err)
    return worst


def commutant_dimension(rep_out, rep_in, rng, n_elements=12):
    """Independent oracle: dimension of {W : rho_o(g) W = W rho_i(g)} over sampled finite elements."""
    group = rep_in.group
    d_o, d_i = rep_out.dim, rep_in.dim
    rows = []
    elements = [sample_element(group, rng) for _ in range(n_elements)]
    elements += list(group.discrete_generators)
    for g in elements:
        ro, ri = rep_out.rho(g), rep_in.rho(g)
        cols = []
        for i in range(d_o):
            for j in range(d_i):
                e = np.zeros((d_o, d_i))
                e[i, j] = 1.0
                cols.append((ro @ e - e @ ri).ravel())
        rows.append(np.array(cols).T)
    return scipy.linalg.null_space(np.vstack(rows), rcond=1e-9).shape[1]
