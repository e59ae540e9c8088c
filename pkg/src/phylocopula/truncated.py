"""One-sided truncated normal draws.

Inverse-CDF sampling covers moderate truncation; once the standardized bound
is deeper than 5 standard deviations in the tail, an exponential-proposal
rejection sampler takes over for numerical stability.
"""

import numpy as np
from scipy.special import ndtr, ndtri

TAIL_SWITCH = 5.0


def _tail_lower(a, rng):
    # Y ~ N(0,1) given Y > a, for large positive a (exponential proposal).
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    todo = np.ones(a.shape, dtype=bool)
    alpha = 0.5 * (a + np.sqrt(a * a + 4.0))
    while np.any(todo):
        k = int(todo.sum())
        z = a[todo] - np.log1p(-rng.random(k)) / alpha[todo]
        accept = rng.random(k) <= np.exp(-0.5 * (z - alpha[todo]) ** 2)
        hit = np.where(todo)[0][accept]
        out[hit] = z[accept]
        todo[hit] = False
    return out


def std_below(bound, rng):
    """Draw X ~ N(0, 1) conditioned on X < bound, elementwise."""
    b = np.atleast_1d(np.asarray(bound, dtype=float))
    out = np.empty_like(b)
    easy = b > -TAIL_SWITCH
    if np.any(easy):
        u = 1.0 - rng.random(int(easy.sum()))  # in (0, 1]
        out[easy] = ndtri(u * ndtr(b[easy]))
    hard = ~easy
    if np.any(hard):
        out[hard] = -_tail_lower(-b[hard], rng)
    if np.isscalar(bound) or np.ndim(bound) == 0:
        return float(out[0])
    return out


def std_above(bound, rng):
    """Draw X ~ N(0, 1) conditioned on X > bound, elementwise."""
    return -std_below(-np.asarray(bound, dtype=float), rng)


def normal_below(mean, sd, bound, rng):
    """Draw X ~ N(mean, sd^2) conditioned on X < bound, elementwise."""
    mean = np.asarray(mean, dtype=float)
    z = std_below((np.asarray(bound, dtype=float) - mean) / sd, rng)
    return mean + sd * z


def normal_signed(mean, positive, rng):
    """Draw X ~ N(mean, 1) truncated to X > 0 where ``positive`` else X < 0."""
    mean = np.asarray(mean, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    out = np.empty_like(mean)
    if np.any(positive):
        out[positive] = mean[positive] + std_above(-mean[positive], rng)
    neg = ~positive
    if np.any(neg):
        out[neg] = mean[neg] + std_below(-mean[neg], rng)
    return out
