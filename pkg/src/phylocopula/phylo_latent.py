"""Latent positions tying tree structure to edge inclusion probabilities.

Each node owns an L-vector whose rows are a priori Gaussian with covariance
sigma^2 H, H being the shared-ancestry correlation of the tree; the probit
of inner products gives edge probabilities. Updates use the classic
auxiliary-variable scheme for probit likelihoods.
"""

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import ndtr

from . import truncated

__all__ = [
    "LatentPositions",
    "conditional_position_prior",
    "sample_position",
    "update_inclusion_probs",
    "sample_tree_scale",
    "sample_dist_gamma",
    "dist_inclusion_probs",
]

PROB_CLIP = 1e-12


class LatentPositions:
    """L x p positions, the tree scale sigma^2, and the fixed correlation H."""

    def __init__(self, t, sigma_sq, corr):
        t = np.asarray(t, dtype=float)
        corr = np.asarray(corr, dtype=float)
        if t.ndim != 2 or corr.shape != (t.shape[1], t.shape[1]):
            raise ValueError("positions must be L x p matching the correlation size")
        if sigma_sq <= 0:
            raise ValueError("sigma^2 must be positive")
        self.t = t
        self.sigma_sq = float(sigma_sq)
        self.corr = corr
        try:
            self.corr_inv = np.linalg.inv(corr)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(
                "tree correlation is singular even after the PSD guard"
            ) from None

    @property
    def n_dims(self):
        return self.t.shape[0]

    @property
    def n_nodes(self):
        return self.t.shape[1]


def conditional_position_prior(j, pos):
    """Gaussian prior of position j given all others: mean and covariance.

    The joint prior of the stacked positions has covariance
    sigma^2 (H kron I_L), so conditioning reduces to entries of H^{-1}: the
    covariance is (sigma^2 / H^{-1}[j,j]) I_L and the mean is a weighted
    combination of the other columns.
    """
    hinv = pos.corr_inv
    keep = np.arange(pos.n_nodes) != j
    theta = -(pos.t[:, keep] @ hinv[keep, j]) / hinv[j, j]
    psi = (pos.sigma_sq / hinv[j, j]) * np.eye(pos.n_dims)
    return theta, psi


def sample_position(j, pos, adj, rng):
    """Auxiliary-variable Gibbs update of position j given the adjacency.

    Draws one-sided truncated normal auxiliaries for every potential edge at
    node j, then the exact Gaussian full conditional of the position.
    """
    keep = np.arange(pos.n_nodes) != j
    t_rest = pos.t[:, keep]
    theta, _ = conditional_position_prior(j, pos)
    psi_inv = pos.corr_inv[j, j] / pos.sigma_sq  # scalar; prior cov is isotropic

    inner = t_rest.T @ pos.t[:, j]
    y = truncated.normal_signed(inner, adj[keep, j] == 1, rng)

    precision = t_rest @ t_rest.T + psi_inv * np.eye(pos.n_dims)
    try:
        chol = cho_factor(precision, lower=True)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            f"position {j}: conditional precision not positive definite"
        ) from None
    mean = cho_solve(chol, t_rest @ y + psi_inv * theta)
    noise = solve_triangular(chol[0], rng.standard_normal(pos.n_dims),
                             lower=True, trans="T")
    pos.t[:, j] = mean + noise
    return pos


def update_inclusion_probs(pos_or_t):
    """Probit of pairwise inner products, clipped into the open unit interval."""
    t = pos_or_t.t if isinstance(pos_or_t, LatentPositions) else np.asarray(pos_or_t)
    pi = ndtr(t.T @ t)
    np.fill_diagonal(pi, 0.5)  # unused; keeps the matrix well-formed
    return np.clip(pi, PROB_CLIP, 1.0 - PROB_CLIP)


def sample_tree_scale(pos, a_sigma, b_sigma, rng):
    """Conjugate inverse-gamma update of sigma^2 given the positions.

    The quadratic form vec(T)' (H kron I_L)^{-1} vec(T) collapses to
    trace(T H^{-1} T').
    """
    p, L = pos.n_nodes, pos.n_dims
    quad = float(np.sum((pos.t @ pos.corr_inv) * pos.t))
    shape = 0.5 * p * L + a_sigma
    rate = 0.5 * quad + b_sigma
    pos.sigma_sq = rate / rng.gamma(shape=shape, scale=1.0)
    return pos


def dist_inclusion_probs(gamma, dist):
    """Distance-decay edge probabilities exp(-gamma * d), clipped open."""
    pi = np.exp(-gamma * dist)
    np.fill_diagonal(pi, 0.5)
    return np.clip(pi, PROB_CLIP, 1.0 - PROB_CLIP)


def _dist_log_target(log_gamma, adj, dist):
    # log p(gamma | E) + log-Jacobian of the log transform
    gamma = np.exp(log_gamma)
    iu = np.triu_indices(adj.shape[0], k=1)
    e = adj[iu]
    d = dist[iu]
    with np.errstate(divide="ignore"):
        gd = gamma * d
        present = -gd[e == 1].sum()
        absent_gd = gd[e == 0]
        if np.any(absent_gd == 0):
            return -np.inf  # zero distance forces probability one; impossible data
        absent = np.log(-np.expm1(-absent_gd)).sum()
    return log_gamma - gamma + present + absent


def sample_dist_gamma(adj, dist, gamma, rng, step=0.5):
    """One Metropolis step for the distance-decay rate on the log scale.

    Returns ``(gamma, accepted)``; the caller adapts ``step`` during burn-in.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    log_gamma = np.log(gamma)
    current = _dist_log_target(log_gamma, adj, dist)
    if not np.isfinite(current):
        raise ValueError(
            "distance-decay target has zero density: a zero tree distance "
            "coexists with an absent edge"
        )
    proposal = log_gamma + step * rng.standard_normal()
    cand = _dist_log_target(proposal, adj, dist)
    if np.log(1.0 - rng.random()) < cand - current:
        return float(np.exp(proposal)), True
    return float(gamma), False
