import numpy as np
import pytest
from scipy import stats
from scipy.special import ndtr

from oracles import dense_kron_conditional, dense_kron_quadratic
from phylocopula.phylo_latent import (
    LatentPositions,
    conditional_position_prior,
    dist_inclusion_probs,
    sample_dist_gamma,
    sample_position,
    sample_tree_scale,
    update_inclusion_probs,
)


def positions_for(H, sigma_sq=1.0, L=2, seed=0):
    rng = np.random.default_rng(seed)
    p = H.shape[0]
    return LatentPositions(rng.normal(0, 0.5, size=(L, p)), sigma_sq, H)


class TestConditionalPrior:
    def test_identity_tree(self):
        pos = positions_for(np.eye(3), sigma_sq=2.5)
        theta, psi = conditional_position_prior(1, pos)
        assert np.allclose(theta, 0.0)
        assert np.allclose(psi, 2.5 * np.eye(2))

    def test_two_node_closed_form(self):
        rho = 0.6
        H = np.array([[1.0, rho], [rho, 1.0]])
        pos = positions_for(H, sigma_sq=1.7)
        theta, psi = conditional_position_prior(0, pos)
        assert np.allclose(theta, rho * pos.t[:, 1])
        assert np.allclose(psi, 1.7 * (1 - rho**2) * np.eye(2))

    def test_matches_dense_kronecker_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((4, 4))
        H = a @ a.T
        d = np.sqrt(np.diag(H))
        H = H / np.outer(d, d)
        pos = positions_for(H, sigma_sq=2.0, L=2, seed=4)
        for j in range(4):
            theta, psi = conditional_position_prior(j, pos)
            mean, cov = dense_kron_conditional(H, 2.0, 2, j, pos.t)
            assert np.allclose(theta, mean, atol=1e-9)
            assert np.allclose(psi, cov, atol=1e-9)


class TestInclusionProbs:
    def test_orthogonal_vectors_give_half(self):
        t = np.array([[1.0, 0.0], [0.0, 1.0]])
        pi = update_inclusion_probs(t)
        assert pi[0, 1] == pytest.approx(0.5)

    def test_known_quantile(self):
        norm_sq = 1.6449
        t = np.zeros((2, 2))
        t[0, :] = np.sqrt(norm_sq)
        pi = update_inclusion_probs(t)
        assert pi[0, 1] == pytest.approx(0.9500047825, abs=1e-6)

    def test_zero_positions(self):
        pi = update_inclusion_probs(np.zeros((2, 5)))
        iu = np.triu_indices(5, k=1)
        assert np.allclose(pi[iu], 0.5)

    def test_entries_strictly_inside_unit_interval(self):
        t = np.array([[100.0, -100.0], [0.0, 0.0]])
        pi = update_inclusion_probs(t)
        assert 0.0 < pi[0, 1] < 1.0

    def test_exact_invariance_under_reflection(self):
        rng = np.random.default_rng(5)
        t = rng.standard_normal((2, 6))
        q = np.diag([-1.0, 1.0])  # orthogonal reflection: IEEE-exact products
        assert np.array_equal(update_inclusion_probs(t),
                              update_inclusion_probs(q @ t))
        # permutations reassociate the BLAS accumulation; equal to the ulp
        perm = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert np.allclose(update_inclusion_probs(t),
                           update_inclusion_probs(perm @ t), atol=1e-14)

    def test_invariance_under_rotation(self):
        rng = np.random.default_rng(6)
        t = rng.standard_normal((3, 5))
        theta = 0.7
        q = stats.special_ortho_group.rvs(3, random_state=7)
        assert np.allclose(update_inclusion_probs(t),
                           update_inclusion_probs(q @ t), atol=1e-12)


class TestSamplePosition:
    def test_degenerate_rest_gives_prior(self):
        # with all other positions at zero the conditional is the prior
        H = np.array([
            [1.0, 0.3, 0.3],
            [0.3, 1.0, 0.3],
            [0.3, 0.3, 1.0],
        ])
        rng = np.random.default_rng(8)
        adj = np.zeros((3, 3), dtype=np.int8)
        draws = np.empty((4000, 2))
        pos = LatentPositions(np.zeros((2, 3)), 1.3, H)
        psi_scalar = 1.3 / pos.corr_inv[0, 0]
        for i in range(draws.shape[0]):
            pos.t[:] = 0.0
            sample_position(0, pos, adj, rng)
            draws[i] = pos.t[:, 0]
        se = draws.std() / np.sqrt(draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0)) < 4 * se)
        assert np.cov(draws.T)[0, 0] == pytest.approx(psi_scalar, rel=0.1)
        assert np.cov(draws.T)[1, 1] == pytest.approx(psi_scalar, rel=0.1)

    def test_prior_edge_frequency_matches_quadrature(self):
        # joint Gibbs over (t, e) should keep P(e=1) at the prior value 1/2
        rng = np.random.default_rng(9)
        pos = LatentPositions(rng.normal(0, 0.1, (1, 2)), 1.0, np.eye(2))
        adj = np.zeros((2, 2), dtype=np.int8)
        hits = 0
        reps = 4000
        for _ in range(reps):
            pi = update_inclusion_probs(pos)
            e = int(rng.random() < pi[0, 1])
            adj[0, 1] = adj[1, 0] = e
            sample_position(0, pos, adj, rng)
            sample_position(1, pos, adj, rng)
            hits += e
        # oracle: E Phi(t1 t2) under independent standard normals is 1/2
        grid = np.random.default_rng(10).standard_normal((200_000, 2))
        oracle = ndtr(grid[:, 0] * grid[:, 1]).mean()
        se = np.sqrt(0.25 / reps) * 3 + 3 * ndtr(grid[:, 0] * grid[:, 1]).std() / np.sqrt(len(grid))
        assert abs(hits / reps - oracle) < 3 * 0.5 / np.sqrt(reps) + 0.01


class TestTreeScale:
    def test_zero_positions_prior(self):
        rng = np.random.default_rng(11)
        pos = LatentPositions(np.zeros((2, 3)), 1.0, np.eye(3))
        draws = np.empty(20_000)
        for i in range(draws.size):
            pos.t[:] = 0.0
            sample_tree_scale(pos, 2.0, 0.7, rng)
            draws[i] = pos.sigma_sq
        d, _ = stats.kstest(draws, stats.invgamma(3 * 2 / 2 + 2.0, scale=0.7).cdf)
        assert d < 0.02

    def test_quadratic_form_identity_case(self):
        rng = np.random.default_rng(12)
        pos = LatentPositions(np.array([[1.0], [1.0]]), 1.0, np.eye(1))
        draws = np.empty(20_000)
        for i in range(draws.size):
            pos.t[:] = 1.0
            sample_tree_scale(pos, 1.0, 0.5, rng)
            draws[i] = pos.sigma_sq
        # shape = 1*2/2 + 1 = 2, rate = 2/2 + 0.5 = 1.5
        d, _ = stats.kstest(draws, stats.invgamma(2.0, scale=1.5).cdf)
        assert d < 0.02

    def test_kronecker_matches_dense_oracle(self):
        rng = np.random.default_rng(13)
        a = rng.standard_normal((4, 4))
        H = a @ a.T
        d = np.sqrt(np.diag(H))
        H = H / np.outer(d, d)
        t = rng.standard_normal((2, 4))
        pos = LatentPositions(t, 1.0, H)
        quad_lib = float(np.sum((pos.t @ pos.corr_inv) * pos.t))
        quad_dense = dense_kron_quadratic(H, 2, t)
        assert quad_lib == pytest.approx(quad_dense, abs=1e-9)


class TestDistGamma:
    def chain(self, adj, dist, steps, rng, gamma0=1.0, step=0.5):
        gammas = np.empty(steps)
        g = gamma0
        for i in range(steps):
            g, _ = sample_dist_gamma(adj, dist, g, rng, step)
            gammas[i] = g
        return gammas

    def test_complete_graph_exponential_target(self):
        p = 3
        dist = np.array([
            [0.0, 0.4, 0.8],
            [0.4, 0.0, 0.6],
            [0.8, 0.6, 0.0],
        ])
        adj = np.ones((p, p), dtype=np.int8) - np.eye(p, dtype=np.int8)
        rate = 1.0 + dist[np.triu_indices(p, 1)].sum()
        rng = np.random.default_rng(14)
        gammas = self.chain(adj, dist, 40_000, rng)[2_000:]
        batches = gammas[: (len(gammas) // 40) * 40].reshape(40, -1).mean(axis=1)
        se = batches.std(ddof=1) / np.sqrt(len(batches))
        assert abs(gammas.mean() - 1.0 / rate) < 3 * se + 1e-3

    def test_empty_graph_large_distances_increase_gamma(self):
        p = 3
        dist = np.full((p, p), 5.0)
        np.fill_diagonal(dist, 0.0)
        adj = np.zeros((p, p), dtype=np.int8)
        rng = np.random.default_rng(15)
        gammas = self.chain(adj, dist, 20_000, rng)[1_000:]
        assert gammas.mean() > 1.0  # prior mean is 1

    def test_zero_distance_with_absent_edge_degenerate(self):
        dist = np.zeros((2, 2))
        adj = np.zeros((2, 2), dtype=np.int8)
        with pytest.raises(ValueError, match="zero density|zero tree distance"):
            sample_dist_gamma(adj, dist, 1.0, np.random.default_rng(0))

    def test_nonpositive_gamma_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            sample_dist_gamma(np.zeros((2, 2), dtype=np.int8),
                              np.ones((2, 2)), 0.0, np.random.default_rng(0))

    def test_dist_probs_clipped_open(self):
        pi = dist_inclusion_probs(1e-9, np.full((2, 2), 1e-9))
        assert 0.0 < pi[0, 1] < 1.0


def test_latent_positions_validation():
    with pytest.raises(ValueError, match="sigma"):
        LatentPositions(np.zeros((2, 3)), 0.0, np.eye(3))
    with pytest.raises(ValueError, match="L x p"):
        LatentPositions(np.zeros((2, 3)), 1.0, np.eye(2))
