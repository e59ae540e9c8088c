"""Synthetic scenario generation: random ultrametric trees, diffusion
positions, Bernoulli graphs, concentration matrices with an exact zero
pattern, and zero-inflated counts pushed through reference marginals."""

import json
import os

import numpy as np
from scipy.linalg import cho_factor, solve_triangular
from scipy.special import ndtr
from scipy.stats import nbinom

from .copula import CountMatrix, fit_ecdf, write_counts_csv
from .tree import PhyloTree, TreeNode, tree_correlation, write_matrix_csv
from .phylo_latent import update_inclusion_probs

__all__ = [
    "random_tree",
    "diffusion_positions",
    "graph_from_positions",
    "gwishart_sample",
    "gwishart_chain",
    "EmpiricalMarginals",
    "ZinbMarginals",
    "default_zinb_marginals",
    "synthetic_counts",
    "SimScenario",
    "build_scenario",
    "write_scenario_bundle",
    "read_true_edges_csv",
    "write_true_edges_csv",
]


def random_tree(p, rng, labels=None):
    """Random binary ultrametric tree with p terminals at depth 1.

    Topology comes from recursive uniform splits; the p - 1 split heights are
    sorted uniforms assigned in preorder so every child splits later than its
    parent. The root edge carries the first divergence time.
    """
    if p < 2:
        raise ValueError("need at least 2 terminals")
    if labels is None:
        labels = [f"t{i + 1}" for i in range(p)]

    def build(k):
        node = TreeNode()
        if k == 1:
            return node
        split = int(rng.integers(1, k))
        node.add_child(build(split))
        node.add_child(build(k - split))
        return node

    root = build(p)
    heights = np.sort(rng.uniform(size=p - 1))
    counter = 0
    # preorder walk assigning sorted heights to internal nodes
    order = []
    stack = [root]
    while stack:
        node = stack.pop()
        order.append(node)
        stack.extend(reversed(node.children))
    internal_iter = iter(heights)
    height_of = {}
    for node in order:
        if node.children:
            height_of[id(node)] = float(next(internal_iter))
        else:
            height_of[id(node)] = 1.0
            node.name = labels[counter]
            counter += 1
    for node in order:
        parent_h = height_of[id(node.parent)] if node.parent is not None else 0.0
        node.length = height_of[id(node)] - parent_h
        if node.length < 0:  # only possible if a child drew an earlier height
            raise AssertionError("split heights not monotone along a path")
    return PhyloTree(root)


def diffusion_positions(tree_or_corr, sigma_sq, n_dims, rng):
    """Draw L x p positions whose rows are N(0, sigma^2 H) for the tree."""
    if sigma_sq <= 0:
        raise ValueError("sigma^2 must be positive")
    if isinstance(tree_or_corr, PhyloTree):
        H = tree_correlation(tree_or_corr).matrix
    else:
        H = np.asarray(tree_or_corr, dtype=float)
    try:
        chol = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        chol = np.linalg.cholesky(H + 1e-10 * np.eye(H.shape[0]))
    g = rng.standard_normal((H.shape[0], n_dims))
    return np.sqrt(sigma_sq) * (chol @ g).T


def graph_from_positions(t_true, rng):
    """Independent Bernoulli edges with probit-of-inner-product probabilities."""
    pi = update_inclusion_probs(np.asarray(t_true, dtype=float))
    p = pi.shape[0]
    iu = np.triu_indices(p, k=1)
    draws = (rng.random(iu[0].shape) < pi[iu]).astype(np.int8)
    adj = np.zeros((p, p), dtype=np.int8)
    adj[iu] = draws
    return adj + adj.T


def _gwishart_sweep(omega, adj, df, rng):
    p = omega.shape[0]
    for j in range(p):
        keep = np.arange(p) != j
        inv11 = np.linalg.inv(omega[np.ix_(keep, keep)])
        nb = adj[keep, j] == 1
        u = np.zeros(p - 1)
        if nb.any():
            prec = inv11[np.ix_(nb, nb)]
            chol = cho_factor(prec, lower=True)
            noise = rng.standard_normal(int(nb.sum()))
            u[nb] = solve_triangular(chol[0], noise, lower=True, trans="T")
        v = rng.gamma(shape=0.5 * df, scale=2.0)
        omega[keep, j] = u
        omega[j, keep] = u
        omega[j, j] = v + u @ (inv11 @ u)
    return omega


def gwishart_sample(adj, df, rng, sweeps=200):
    """One draw with the zero pattern of ``adj`` forced exactly.

    Targets the graph-restricted Wishart with identity scale and shape
    parameter ``df`` (> 2), whose density carries |Omega|^{(df-2)/2}; on the
    empty graph the diagonals are chi-squared with df degrees of freedom, and
    on the complete graph the draw is an ordinary Wishart with df + p - 1
    degrees of freedom. Raises after ``sweeps`` iterations if the result is
    not positive definite.
    """
    if df <= 2:
        raise ValueError("df must exceed 2")
    adj = np.asarray(adj)
    p = adj.shape[0]
    omega = np.eye(p)
    for _ in range(sweeps):
        omega = _gwishart_sweep(omega, adj, df, rng)
    try:
        np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            f"graph-restricted Wishart draw not positive definite after {sweeps} sweeps"
        ) from None
    return omega


def gwishart_chain(adj, df, rng, n_draws, burn=200, thin=1):
    """Successive sweeps of the same chain; cheaper than independent draws
    when estimating moments."""
    adj = np.asarray(adj)
    omega = np.eye(adj.shape[0])
    for _ in range(burn):
        omega = _gwishart_sweep(omega, adj, df, rng)
    out = np.empty((n_draws, adj.shape[0], adj.shape[0]))
    for s in range(n_draws):
        for _ in range(thin):
            omega = _gwishart_sweep(omega, adj, df, rng)
        out[s] = omega
    return out


class EmpiricalMarginals:
    """Reference-count marginals inverted through the scaled empirical cdf."""

    def __init__(self, counts):
        self.labels = list(counts.col_ids)
        for j, lab in enumerate(self.labels):
            if np.unique(counts.values[:, j]).size < 2:
                raise ValueError(f"reference column {lab!r} has zero variance")
        self._ecdf = fit_ecdf(counts)

    @property
    def n_columns(self):
        return len(self.labels)

    def quantile(self, u, j):
        return self._ecdf.quantile(u, j)


class ZinbMarginals:
    """Zero-inflated negative binomial fallback marginals.

    Per column: extra zero mass, then a negative binomial with the given
    size (dispersion) and mean.
    """

    def __init__(self, zero_mass, size, mean):
        self.zero_mass = np.asarray(zero_mass, dtype=float)
        self.size = np.asarray(size, dtype=float)
        self.mean = np.asarray(mean, dtype=float)
        if not (self.zero_mass.shape == self.size.shape == self.mean.shape):
            raise ValueError("parameter arrays must share one shape")
        if np.any((self.zero_mass < 0) | (self.zero_mass >= 1)):
            raise ValueError("zero masses must lie in [0, 1)")
        if np.any(self.size <= 0) or np.any(self.mean <= 0):
            raise ValueError("size and mean must be positive")

    @property
    def n_columns(self):
        return self.zero_mass.shape[0]

    def quantile(self, u, j):
        u = np.asarray(u, dtype=float)
        zm = self.zero_mass[j]
        r = self.size[j]
        prob = r / (r + self.mean[j])
        rescaled = np.clip((u - zm) / (1.0 - zm), 0.0, 1.0 - 1e-12)
        vals = nbinom.ppf(rescaled, r, prob)
        return np.where(u <= zm, 0.0, vals)


def default_zinb_marginals(p, rng):
    """Marginals with a mostly 20-70% zero fraction and a few dense columns."""
    n_dense = max(1, round(0.12 * p))
    zero_mass = np.concatenate(
        [np.zeros(n_dense), rng.uniform(0.2, 0.7, size=p - n_dense)]
    )
    mean = 10.0 ** rng.uniform(1.0, 3.0, size=p)
    size = np.full(p, 0.7)
    return ZinbMarginals(zero_mass, size, mean)


def synthetic_counts(omega_true, marginals, n, rng, labels=None,
                     column_assignment=None):
    """Latent Gaussian draws pushed through marginal quantile functions.

    ``column_assignment[j]`` names the marginal column backing output column
    j (identity when omitted).
    """
    omega_true = np.asarray(omega_true, dtype=float)
    p = omega_true.shape[0]
    sigma = np.linalg.inv(omega_true)
    chol = np.linalg.cholesky(0.5 * (sigma + sigma.T))
    z = rng.standard_normal((n, p)) @ chol.T
    u = ndtr(z)
    if column_assignment is None:
        column_assignment = list(range(p))
    x = np.empty((n, p))
    for j in range(p):
        x[:, j] = marginals.quantile(u[:, j], column_assignment[j])
    if labels is None:
        labels = [f"t{j + 1}" for j in range(p)]
    rows = [f"s{i + 1}" for i in range(n)]
    return CountMatrix(x, rows, labels)


class SimScenario:
    """One synthetic dataset plus every ground-truth object behind it."""

    def __init__(self, tree, t_true, adj_true, omega_true, counts, manifest):
        self.tree = tree
        self.t_true = t_true
        self.adj_true = adj_true
        self.omega_true = omega_true
        self.counts = counts
        self.manifest = manifest


def build_scenario(p, n, seed, sigma_sq=3.0, n_dims=2, df=4.0,
                   marginals=None, tree=None, t_true=None, adj_true=None,
                   omega_true=None, gwishart_sweeps=200):
    """Generate one replicate of the synthetic protocol.

    Any of tree / positions / graph / concentration can be pinned to share
    ground truth across replicates while re-drawing the counts.
    """
    rng = np.random.default_rng(seed)
    if tree is None:
        tree = random_tree(p, rng)
    labels = tree.terminal_labels
    if t_true is None:
        t_true = diffusion_positions(tree, sigma_sq, n_dims, rng)
    if adj_true is None:
        adj_true = graph_from_positions(t_true, rng)
    if omega_true is None:
        omega_true = gwishart_sample(adj_true, df, rng, sweeps=gwishart_sweeps)
    if marginals is None:
        marginals = default_zinb_marginals(p, rng)
        assignment = list(range(p))
    elif marginals.n_columns >= p:
        assignment = [int(v) for v in rng.permutation(marginals.n_columns)[:p]]
    else:
        assignment = [int(v) for v in rng.integers(0, marginals.n_columns, size=p)]
    counts = synthetic_counts(omega_true, marginals, n, rng, labels=labels,
                              column_assignment=assignment)
    manifest = {
        "seed": int(seed),
        "p": int(p),
        "n": int(n),
        "sigma_sq": float(sigma_sq),
        "latent_dims": int(n_dims),
        "gwishart_df": float(df),
        "n_true_edges": int(adj_true[np.triu_indices(p, k=1)].sum()),
        "column_assignment": list(map(int, assignment)),
    }
    return SimScenario(tree, t_true, adj_true, omega_true, counts, manifest)


def write_true_edges_csv(path, adj, labels):
    p = len(labels)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("taxon_a,taxon_b,edge\n")
        for j in range(p):
            for k in range(j + 1, p):
                fh.write(f"{labels[j]},{labels[k]},{int(adj[j, k])}\n")


def read_true_edges_csv(path):
    pairs = {}
    order = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header.split(",")[:3] != ["taxon_a", "taxon_b", "edge"]:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            a, b, e = line.strip().split(",")
            pairs[(a, b)] = int(e)
            for name in (a, b):
                if name not in order:
                    order.append(name)
    p = len(order)
    idx = {name: i for i, name in enumerate(order)}
    adj = np.zeros((p, p), dtype=np.int8)
    for (a, b), e in pairs.items():
        adj[idx[a], idx[b]] = e
        adj[idx[b], idx[a]] = e
    return adj, order


def write_scenario_bundle(directory, scenario):
    """Persist one replicate: tree, truth, counts, and the manifest."""
    os.makedirs(directory, exist_ok=True)
    labels = scenario.counts.col_ids
    with open(os.path.join(directory, "tree.nwk"), "w", encoding="utf-8") as fh:
        fh.write(scenario.tree.to_newick() + "\n")
    write_true_edges_csv(os.path.join(directory, "true_edges.csv"),
                         scenario.adj_true, labels)
    write_matrix_csv(os.path.join(directory, "omega_true.csv"),
                     scenario.omega_true, labels)
    write_counts_csv(os.path.join(directory, "counts.csv"), scenario.counts)
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(scenario.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
