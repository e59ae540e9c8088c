"""Full Gibbs sweep orchestration: burn-in, thinning, multi-chain runs,
posterior accumulation, convergence diagnostics, and a joint-distribution
correctness harness for the parameter kernel."""

import math
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import graph_prior, phylo_latent
from .analyze import PosteriorSummary
from .copula import (
    CountMatrix,
    build_latent_state,
    fit_ecdf,
    latent_observed,
    sample_thresholds,
    sample_truncated_z,
)
from .graph_prior import (
    GraphState,
    assert_spd,
    sample_spike_variance,
    update_omega_column,
)
from .phylo_latent import (
    LatentPositions,
    dist_inclusion_probs,
    sample_dist_gamma,
    sample_position,
    sample_tree_scale,
    update_inclusion_probs,
)
from .tree import PhyloTree, TreeCorrelation, TreeDistance, tree_correlation, tree_distance

__all__ = [
    "SamplerConfig",
    "ChainTrace",
    "ChainError",
    "run_chain",
    "run_chains",
    "geweke_joint_test",
    "GewekeReport",
    "potential_scale_reduction",
    "write_binary_trace",
    "read_binary_trace",
]

VARIANTS = ("phylo", "oracle", "dist")


@dataclass
class SamplerConfig:
    """Run settings; defaults follow the reference simulation protocol."""

    variant: str = "phylo"
    iterations: int = 5500
    burn_in: int = 500
    thin: int = 1
    chains: int = 1
    seed: int = 0
    a_sigma: float = 0.001
    b_sigma: float = 0.001
    a_v0: float = 0.001
    b_v0: float = 0.001
    h: float = 2500.0
    lam: float = 1.0
    latent_dims: int = 2
    oracle_edge_count: int | None = None
    workers: int = 1
    store_omega_trace: bool = False
    random_column_order: bool = False
    dist_step: float = 0.5
    n_tracked: int = 10

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.iterations <= 0 or self.burn_in < 0 or self.burn_in >= self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if self.chains < 1:
            raise ValueError("chains must be at least 1")
        if self.h <= 1:
            raise ValueError("slab multiplier h must exceed 1")
        for name in ("a_sigma", "b_sigma", "a_v0", "b_v0", "lam"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.latent_dims < 1:
            raise ValueError("latent_dims must be at least 1")
        if self.variant == "oracle":
            if self.oracle_edge_count is None or self.oracle_edge_count < 0:
                raise ValueError("oracle variant requires oracle_edge_count >= 0")
        return self

    @property
    def n_retained(self):
        return (self.iterations - self.burn_in) // self.thin


class ChainError(RuntimeError):
    pass


@dataclass
class ChainTrace:
    seed: int
    labels: list
    n_retained: int
    e_sum: np.ndarray
    omega_sum: np.ndarray
    e_bits: np.ndarray
    sigma_sq: np.ndarray | None
    v0_sq: np.ndarray
    gamma: np.ndarray | None
    tracked_pairs: list
    tracked_omega: np.ndarray
    t_sum: np.ndarray | None
    omega_trace: np.ndarray | None
    timings: dict
    dist_acceptance: float | None

    def packed_edge_draws(self):
        return self.e_bits

    def edge_draw(self, s):
        """Unpack retained draw ``s`` into a symmetric adjacency matrix."""
        p = len(self.labels)
        m = p * (p - 1) // 2
        bits = np.unpackbits(self.e_bits[s])[:m]
        adj = np.zeros((p, p), dtype=np.int8)
        adj[np.triu_indices(p, k=1)] = bits
        return adj + adj.T


def _align_matrix(matrix, labels, wanted):
    if set(labels) != set(wanted):
        missing = sorted(set(wanted) - set(labels))
        extra = sorted(set(labels) - set(wanted))
        raise ValueError(
            f"tree terminals do not match data columns (missing {missing}, extra {extra})"
        )
    order = [labels.index(w) for w in wanted]
    idx = np.asarray(order)
    return matrix[np.ix_(idx, idx)]


def _resolve_prior(config, data, tree):
    """Return the aligned H (phylo) or D (dist) matrix, or None for oracle."""
    if config.variant == "oracle":
        return None
    if tree is None:
        raise ValueError(f"variant {config.variant!r} requires a tree")
    if isinstance(tree, PhyloTree):
        obj = tree_correlation(tree) if config.variant == "phylo" else tree_distance(tree)
        return _align_matrix(obj.matrix, obj.labels, data.col_ids)
    if isinstance(tree, TreeCorrelation):
        if config.variant != "phylo":
            raise ValueError("dist variant needs a TreeDistance or PhyloTree")
        return _align_matrix(tree.matrix, tree.labels, data.col_ids)
    if isinstance(tree, TreeDistance):
        if config.variant != "dist":
            raise ValueError("phylo variant needs a TreeCorrelation or PhyloTree")
        return _align_matrix(tree.matrix, tree.labels, data.col_ids)
    raise TypeError("tree must be a PhyloTree, TreeCorrelation, or TreeDistance")


def _graph_block(graph, S, n_rows, pi, rng, a_v0, b_v0, column_order):
    for col in column_order:
        update_omega_column(graph, S, n_rows, col, rng)
    graph_prior.sample_edges(graph, pi, rng)
    sample_spike_variance(graph, rng, a_v0, b_v0)
    return graph


def _phylo_block(positions, adj, a_sigma, b_sigma, rng):
    for j in range(positions.n_nodes):
        sample_position(j, positions, adj, rng)
    pi = update_inclusion_probs(positions)
    sample_tree_scale(positions, a_sigma, b_sigma, rng)
    return pi


def _oracle_probs(p, edge_count):
    total = p * (p - 1) // 2
    value = min(max(edge_count / total, phylo_latent.PROB_CLIP),
                1.0 - phylo_latent.PROB_CLIP)
    pi = np.full((p, p), value)
    np.fill_diagonal(pi, 0.5)
    return pi


def _default_tracked(p, seed, count):
    m = p * (p - 1) // 2
    rng = np.random.default_rng(seed)
    chosen = rng.choice(m, size=min(count, m), replace=False)
    iu = np.triu_indices(p, k=1)
    return [(int(iu[0][c]), int(iu[1][c])) for c in sorted(chosen)]


def run_chain(config, data, tree, seed, tracked_pairs=None):
    """Run one MCMC chain and return its trace.

    ``tree`` may be a PhyloTree or a precomputed prior matrix wrapper; it is
    ignored for the oracle variant. Errors propagate annotated with the
    iteration index.
    """
    config.validate()
    if not isinstance(data, CountMatrix):
        raise TypeError("data must be a CountMatrix")
    prior_matrix = _resolve_prior(config, data, tree)
    rng = np.random.default_rng(seed)
    n, p = data.shape
    if tracked_pairs is None:
        tracked_pairs = _default_tracked(p, config.seed, config.n_tracked)

    t_setup = time.perf_counter()
    ecdf = fit_ecdf(data)
    z_hat, mask = latent_observed(data, ecdf)
    state = build_latent_state(z_hat, mask)
    graph = GraphState(np.eye(p), np.zeros((p, p), dtype=np.int8),
                       v0_sq=0.01, h=config.h, lam=config.lam)

    positions = None
    gamma = None
    step = config.dist_step
    if config.variant == "phylo":
        t0 = rng.normal(0.0, 0.1, size=(config.latent_dims, p))
        positions = LatentPositions(t0, 1.0, prior_matrix)
        pi = update_inclusion_probs(positions)
    elif config.variant == "oracle":
        pi = _oracle_probs(p, config.oracle_edge_count)
    else:
        gamma = 1.0
        pi = dist_inclusion_probs(gamma, prior_matrix)

    n_ret = config.n_retained
    m = p * (p - 1) // 2
    nbytes = (m + 7) // 8
    e_sum = np.zeros((p, p))
    omega_sum = np.zeros((p, p))
    e_bits = np.zeros((n_ret, nbytes), dtype=np.uint8)
    v0_trace = np.empty(n_ret)
    sigma_trace = np.empty(n_ret) if config.variant == "phylo" else None
    gamma_trace = np.empty(n_ret) if config.variant == "dist" else None
    tracked_omega = np.empty((n_ret, len(tracked_pairs)))
    t_sum = np.zeros((config.latent_dims, p)) if config.variant == "phylo" else None
    omega_trace = (np.empty((n_ret, p, p)) if config.store_omega_trace else None)
    iu = np.triu_indices(p, k=1)

    accept_count = 0
    window_accepts = 0
    window_size = 50
    setup_seconds = time.perf_counter() - t_setup

    t_sample = time.perf_counter()
    kept = 0
    for it in range(1, config.iterations + 1):
        try:
            sample_truncated_z(state, graph.omega, rng)
            sample_thresholds(state, rng)
            state.check_invariants()
            S = state.z.T @ state.z
            order = (rng.permutation(p) if config.random_column_order
                     else np.arange(p))
            _graph_block(graph, S, n, pi, rng, config.a_v0, config.b_v0, order)
            assert_spd(graph.omega, "concentration matrix")
            if config.variant == "phylo":
                pi = _phylo_block(positions, graph.adj,
                                  config.a_sigma, config.b_sigma, rng)
            elif config.variant == "dist":
                gamma, accepted = sample_dist_gamma(
                    graph.adj, prior_matrix, gamma, rng, step)
                accept_count += accepted
                window_accepts += accepted
                if it <= config.burn_in and it % window_size == 0:
                    rate = window_accepts / window_size
                    if rate < 0.30:
                        step *= 0.8
                    elif rate > 0.45:
                        step *= 1.25
                    window_accepts = 0
                pi = dist_inclusion_probs(gamma, prior_matrix)
        except Exception as exc:
            raise ChainError(f"iteration {it}: {exc}") from exc

        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            e_sum += graph.adj
            omega_sum += graph.omega
            e_bits[kept] = np.packbits(graph.adj[iu].astype(np.uint8))
            v0_trace[kept] = graph.v0_sq
            if sigma_trace is not None:
                sigma_trace[kept] = positions.sigma_sq
            if gamma_trace is not None:
                gamma_trace[kept] = gamma
            tracked_omega[kept] = [graph.omega[j, k] for j, k in tracked_pairs]
            if t_sum is not None:
                t_sum += positions.t
            if omega_trace is not None:
                omega_trace[kept] = graph.omega
            kept += 1

    timings = {
        "setup_seconds": setup_seconds,
        "sampling_seconds": time.perf_counter() - t_sample,
    }
    return ChainTrace(
        seed=int(seed),
        labels=list(data.col_ids),
        n_retained=kept,
        e_sum=e_sum,
        omega_sum=omega_sum,
        e_bits=e_bits,
        sigma_sq=sigma_trace,
        v0_sq=v0_trace,
        gamma=gamma_trace,
        tracked_pairs=tracked_pairs,
        tracked_omega=tracked_omega,
        t_sum=t_sum,
        omega_trace=omega_trace,
        timings=timings,
        dist_acceptance=(accept_count / config.iterations
                         if config.variant == "dist" else None),
    )


def _chain_job(args):
    config, data_payload, prior_payload, seed, tracked = args
    data = CountMatrix(*data_payload)
    config = SamplerConfig(**config)
    tree = None
    if prior_payload is not None:
        kind, matrix, labels = prior_payload
        tree = (TreeCorrelation(matrix, labels) if kind == "corr"
                else TreeDistance(matrix, labels))
    return run_chain(config, data, tree, seed, tracked_pairs=tracked)


def potential_scale_reduction(traces):
    """Gelman-Rubin statistic across chains (rows = chains)."""
    x = np.asarray(traces, dtype=float)
    m, n = x.shape
    if m < 2 or n < 2:
        return float("nan")
    within = x.var(axis=1, ddof=1).mean()
    between_over_n = x.mean(axis=1).var(ddof=1)
    if within == 0:
        return float("nan")
    var_plus = (n - 1) / n * within + between_over_n
    return float(np.sqrt(var_plus / within))


def run_chains(config, data, tree, chain_seeds=None):
    """Run the configured number of chains and pool their retained draws.

    Chain seeds default to seed + 0 .. seed + chains - 1; explicit seeds are
    rejected if they collide. Results are independent of the worker count.
    """
    config.validate()
    if chain_seeds is None:
        chain_seeds = [config.seed + c for c in range(config.chains)]
    if len(chain_seeds) != config.chains:
        raise ValueError("need one seed per chain")
    if len(set(chain_seeds)) != len(chain_seeds):
        raise ValueError(f"chain seeds collide: {chain_seeds}")

    p = data.shape[1]
    tracked = _default_tracked(p, config.seed, config.n_tracked)
    prior_matrix = _resolve_prior(config, data, tree)
    prior_payload = None
    if prior_matrix is not None:
        kind = "corr" if config.variant == "phylo" else "dist"
        prior_payload = (kind, prior_matrix, list(data.col_ids))

    jobs = [
        (asdict(config), (data.values, data.row_ids, data.col_ids),
         prior_payload, seed, tracked)
        for seed in chain_seeds
    ]
    traces = []
    if config.workers > 1 and config.chains > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(_chain_job, job) for job in jobs]
            for c, fut in enumerate(futures):
                try:
                    traces.append(fut.result())
                except Exception as exc:
                    raise ChainError(
                        f"chain {c} (seed {chain_seeds[c]}): {exc}") from exc
    else:
        for c, job in enumerate(jobs):
            try:
                traces.append(_chain_job(job))
            except Exception as exc:
                raise ChainError(f"chain {c} (seed {chain_seeds[c]}): {exc}") from exc

    total = sum(t.n_retained for t in traces)
    pi_hat = sum(t.e_sum for t in traces) / total
    omega_hat = sum(t.omega_sum for t in traces) / total
    pi_hat = 0.5 * (pi_hat + pi_hat.T)
    np.fill_diagonal(pi_hat, 0.0)
    omega_hat = 0.5 * (omega_hat + omega_hat.T)

    rhat = {}
    if config.chains >= 2:
        rhat["v0_sq"] = potential_scale_reduction([t.v0_sq for t in traces])
        if config.variant == "phylo":
            rhat["sigma_sq"] = potential_scale_reduction(
                [t.sigma_sq for t in traces])
        if config.variant == "dist":
            rhat["gamma"] = potential_scale_reduction([t.gamma for t in traces])
        for i, (j, k) in enumerate(tracked):
            rhat[f"omega_{j}_{k}"] = potential_scale_reduction(
                [t.tracked_omega[:, i] for t in traces])

    report = {
        "variant": config.variant,
        "chain_seeds": [int(s) for s in chain_seeds],
        "retained_per_chain": [t.n_retained for t in traces],
        "retained_total": total,
        "rhat": rhat,
        "timings": [t.timings for t in traces],
        "dist_acceptance": [t.dist_acceptance for t in traces],
        "config": asdict(config),
    }
    if config.variant == "phylo":
        report["t_mean"] = sum(t.t_sum for t in traces) / total
    summary = PosteriorSummary(list(data.col_ids), pi_hat, omega_hat, report)
    summary.chain_traces = traces
    return summary


# ---------------------------------------------------------------------------
# Joint-distribution correctness harness
# ---------------------------------------------------------------------------

GEWEKE_DEFAULTS = dict(a_sigma=3.0, b_sigma=2.0, a_v0=3.0, b_v0=0.3,
                       h=4.0, lam=0.5)


@dataclass
class GewekeReport:
    rows: list = field(default_factory=list)
    reps: int = 0

    @property
    def max_abs_z(self):
        return max((abs(r["z"]) for r in self.rows), default=0.0)

    def passed(self, limit=4.0):
        return all(abs(r["z"]) < limit for r in self.rows)

    def __str__(self):
        lines = [f"{'statistic':<18}{'prior-sim':>12}{'gibbs-sim':>12}{'z':>8}"]
        for r in self.rows:
            lines.append(
                f"{r['name']:<18}{r['mc_mean']:>12.4f}{r['sc_mean']:>12.4f}"
                f"{r['z']:>8.2f}"
            )
        return "\n".join(lines)


def _prior_joint_draw(config, p, H, D, rng, max_tries=100000):
    """Exact draw from the product-form joint prior via rejection on SPD."""
    iu = np.triu_indices(p, k=1)
    for _ in range(max_tries):
        extras = {}
        if config.variant == "phylo":
            sigma_sq = config.b_sigma / rng.gamma(config.a_sigma, 1.0)
            t = np.linalg.cholesky(H) @ rng.standard_normal((p, config.latent_dims))
            t = np.sqrt(sigma_sq) * t.T
            pi = update_inclusion_probs(t)
            extras = {"sigma_sq": sigma_sq, "t": t}
        elif config.variant == "oracle":
            pi = _oracle_probs(p, config.oracle_edge_count)
        else:
            gamma = rng.exponential(1.0)
            pi = dist_inclusion_probs(gamma, D)
            extras = {"gamma": gamma}
        v0_sq = config.b_v0 / rng.gamma(config.a_v0, 1.0)
        e = (rng.random(iu[0].shape) < pi[iu]).astype(np.int8)
        adj = np.zeros((p, p), dtype=np.int8)
        adj[iu] = e
        adj = adj + adj.T
        sd = np.sqrt(v0_sq * np.power(config.h, e, dtype=float))
        omega = np.zeros((p, p))
        omega[iu] = rng.normal(0.0, sd)
        omega = omega + omega.T
        omega[np.diag_indices(p)] = rng.exponential(2.0 / config.lam, size=p)
        try:
            np.linalg.cholesky(omega)
        except np.linalg.LinAlgError:
            continue
        return omega, adj, v0_sq, extras
    raise RuntimeError("prior rejection sampler failed; loosen hyperparameters")


def _geweke_stats(config, omega, adj, v0_sq, extras, iu):
    stats = {}
    for i, (j, k) in enumerate(zip(*iu)):
        stats[f"omega_{j}{k}"] = omega[j, k]
        stats[f"edge_{j}{k}"] = float(adj[j, k])
    for j in range(omega.shape[0]):
        stats[f"omega_{j}{j}"] = omega[j, j]
    stats["omega_sq_01"] = omega[iu[0][0], iu[1][0]] ** 2
    stats["v0_sq"] = v0_sq
    if config.variant == "phylo":
        stats["sigma_sq"] = extras["sigma_sq"]
        stats["t_norm_sq"] = float(np.sum(extras["t"] ** 2))
    if config.variant == "dist":
        stats["gamma"] = extras["gamma"]
    return stats


def _batch_se(x, n_batches=25):
    x = np.asarray(x, dtype=float)
    usable = (len(x) // n_batches) * n_batches
    if usable < n_batches:
        return x.std(ddof=1) / math.sqrt(len(x))
    means = x[:usable].reshape(n_batches, -1).mean(axis=1)
    return means.std(ddof=1) / math.sqrt(n_batches)


def geweke_joint_test(config, n, p, reps, rng, tree=None):
    """Compare prior simulation against the Gibbs parameter kernel.

    The marginal-conditional side draws (parameters, then latent data) from
    the joint model directly; the successive-conditional side alternates the
    production parameter updates with fresh latent Gaussian data. Matching
    moments (|z| small) witness that the kernel leaves the joint invariant.
    The threshold/truncation layer has separate exact-distribution oracles
    and is not part of this joint.
    """
    from .simulate import random_tree  # local import to avoid a cycle

    config.validate()
    report = GewekeReport(reps=reps)
    if reps == 0:
        return report
    if p > 4:
        raise ValueError("joint test is intended for small p (<= 4)")

    H = D = None
    if config.variant != "oracle":
        if tree is None:
            tree = random_tree(p, rng)
        H = tree_correlation(tree).matrix if config.variant == "phylo" else None
        D = tree_distance(tree).matrix if config.variant == "dist" else None
    iu = np.triu_indices(p, k=1)

    # marginal-conditional: independent draws straight from the prior
    mc = {}
    for _ in range(reps):
        omega, adj, v0_sq, extras = _prior_joint_draw(config, p, H, D, rng)
        for name, value in _geweke_stats(config, omega, adj, v0_sq, extras, iu).items():
            mc.setdefault(name, []).append(value)

    # successive-conditional: production kernel + data regeneration
    omega, adj, v0_sq, extras = _prior_joint_draw(config, p, H, D, rng)
    graph = GraphState(omega, adj, v0_sq, config.h, config.lam)
    positions = None
    gamma = None
    if config.variant == "phylo":
        positions = LatentPositions(extras["t"], extras["sigma_sq"], H)
        pi = update_inclusion_probs(positions)
    elif config.variant == "oracle":
        pi = _oracle_probs(p, config.oracle_edge_count)
    else:
        gamma = extras["gamma"]
        pi = dist_inclusion_probs(gamma, D)

    sc = {}
    for _ in range(reps):
        sigma = np.linalg.inv(graph.omega)
        chol = np.linalg.cholesky(0.5 * (sigma + sigma.T))
        z = rng.standard_normal((n, p)) @ chol.T
        S = z.T @ z
        _graph_block(graph, S, n, pi, rng, config.a_v0, config.b_v0, np.arange(p))
        if config.variant == "phylo":
            pi = _phylo_block(positions, graph.adj, config.a_sigma,
                              config.b_sigma, rng)
            extras = {"sigma_sq": positions.sigma_sq, "t": positions.t}
        elif config.variant == "dist":
            gamma, _ = sample_dist_gamma(graph.adj, D, gamma, rng, 0.8)
            pi = dist_inclusion_probs(gamma, D)
            extras = {"gamma": gamma}
        stats = _geweke_stats(config, graph.omega, graph.adj, graph.v0_sq,
                              extras, iu)
        for name, value in stats.items():
            sc.setdefault(name, []).append(value)

    for name in mc:
        a = np.asarray(mc[name])
        b = np.asarray(sc[name])
        se = math.sqrt((a.std(ddof=1) / math.sqrt(len(a))) ** 2
                       + _batch_se(b) ** 2)
        z = (a.mean() - b.mean()) / se if se > 0 else 0.0
        report.rows.append({
            "name": name,
            "mc_mean": float(a.mean()),
            "sc_mean": float(b.mean()),
            "z": float(z),
        })
    return report


# ---------------------------------------------------------------------------
# Binary trace file
# ---------------------------------------------------------------------------
#
# Layout (little-endian), version 1:
#   magic   4 bytes  b"PCGT"
#   version u32
#   p       u32      number of nodes
#   draws   u32      number of retained draws
#   per draw: ceil(p(p-1)/2 / 8) bytes of packed upper-triangle edge bits
#             (numpy bit order), then 3 float64: sigma_sq, v0_sq, gamma
#             (NaN when the variant does not carry the parameter).

TRACE_MAGIC = b"PCGT"
TRACE_VERSION = 1


def write_binary_trace(path, trace):
    p = len(trace.labels)
    with open(path, "wb") as fh:
        fh.write(TRACE_MAGIC)
        fh.write(struct.pack("<III", TRACE_VERSION, p, trace.n_retained))
        for s in range(trace.n_retained):
            fh.write(trace.e_bits[s].tobytes())
            sigma = trace.sigma_sq[s] if trace.sigma_sq is not None else math.nan
            gamma = trace.gamma[s] if trace.gamma is not None else math.nan
            fh.write(struct.pack("<ddd", sigma, trace.v0_sq[s], gamma))


def read_binary_trace(path):
    """Read the versioned binary trace back into arrays."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TRACE_MAGIC:
            raise ValueError(f"{path}: not a trace file")
        version, p, draws = struct.unpack("<III", fh.read(12))
        if version != TRACE_VERSION:
            raise ValueError(f"{path}: unsupported trace version {version}")
        m = p * (p - 1) // 2
        nbytes = (m + 7) // 8
        e_bits = np.empty((draws, nbytes), dtype=np.uint8)
        scalars = np.empty((draws, 3))
        for s in range(draws):
            e_bits[s] = np.frombuffer(fh.read(nbytes), dtype=np.uint8)
            scalars[s] = struct.unpack("<ddd", fh.read(24))
    return {
        "p": p,
        "e_bits": e_bits,
        "sigma_sq": scalars[:, 0],
        "v0_sq": scalars[:, 1],
        "gamma": scalars[:, 2],
    }
