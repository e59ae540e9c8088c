"""End-to-end acceptance suite.

Each test prints one PASS line with its headline numbers (visible under
``pytest -s``); under ``-v`` the per-test verdicts serve as the criterion
report. Criterion 7 is data-conditional and runs only when the QMP_COUNTS
and QMP_TREE environment variables point at the dataset.
"""

import os
import time

import numpy as np
import pytest
from scipy import stats

from oracles import mvn_conditional, rejection_truncated_mvn
from phylocopula.analyze import (
    clustering_coefficient,
    fdr_cutoff,
    partial_correlations,
    read_edge_list_csv,
    recovery_metrics,
    select_graph,
)
from phylocopula.cli import main as cli_main
from phylocopula.copula import build_latent_state, read_counts_csv, sample_truncated_z
from phylocopula.sampler import (
    GEWEKE_DEFAULTS,
    SamplerConfig,
    geweke_joint_test,
    run_chains,
)
from phylocopula.simulate import build_scenario, gwishart_chain, write_scenario_bundle
from phylocopula.tree import (
    normalize_to_unit_depth,
    parse_newick,
    read_newick_file,
    set_unit_branch_lengths,
    tree_correlation,
)

FOUR_TAXON = "((t1:0.45,t3:0.45):0.35,(t2:0.15,t4:0.15):0.65):0.2;"

# deterministic desk-scale scenario (p=20, n=106) with informative structure
SCENARIO_SEED = 20260000
N_REPLICATES = 10
FIT = dict(iterations=5500, burn_in=500, thin=1, chains=1)
ALPHA = 0.05


def _report(criterion, detail):
    print(f"[acceptance] criterion {criterion}: PASS ({detail})")


# ---------------------------------------------------------------------- 1
def test_criterion_1_tree_prior_fidelity():
    started = time.perf_counter()
    tree = normalize_to_unit_depth(parse_newick(FOUR_TAXON))
    corr = tree_correlation(tree)
    i = {lab: k for k, lab in enumerate(corr.labels)}
    H = corr.matrix
    assert abs(H[i["t1"], i["t3"]] - 0.55) <= 1e-12
    assert abs(H[i["t2"], i["t4"]] - 0.85) <= 1e-12
    for a, b in [("t1", "t2"), ("t1", "t4"), ("t2", "t3"), ("t3", "t4")]:
        assert abs(H[i[a], i[b]] - 0.2) <= 1e-12
    assert np.array_equal(np.diag(H), np.ones(4))
    elapsed = time.perf_counter() - started
    assert elapsed < 1.0
    _report(1, f"max deviation {np.max(np.abs(H - H.T)):.1e}, {elapsed*1e3:.0f} ms")


# ---------------------------------------------------------------------- 2
@pytest.mark.parametrize("variant", ["phylo", "oracle", "dist"])
def test_criterion_2_geweke_joint(variant):
    started = time.perf_counter()
    base = dict(variant=variant, iterations=10, burn_in=1, latent_dims=2,
                seed=0, **GEWEKE_DEFAULTS)
    if variant == "oracle":
        base["oracle_edge_count"] = 1
    config = SamplerConfig(**base)
    report = geweke_joint_test(config, n=10, p=3, reps=5000,
                               rng=np.random.default_rng(2024))
    assert len(report.rows) >= 10
    assert report.passed(4.0), f"\n{report}"
    elapsed = time.perf_counter() - started
    assert elapsed < 600
    _report(2, f"{variant}: {len(report.rows)} statistics, "
               f"max |z| = {report.max_abs_z:.2f}, {elapsed:.0f} s")


# ---------------------------------------------------------------------- 3
def test_criterion_3_truncated_sampling_oracle():
    started = time.perf_counter()
    master = np.random.default_rng(3033)
    n_rows, burn, keep, thin = 2500, 60, 40, 10
    for case in range(20):
        rng = np.random.default_rng(master.integers(2**63))
        p = int(rng.integers(2, 5))
        a = rng.standard_normal((p, p))
        omega = a @ a.T + (p + 0.5) * np.eye(p)
        sigma = np.linalg.inv(omega)
        n_trunc = int(rng.integers(1, p + 1))
        trunc = sorted(rng.choice(p, size=n_trunc, replace=False).tolist())
        obs = [j for j in range(p) if j not in trunc]
        obs_vals = rng.normal(0.0, 0.6, size=len(obs))
        if obs:
            mean_t, cov_t = mvn_conditional(sigma, obs, trunc, obs_vals)
        else:
            mean_t = np.zeros(p)[trunc]
            cov_t = sigma[np.ix_(trunc, trunc)]
        delta_t = mean_t + rng.uniform(0.2, 1.2, size=n_trunc) * np.sqrt(
            np.diag(cov_t))

        z = np.zeros((n_rows, p))
        mask = np.zeros((n_rows, p), dtype=bool)
        for j, val in zip(obs, obs_vals):
            z[:, j] = val
        delta = np.full(p, np.inf)
        for j, d in zip(trunc, delta_t):
            mask[:, j] = True
            delta[j] = d
            z[:, j] = d - 0.5
        for j, val in zip(obs, obs_vals):
            delta[j] = val - 1.0
        state = build_latent_state(z, mask)
        state.z = z
        state.delta = delta

        for _ in range(burn):
            sample_truncated_z(state, omega, rng)
        draws = np.empty((keep, n_rows, n_trunc))
        for s in range(keep):
            for _ in range(thin):
                sample_truncated_z(state, omega, rng)
            draws[s] = state.z[:, trunc]

        oracle = rejection_truncated_mvn(mean_t, cov_t, delta_t, 100_000, rng)
        # means: rows are independent chains, so between-row spread gives SE
        row_means = draws.mean(axis=0)
        lib_mean = row_means.mean(axis=0)
        lib_mean_se = row_means.std(axis=0, ddof=1) / np.sqrt(n_rows)
        orc_mean = oracle.mean(axis=0)
        orc_mean_se = oracle.std(axis=0, ddof=1) / np.sqrt(len(oracle))
        se = np.hypot(lib_mean_se, orc_mean_se)
        assert np.all(np.abs(lib_mean - orc_mean) < 3 * se), f"case {case} mean"
        # variances: the final sweep is an iid cross-section
        snap = draws[-1]
        lib_var = snap.var(axis=0, ddof=1)
        orc_var = oracle.var(axis=0, ddof=1)
        se_var = np.hypot(lib_var * np.sqrt(2.0 / (n_rows - 1)),
                          orc_var * np.sqrt(2.0 / (len(oracle) - 1)))
        assert np.all(np.abs(lib_var - orc_var) < 3 * se_var), f"case {case} var"
    elapsed = time.perf_counter() - started
    assert elapsed < 300
    _report(3, f"20 randomized cases, 1e5 draws each, {elapsed:.0f} s")


# ---------------------------------------------------------------------- 4
@pytest.fixture(scope="module")
def desk_scale_results():
    base = build_scenario(20, 106, seed=SCENARIO_SEED, sigma_sq=3.0,
                          n_dims=2, df=4.0)
    n_edges = int(base.adj_true[np.triu_indices(20, 1)].sum())
    assert clustering_coefficient(base.adj_true) >= 0.6  # informative structure
    configs = {
        "phylo": (SamplerConfig(variant="phylo", seed=0, **FIT), base.tree),
        "oracle": (SamplerConfig(variant="oracle", oracle_edge_count=n_edges,
                                 seed=0, **FIT), None),
        "blind": (SamplerConfig(variant="oracle", oracle_edge_count=95,
                                seed=0, **FIT), None),  # pi fixed at 0.5
    }
    mcc = {name: [] for name in configs}
    for r in range(N_REPLICATES):
        scen = build_scenario(20, 106, seed=SCENARIO_SEED + r + 1,
                              sigma_sq=3.0, n_dims=2, df=4.0, tree=base.tree,
                              t_true=base.t_true, adj_true=base.adj_true,
                              omega_true=base.omega_true)
        for name, (cfg_base, tree) in configs.items():
            cfg = SamplerConfig(**{**cfg_base.__dict__, "seed": 1000 + r})
            summary = run_chains(cfg, scen.counts, tree)
            selected = select_graph(summary.pi_hat, ALPHA)
            mcc[name].append(
                recovery_metrics(selected.adjacency, base.adj_true)[0])
    return base, {k: np.array(v) for k, v in mcc.items()}


def test_criterion_4_desk_scale_recovery_ordering(desk_scale_results):
    _, mcc = desk_scale_results
    mean = {k: v.mean() for k, v in mcc.items()}
    assert mean["phylo"] >= mean["oracle"] - 0.02, mean
    assert mean["phylo"] >= mean["blind"] + 0.05, mean
    _report(4, "mean MCC phylo={phylo:.3f} oracle={oracle:.3f} "
               "blind={blind:.3f} over 10 replicates".format(**mean))


# ---------------------------------------------------------------------- 5
def test_criterion_5_fdr_machinery():
    started = time.perf_counter()
    res = fdr_cutoff(np.array([0.9, 0.8, 0.6]), alpha=0.2)
    assert res.cutoff == pytest.approx(0.6, abs=1e-15)
    assert res.fdr == pytest.approx(0.15, abs=1e-15)
    assert res.n_selected == 2 and res.achieved
    rng = np.random.default_rng(55)
    for _ in range(1000):
        vals = rng.random(int(rng.integers(2, 60)))
        fdr_cutoff(vals, alpha=float(rng.uniform(0.02, 0.5)))  # asserts monotone
        cands = np.concatenate(([0.0], np.unique(vals)))
        fdrs = [(1 - vals[vals > c]).mean() for c in cands if (vals > c).any()]
        assert np.all(np.diff(fdrs) <= 1e-12)
    elapsed = time.perf_counter() - started
    assert elapsed < 60
    _report(5, f"hand example exact; monotone on 1000 random vectors, "
               f"{elapsed:.1f} s")


# ---------------------------------------------------------------------- 6
def test_criterion_6_gwishart_oracles():
    started = time.perf_counter()
    p, df = 4, 4.0
    complete = np.ones((p, p), dtype=np.int8) - np.eye(p, dtype=np.int8)
    draws = gwishart_chain(complete, df, np.random.default_rng(66), 10_000,
                           burn=200, thin=2)
    mean = draws.mean(axis=0)
    # complete-graph target is the ordinary Wishart whose shape parameter
    # matches the graph-restricted density, i.e. df + p - 1 degrees of
    # freedom and identity scale; its mean is (df + p - 1) * I
    wishart_df = df + p - 1
    oracle_mean = stats.wishart(int(wishart_df), np.eye(p)).rvs(
        20_000, random_state=1).mean(axis=0)
    assert np.allclose(np.diag(oracle_mean), wishart_df, rtol=0.03)
    assert np.allclose(np.diag(mean), wishart_df * np.ones(p), rtol=0.05)
    assert np.allclose(mean, oracle_mean, atol=0.05 * wishart_df)

    empty = np.zeros((p, p), dtype=np.int8)
    empty_draws = gwishart_chain(empty, df, np.random.default_rng(67), 10_000,
                                 burn=10)
    off = empty_draws[:, ~np.eye(p, dtype=bool)]
    assert np.all(off == 0.0)  # exact zero pattern
    diag = empty_draws[:, np.eye(p, dtype=bool)].ravel()
    assert diag.mean() == pytest.approx(df, rel=0.02)
    d, _ = stats.kstest(diag, stats.chi2(df).cdf)
    assert d < 0.02
    elapsed = time.perf_counter() - started
    assert elapsed < 300
    _report(6, f"complete-graph mean within 5% of {wishart_df:.0f}*I; empty "
               f"pattern exact; {elapsed:.0f} s")


# ---------------------------------------------------------------------- 7
@pytest.mark.skipif(
    not (os.environ.get("QMP_COUNTS") and os.environ.get("QMP_TREE")),
    reason="conditional criterion: set QMP_COUNTS and QMP_TREE to run",
)
def test_criterion_7_conditional_qmp_reproduction():
    counts = read_counts_csv(os.environ["QMP_COUNTS"])
    tree = read_newick_file(os.environ["QMP_TREE"])
    if os.environ.get("QMP_RANK_LENGTHS"):
        tree = set_unit_branch_lengths(tree)
    tree = normalize_to_unit_depth(tree)
    config = SamplerConfig(variant="phylo", iterations=125_000,
                           burn_in=25_000, thin=40, chains=4, seed=1,
                           workers=int(os.environ.get("PHYLOCOPULA_WORKERS", 4)))
    summary = run_chains(config, counts, tree)
    assert summary.report["retained_total"] == 10_000
    selected = select_graph(summary.pi_hat, alpha=0.1)
    assert selected.cutoff == pytest.approx(0.719, abs=0.05)
    rho = partial_correlations(summary.omega_hat)
    idx = {lab: k for k, lab in enumerate(summary.labels)}
    pair = rho[idx["Dialister"], idx["Phascolarctobacterium"]]
    assert pair < 0
    assert pair == pytest.approx(-0.384, abs=0.1)
    _report(7, f"cutoff {selected.cutoff:.3f}; Dialister pair {pair:+.3f}")


# ---------------------------------------------------------------------- 8
def test_criterion_8_determinism_byte_identical(desk_scale_results, tmp_path):
    base, _ = desk_scale_results
    scen = build_scenario(20, 106, seed=SCENARIO_SEED + 1, sigma_sq=3.0,
                          n_dims=2, df=4.0, tree=base.tree, t_true=base.t_true,
                          adj_true=base.adj_true, omega_true=base.omega_true)
    bundle = tmp_path / "replicate_000"
    write_scenario_bundle(bundle, scen)
    args = ["fit", "--counts", str(bundle / "counts.csv"),
            "--tree", str(bundle / "tree.nwk"), "--variant", "phylo",
            "--iterations", str(FIT["iterations"]),
            "--burn-in", str(FIT["burn_in"]), "--seed", "1000",
            "--alpha", str(ALPHA)]
    assert cli_main(args + ["--out", str(tmp_path / "run_a")]) == 0
    assert cli_main(args + ["--out", str(tmp_path / "run_b")]) == 0
    bytes_a = (tmp_path / "run_a" / "edge_list.csv").read_bytes()
    bytes_b = (tmp_path / "run_b" / "edge_list.csv").read_bytes()
    assert bytes_a == bytes_b
    labels, pi_hat, _, selected = read_edge_list_csv(
        tmp_path / "run_a" / "edge_list.csv")
    assert len(labels) == 20 and selected.sum() > 0
    _report(8, f"{len(bytes_a)} bytes identical across same-seed runs")
