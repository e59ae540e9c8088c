"""Posterior summaries: FDR-thresholded edge selection, partial
correlations, recovery metrics, clustering, and community detection."""

import csv
import json
import warnings
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

__all__ = [
    "PosteriorSummary",
    "SelectedGraph",
    "FdrResult",
    "fdr_cutoff",
    "select_graph",
    "partial_correlations",
    "recovery_metrics",
    "clustering_coefficient",
    "detect_communities",
    "write_edge_list_csv",
    "read_edge_list_csv",
    "write_communities_csv",
    "read_communities_csv",
    "write_metrics_json",
    "read_metrics_json",
    "aggregate_metrics",
    "write_aggregate_csv",
    "read_aggregate_csv",
]


@dataclass
class PosteriorSummary:
    """Averaged edge probabilities and concentration matrix with labels."""

    labels: list
    pi_hat: np.ndarray
    omega_hat: np.ndarray
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pi_hat = np.asarray(self.pi_hat, dtype=float)
        self.omega_hat = np.asarray(self.omega_hat, dtype=float)
        if not np.allclose(self.pi_hat, self.pi_hat.T):
            raise ValueError("pi_hat must be symmetric")
        if self.pi_hat.min() < 0 or self.pi_hat.max() > 1:
            raise ValueError("pi_hat entries must lie in [0, 1]")


@dataclass
class FdrResult:
    cutoff: float
    fdr: float
    achieved: bool
    n_selected: int


@dataclass
class SelectedGraph:
    adjacency: np.ndarray
    cutoff: float
    alpha: float
    fdr: float
    achieved: bool


def _upper_values(pi):
    pi = np.asarray(pi, dtype=float)
    if pi.ndim == 2:
        return pi[np.triu_indices(pi.shape[0], k=1)]
    return pi.ravel()


def fdr_cutoff(pi_hat, alpha):
    """Smallest cutoff whose posterior expected FDR is at or below alpha.

    The expected FDR of cutoff c is the mean of (1 - pi) over entries with
    pi > c; it only changes at the distinct pi values, which together with 0
    form the candidate set. When no cutoff reaches alpha the top probability
    group is selected and the result is flagged as not achieved.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    vals = _upper_values(pi_hat)
    if not np.any(vals > 0):
        raise ValueError("no positive edge probabilities; nothing selectable")
    candidates = np.unique(np.concatenate(([0.0], np.unique(vals))))
    best_fallback = None
    last_fdr = np.inf
    for c in candidates:
        selected = vals > c
        n_sel = int(selected.sum())
        if n_sel == 0:
            continue
        fdr = float((1.0 - vals[selected]).sum() / n_sel)
        if fdr > last_fdr + 1e-12:
            raise AssertionError("expected FDR must be nonincreasing in the cutoff")
        last_fdr = fdr
        best_fallback = FdrResult(float(c), fdr, False, n_sel)
        if fdr <= alpha:
            return FdrResult(float(c), fdr, True, n_sel)
    return best_fallback


def select_graph(pi_hat, alpha):
    """Threshold the edge-probability matrix at the FDR-controlling cutoff."""
    pi_hat = np.asarray(pi_hat, dtype=float)
    res = fdr_cutoff(pi_hat, alpha)
    adj = (pi_hat > res.cutoff).astype(np.int8)
    np.fill_diagonal(adj, 0)
    return SelectedGraph(adj, res.cutoff, alpha, res.fdr, res.achieved)


def partial_correlations(omega_hat):
    """Standard sign-flipped scaling of the concentration matrix.

    Invariant under positive diagonal rescaling; entries outside [-1, 1]
    from numerical noise are clipped with a warning.
    """
    omega_hat = np.asarray(omega_hat, dtype=float)
    d = np.diag(omega_hat)
    if np.any(d <= 0):
        raise ValueError("concentration diagonal must be strictly positive")
    rho = -omega_hat / np.sqrt(np.outer(d, d))
    np.fill_diagonal(rho, 1.0)
    if np.any(np.abs(rho) > 1):
        warnings.warn("partial correlations outside [-1, 1] were clipped")
        rho = np.clip(rho, -1.0, 1.0)
    return rho


def recovery_metrics(adj_hat, adj_true):
    """(MCC, TPR, FPR) over the upper triangle of two adjacency matrices.

    A zero factor in the MCC denominator yields MCC = 0 by convention.
    """
    adj_hat = np.asarray(adj_hat)
    adj_true = np.asarray(adj_true)
    if adj_hat.shape != adj_true.shape:
        raise ValueError("adjacency shapes differ")
    iu = np.triu_indices(adj_hat.shape[0], k=1)
    a, b = adj_hat[iu].astype(bool), adj_true[iu].astype(bool)
    tp = int(np.sum(a & b))
    fp = int(np.sum(a & ~b))
    fn = int(np.sum(~a & b))
    tn = int(np.sum(~a & ~b))
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        warnings.warn("degenerate confusion matrix; MCC set to 0")
        mcc = 0.0
    else:
        mcc = (tp * tn - fp * fn) / np.sqrt(denom)
    tpr = tp / (tp + fn) if (tp + fn) else 0.0
    fpr = fp / (fp + tn) if (fp + tn) else 0.0
    return float(mcc), float(tpr), float(fpr)


def clustering_coefficient(adj):
    """Global transitivity: 3 * triangles / connected triples (0 if none)."""
    a = np.asarray(adj, dtype=float)
    np.fill_diagonal(a, 0.0)
    triangles = np.trace(a @ a @ a) / 6.0
    deg = a.sum(axis=1)
    triples = float(np.sum(deg * (deg - 1) / 2.0))
    if triples == 0:
        return 0.0
    return float(3.0 * triangles / triples)


def detect_communities(adj, labels=None):
    """Edge-betweenness divisive clustering, stopped at peak modularity.

    Candidate partitions are the initial connected components followed by
    every split the removal sequence produces; the best-modularity partition
    wins. Isolated nodes always end up in singleton communities. Returns an
    integer label per node (communities numbered by decreasing size, ties by
    smallest member index).
    """
    adj = np.asarray(adj)
    p = adj.shape[0]
    graph = nx.Graph()
    graph.add_nodes_from(range(p))
    jj, kk = np.nonzero(np.triu(adj, k=1))
    graph.add_edges_from(zip(jj.tolist(), kk.tolist()))

    if graph.number_of_edges() == 0:
        partition = [{j} for j in range(p)]
    else:
        candidates = [list(nx.connected_components(graph))]
        candidates.extend(list(c) for c in nx.community.girvan_newman(graph))
        scores = [nx.community.modularity(graph, part) for part in candidates]
        partition = candidates[int(np.argmax(scores))]

    ordered = sorted(partition, key=lambda c: (-len(c), min(c)))
    out = np.empty(p, dtype=int)
    for cid, members in enumerate(ordered):
        for node in members:
            out[node] = cid
    return out


def write_edge_list_csv(path, labels, pi_hat, partial_corr, selected):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["taxon_a", "taxon_b", "pi_hat", "partial_corr", "selected"])
        p = len(labels)
        for j in range(p):
            for k in range(j + 1, p):
                writer.writerow([
                    labels[j], labels[k],
                    f"{pi_hat[j, k]:.12g}", f"{partial_corr[j, k]:.12g}",
                    int(selected[j, k]),
                ])


def read_edge_list_csv(path):
    """Rebuild (labels, pi_hat, partial_corr, selected) from an edge list."""
    rows = []
    order = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["taxon_a", "taxon_b", "pi_hat", "partial_corr", "selected"]:
            raise ValueError(f"{path}: unexpected header")
        for a, b, pi, rho, sel in reader:
            rows.append((a, b, float(pi), float(rho), int(sel)))
            for name in (a, b):
                if name not in order:
                    order.append(name)
    idx = {name: i for i, name in enumerate(order)}
    p = len(order)
    pi_hat = np.zeros((p, p))
    rho = np.eye(p)
    selected = np.zeros((p, p), dtype=np.int8)
    for a, b, piv, rhov, sel in rows:
        j, k = idx[a], idx[b]
        pi_hat[j, k] = pi_hat[k, j] = piv
        rho[j, k] = rho[k, j] = rhov
        selected[j, k] = selected[k, j] = sel
    return order, pi_hat, rho, selected


def write_communities_csv(path, labels, community_ids):
    counts = np.bincount(np.asarray(community_ids))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["taxon", "community_id", "standalone"])
        for lab, cid in zip(labels, community_ids):
            writer.writerow([lab, int(cid), int(counts[cid] == 1)])


def read_communities_csv(path):
    labels, ids = [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["taxon", "community_id", "standalone"]:
            raise ValueError(f"{path}: unexpected header")
        for taxon, cid, _ in reader:
            labels.append(taxon)
            ids.append(int(cid))
    return labels, np.asarray(ids)


def read_aggregate_csv(path):
    out = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["metric", "mean", "two_se"]:
            raise ValueError(f"{path}: unexpected header")
        for metric, mean, two_se in reader:
            out[metric] = (float(mean), float(two_se))
    return out


def write_metrics_json(path, metrics):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_metrics_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def aggregate_metrics(per_replicate):
    """Mean and 2 * standard error for each numeric metric across replicates."""
    keys = sorted({k for m in per_replicate for k in m if isinstance(m[k], (int, float))})
    out = {}
    for key in keys:
        vals = np.array([float(m[key]) for m in per_replicate if key in m])
        mean = float(vals.mean())
        if vals.size > 1:
            two_se = float(2.0 * vals.std(ddof=1) / np.sqrt(vals.size))
        else:
            two_se = 0.0
        out[key] = (mean, two_se)
    return out


def write_aggregate_csv(path, aggregate):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "mean", "two_se"])
        for key in sorted(aggregate):
            mean, two_se = aggregate[key]
            writer.writerow([key, f"{mean:.12g}", f"{two_se:.12g}"])
