"""Zero-inflated counts on the latent Gaussian scale.

Observed positives are mapped through the scaled empirical cdf and the
standard normal quantile; zeros are treated as censored draws below
per-column thresholds and refreshed by Gibbs updates.
"""

import csv

import numpy as np
from scipy.special import ndtri

from . import truncated

__all__ = [
    "CountMatrix",
    "EcdfTransform",
    "LatentState",
    "read_counts_csv",
    "write_counts_csv",
    "fit_ecdf",
    "latent_observed",
    "build_latent_state",
    "sample_truncated_z",
    "sample_thresholds",
    "mclr_transform",
]

# half-width of the fallback threshold interval for degenerate columns
DEGENERATE_SPAN = 10.0


class CountMatrix:
    """n x p nonnegative abundance matrix with sample and taxon names."""

    def __init__(self, values, row_ids, col_ids):
        values = np.asarray(values, dtype=float)
        if values.ndim != 2:
            raise ValueError("values must be a 2-d array")
        n, p = values.shape
        if len(row_ids) != n or len(col_ids) != p:
            raise ValueError("id lengths do not match the value matrix")
        if len(set(col_ids)) != p:
            raise ValueError("taxon (column) names must be unique")
        if not np.all(np.isfinite(values)):
            raise ValueError("count matrix contains non-finite entries")
        if np.any(values < 0):
            raise ValueError("count matrix contains negative entries")
        self.values = values
        self.row_ids = list(row_ids)
        self.col_ids = list(col_ids)

    @property
    def shape(self):
        return self.values.shape

    def column(self, j):
        return self.values[:, j]


def read_counts_csv(path):
    """Strict CSV ingestion: header of taxon names, first column sample ids."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if len(header) < 2:
            raise ValueError(f"{path}: header must name at least one taxon")
        col_ids = header[1:]
        row_ids, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields")
            row_ids.append(rec[0])
            try:
                rows.append([float(v) for v in rec[1:]])
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: non-numeric cell (missing values are not allowed)"
                ) from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return CountMatrix(np.array(rows), row_ids, col_ids)


def write_counts_csv(path, counts):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id"] + counts.col_ids)
        for rid, row in zip(counts.row_ids, counts.values):
            writer.writerow([rid] + [f"{v:.12g}" for v in row])


class EcdfTransform:
    """Per-column scaled empirical cdf F(c) = #{x <= c} / (n + 1).

    Values range in (0, n/(n+1)], which keeps the normal quantile finite.
    """

    def __init__(self, uniques, cum_counts, n):
        self.uniques = uniques
        self.cum_counts = cum_counts
        self.n = n

    @property
    def n_columns(self):
        return len(self.uniques)

    def evaluate(self, c, j):
        """F_j at scalar or array c."""
        idx = np.searchsorted(self.uniques[j], c, side="right")
        counts = np.concatenate(([0], self.cum_counts[j]))
        return counts[idx] / (self.n + 1)

    def quantile(self, u, j):
        """Generalized inverse: the smallest observed value c with F_j(c) >= u.

        Arguments above the cdf's maximum map to the column maximum.
        """
        target = np.asarray(u, dtype=float) * (self.n + 1)
        idx = np.searchsorted(self.cum_counts[j], target, side="left")
        idx = np.minimum(idx, len(self.uniques[j]) - 1)
        return self.uniques[j][idx]


def fit_ecdf(x):
    """Fit the scaled empirical cdf of each column of a count matrix."""
    values = x.values if isinstance(x, CountMatrix) else np.asarray(x, dtype=float)
    n = values.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples to fit the empirical cdf")
    uniques, cums = [], []
    for j in range(values.shape[1]):
        uniq, counts = np.unique(values[:, j], return_counts=True)
        uniques.append(uniq)
        cums.append(np.cumsum(counts))
    return EcdfTransform(uniques, cums, n)


def latent_observed(x, ecdf):
    """Map positive counts to latent normal scores; mask the zeros.

    Returns ``(z_hat, mask)`` where ``mask`` is True on truncated (zero)
    entries and ``z_hat`` is NaN there. A column with no positive entries is
    rejected because its marginal cannot be identified.
    """
    values = x.values if isinstance(x, CountMatrix) else np.asarray(x, dtype=float)
    names = x.col_ids if isinstance(x, CountMatrix) else None
    mask = values == 0
    all_zero = np.where(mask.all(axis=0))[0]
    if all_zero.size:
        which = names[all_zero[0]] if names else f"index {all_zero[0]}"
        raise ValueError(
            f"column {which!r} is entirely zero; drop it before fitting"
        )
    z_hat = np.full(values.shape, np.nan)
    for j in range(values.shape[1]):
        obs = ~mask[:, j]
        z_hat[obs, j] = ndtri(ecdf.evaluate(values[obs, j], j))
    return z_hat, mask


class LatentState:
    """Latent matrix Z with truncation mask and per-column thresholds."""

    def __init__(self, z, mask, delta):
        self.z = z
        self.mask = mask
        self.delta = delta

    @property
    def shape(self):
        return self.z.shape

    def check_invariants(self):
        """Componentwise Z_trunc < delta < Z_obs in every column."""
        n, p = self.z.shape
        for j in range(p):
            m = self.mask[:, j]
            if m.any() and not np.all(self.z[m, j] < self.delta[j]):
                raise AssertionError(f"truncated z not below threshold in column {j}")
            if (~m).any() and not np.all(self.z[~m, j] > self.delta[j]):
                raise AssertionError(f"observed z not above threshold in column {j}")


def build_latent_state(z_hat, mask):
    """Initial state: thresholds from the degenerate floor rule, truncated
    entries half a unit below them."""
    n, p = z_hat.shape
    z = np.array(z_hat)
    delta = np.empty(p)
    for j in range(p):
        m = mask[:, j]
        if (~m).any():
            upper = z_hat[~m, j].min()
        else:
            upper = DEGENERATE_SPAN  # no observed entries; capped later per sweep
        delta[j] = upper - 0.5 * DEGENERATE_SPAN
        z[m, j] = delta[j] - 0.5
    return LatentState(z, mask, delta)


def sample_truncated_z(state, omega, rng):
    """One Gibbs pass over the truncated coordinates of every row.

    Each truncated coordinate is redrawn from its exact univariate normal
    full conditional given every other coordinate of its row (derived from
    the precision matrix), truncated above at the column threshold. Rows are
    conditionally independent, so each column update runs vectorized across
    rows.
    """
    z, mask, delta = state.z, state.mask, state.delta
    p = z.shape[1]
    diag = np.diag(omega)
    if np.any(diag <= 0):
        bad = int(np.argmax(diag <= 0))
        raise np.linalg.LinAlgError(
            f"concentration matrix has nonpositive diagonal at column {bad}"
        )
    for j in range(p):
        rows = mask[:, j]
        if not rows.any():
            continue
        w = z[rows] @ omega[:, j]
        cond_mean = z[rows, j] - w / diag[j]
        cond_sd = 1.0 / np.sqrt(diag[j])
        z[rows, j] = truncated.normal_below(cond_mean, cond_sd, delta[j], rng)
    return state


def sample_thresholds(state, rng):
    """Redraw each threshold uniformly between the column's largest truncated
    value and smallest observed value (degenerate columns fall back to a
    fixed-width interval on the open side)."""
    z, mask = state.z, state.mask
    p = z.shape[1]
    for j in range(p):
        m = mask[:, j]
        has_trunc = m.any()
        has_obs = (~m).any()
        lo = z[m, j].max() if has_trunc else None
        hi = z[~m, j].min() if has_obs else None
        if lo is None:
            lo = hi - DEGENERATE_SPAN
        if hi is None:
            hi = lo + DEGENERATE_SPAN
        if not lo < hi:
            raise AssertionError(
                f"empty threshold interval in column {j}: "
                f"truncated max {lo:.6g} >= observed min {hi:.6g}"
            )
        state.delta[j] = rng.uniform(lo, hi)
    return state


def mclr_transform(x):
    """Modified centered log-ratio transform for compositional input.

    Positive entries are log-transformed and centered within each row over
    the positives only; a single global shift then places the smallest
    transformed positive value at 1, so zeros stay zeros and stay smallest.
    """
    values = np.array(x.values if isinstance(x, CountMatrix) else x, dtype=float)
    pos = values > 0
    if not pos.any(axis=1).all():
        bad = int(np.argmin(pos.any(axis=1)))
        raise ValueError(f"row {bad} has no positive entries")
    out = np.zeros_like(values)
    logs = np.zeros_like(values)
    logs[pos] = np.log(values[pos])
    row_means = logs.sum(axis=1) / pos.sum(axis=1)
    centered = logs - row_means[:, None]
    shift = abs(centered[pos].min()) + 1.0
    out[pos] = centered[pos] + shift
    if isinstance(x, CountMatrix):
        return CountMatrix(out, x.row_ids, x.col_ids)
    return out
