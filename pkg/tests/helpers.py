"""Shared statistical helpers for the test suite."""

import numpy as np
from scipy.stats import chi2


def chi_square_pvalue(counts, probs, min_expected=5.0):
    """Goodness-of-fit p-value with tail pooling of low-expectation bins."""
    counts = np.asarray(counts, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    n = counts.sum()
    order = np.argsort(-probs)
    c = counts[order]
    e = n * probs[order]
    keep = e >= min_expected
    if keep.sum() < 2:
        raise ValueError("not enough well-populated bins for a chi-square test")
    stat_bins_c = list(c[keep])
    stat_bins_e = list(e[keep])
    tail_c = c[~keep].sum()
    tail_e = e[~keep].sum()
    if tail_e > 0:
        if tail_e >= min_expected:
            stat_bins_c.append(tail_c)
            stat_bins_e.append(tail_e)
        else:
            stat_bins_c[-1] += tail_c
            stat_bins_e[-1] += tail_e
    obs = np.asarray(stat_bins_c)
    exp = np.asarray(stat_bins_e)
    stat = ((obs - exp) ** 2 / exp).sum()
    df = len(obs) - 1
    return float(chi2.sf(stat, df))


def batch_means_se(values, n_batches=20):
    """Standard error of a correlated sequence via batch means."""
    values = np.asarray(values, dtype=np.float64)
    usable = (len(values) // n_batches) * n_batches
    batches = values[:usable].reshape(n_batches, -1).mean(axis=1)
    return float(batches.std(ddof=1) / np.sqrt(n_batches))
