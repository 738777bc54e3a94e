"""Posterior summaries of a trace: co-clustering, K_n law, point partition, ESS."""
from __future__ import annotations

import numpy as np

__all__ = ["coclustering", "kn_posterior", "point_partition", "ess", "canonical_partition"]


def _labels(trace, level: str) -> np.ndarray:
    if level not in ("component", "group"):
        raise ValueError("level must be 'component' or 'group'")
    if level == "group":
        if not getattr(trace, "groups", None):
            raise ValueError("group-level summaries need a shot-noise Cox trace")
        lab = trace.groups
    else:
        lab = trace.alloc
    lab = np.asarray(lab)
    if lab.ndim != 2 or len(lab) == 0:
        raise ValueError("empty trace")
    return lab


def canonical_partition(labels) -> tuple:
    """Relabel by order of first appearance, so equal partitions compare equal."""
    labels = np.asarray(labels)
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return tuple(int(v) for v in rank[inv.ravel()])


def coclustering(trace, level: str = "component") -> np.ndarray:
    """Fraction of saved iterations in which observations i and j share a label."""
    lab = _labels(trace, level)
    T, n = lab.shape
    out = np.zeros((n, n))
    for row in lab:
        out += row[:, None] == row[None, :]
    return out / T


def kn_posterior(trace, level: str = "component") -> np.ndarray:
    """Empirical pmf of the number of distinct labels, indexed by k = 0..max."""
    lab = _labels(trace, level)
    ks = np.array([len(np.unique(r)) for r in lab])
    return np.bincount(ks) / len(ks)


def point_partition(ccm, candidates=None) -> np.ndarray:
    """Visited partition whose co-clustering indicator is closest in squared
    Frobenius distance to ccm. Without candidates, the partitions induced by
    thresholding ccm at each of its distinct values are searched.
    """
    ccm = np.asarray(ccm, float)
    n = len(ccm)
    if candidates is None:
        candidates = []
        for t in np.unique(ccm):
            candidates.append(_threshold_partition(ccm, t))
    best, best_loss, seen = None, np.inf, set()
    for c in candidates:
        key = canonical_partition(c)
        if key in seen:
            continue
        seen.add(key)
        a = np.asarray(key)
        loss = float(((ccm - (a[:, None] == a[None, :])) ** 2).sum())
        if loss < best_loss:
            best, best_loss = a, loss
    if best is None:
        best = np.arange(n)
    return best


def _threshold_partition(ccm, t):
    """Connected components of the graph with edges where ccm >= t."""
    n = len(ccm)
    lab = -np.ones(n, int)
    cur = 0
    for i in range(n):
        if lab[i] >= 0:
            continue
        stack = [i]
        lab[i] = cur
        while stack:
            j = stack.pop()
            for m in np.nonzero((ccm[j] >= t) & (lab < 0))[0]:
                lab[m] = cur
                stack.append(m)
        cur += 1
    return lab


def ess(series) -> float:
    """Effective sample size with the initial positive sequence estimator.

    A constant series has effective size 0 by convention.
    """
    x = np.asarray(series, float)
    n = len(x)
    if n < 2:
        return float(n)
    x = x - x.mean()
    var = float(x @ x) / n
    if var == 0:
        return 0.0
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, m)
    acf = np.fft.irfft(f * np.conj(f), m)[:n] / (n * var)
    # sums of adjacent pairs are positive for a reversible chain; stop at the first non-positive one
    tau = -1.0
    for t in range(0, n - 1, 2):
        pair = acf[t] + acf[t + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(n / max(tau, 1e-12))
