"""Chain diagnostics and evaluation metrics.

Autocorrelation / effective sample size for MCMC output, plus the
cluster-quality metrics used by the data-integration experiments
(Davies-Bouldin index, normalized mutual information).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

ESS_CAP_FACTOR = 1.5  # reported ESS is capped at 1.5x the draw count


def autocorrelation(series, max_lag: int) -> np.ndarray:
    """Sample ACF at lags 0..max_lag (biased, mean-centered, FFT-based).

    Normalized so ACF[0] = 1. A constant (zero-variance) series is degenerate
    and returns [1, 0, 0, ...].
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.shape[0]
    if n <= max_lag:
        raise ValueError("series length must exceed max_lag")
    x = x - x.mean()
    var = np.dot(x, x)
    if var == 0.0:
        out = np.zeros(max_lag + 1)
        out[0] = 1.0
        return out
    nfft = 1
    while nfft < 2 * n:
        nfft *= 2
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conjugate(f), nfft)[: max_lag + 1].real
    return acov / acov[0]


def is_degenerate(series) -> bool:
    x = np.asarray(series, dtype=float).ravel()
    return bool(np.all(x == x[0]))


def effective_sample_size(series) -> float:
    """ESS via Geyer's initial-positive-sequence truncation.

    n / (1 + 2 sum rho_k) with the sum of paired autocorrelations
    Gamma_m = rho_{2m} + rho_{2m+1} truncated at the first nonpositive pair.
    Anti-correlated series can exceed n; the report is capped at 1.5n.
    Degenerate (constant) series give 0.
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.shape[0]
    if n < 10:
        raise ValueError("need at least 10 draws for an ESS estimate")
    if is_degenerate(x):
        return 0.0
    max_lag = min(n - 1, 2 * int(np.sqrt(n)) + 200)
    rho = autocorrelation(x, max_lag)
    tau = -1.0
    m = 0
    while 2 * m + 1 <= max_lag:
        pair = rho[2 * m] + rho[2 * m + 1]
        if pair <= 0.0:
            break
        tau += 2.0 * pair
        m += 1
    tau = max(tau, 1.0 / ESS_CAP_FACTOR)
    return float(min(n / tau, ESS_CAP_FACTOR * n))


def davies_bouldin(points, labels) -> float:
    """Davies-Bouldin index: mean over clusters of max_j (s_i+s_j)/d_ij.

    s_i is the mean Euclidean distance to the cluster centroid and d_ij the
    centroid distance. Lower values indicate better mixing of the groups.
    Coincident centroids of distinct clusters give an infinite component.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] == 1 and len(np.asarray(labels).ravel()) != 1:
        pts = pts.T
    labels = np.asarray(labels).ravel()
    if pts.shape[0] != labels.shape[0]:
        raise ValueError("points and labels length mismatch")
    uniq = np.unique(labels)
    if uniq.shape[0] < 2:
        raise ValueError("need at least two clusters")
    centroids = np.stack([pts[labels == u].mean(axis=0) for u in uniq])
    scatter = np.array(
        [np.linalg.norm(pts[labels == u] - centroids[i], axis=1).mean() for i, u in enumerate(uniq)]
    )
    k = uniq.shape[0]
    worst = np.zeros(k)
    for i in range(k):
        ratios = []
        for j in range(k):
            if j == i:
                continue
            d = np.linalg.norm(centroids[i] - centroids[j])
            if d == 0.0:
                ratios.append(np.inf)
            else:
                ratios.append((scatter[i] + scatter[j]) / d)
        worst[i] = max(ratios)
    return float(worst.mean())


def _entropy(counts: np.ndarray) -> float:
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def normalized_mutual_information(labels_a, labels_b) -> float:
    """NMI(a, b) = MI / sqrt(H(a) H(b)) with natural-log entropies, in [0, 1].

    A single-cluster labeling on either side is defined as 0.
    """
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape[0] != b.shape[0]:
        raise ValueError("labelings must have equal length")
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    if ua.shape[0] < 2 or ub.shape[0] < 2:
        return 0.0
    n = a.shape[0]
    joint = np.zeros((ua.shape[0], ub.shape[0]))
    np.add.at(joint, (ia, ib), 1.0)
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    mi = 0.0
    for i in range(ua.shape[0]):
        for j in range(ub.shape[0]):
            nij = joint[i, j]
            if nij > 0:
                mi += (nij / n) * np.log(n * nij / (pa[i] * pb[j]))
    denom = np.sqrt(_entropy(pa) * _entropy(pb))
    if denom == 0.0:
        return 0.0
    return float(min(max(mi / denom, 0.0), 1.0))


@dataclass
class SummaryTable:
    """Per-parameter posterior summaries with quantiles, ESS, lag-1 ACF."""

    names: list[str]
    mean: np.ndarray
    sd: np.ndarray
    q2_5: np.ndarray
    q50: np.ndarray
    q97_5: np.ndarray
    ess: np.ndarray
    acf1: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "mean", "sd", "q2.5", "q50", "q97.5", "ess", "acf1", "degenerate"])
            for i, name in enumerate(self.names):
                w.writerow(
                    [
                        name,
                        f"{self.mean[i]:.10g}",
                        f"{self.sd[i]:.10g}",
                        f"{self.q2_5[i]:.10g}",
                        f"{self.q50[i]:.10g}",
                        f"{self.q97_5[i]:.10g}",
                        f"{self.ess[i]:.10g}",
                        f"{self.acf1[i]:.10g}",
                        int(self.degenerate[i]),
                    ]
                )

    def row(self, name: str) -> dict:
        i = self.names.index(name)
        return {
            "mean": float(self.mean[i]),
            "sd": float(self.sd[i]),
            "q2.5": float(self.q2_5[i]),
            "q50": float(self.q50[i]),
            "q97.5": float(self.q97_5[i]),
            "ess": float(self.ess[i]),
            "acf1": float(self.acf1[i]),
        }


def summarize_draws(draws: np.ndarray, names: list[str]) -> SummaryTable:
    """Summary table for a draws matrix (kept x dim); deterministic."""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    n, d = draws.shape
    if n < 10:
        raise ValueError("need at least 10 kept draws")
    if len(names) != d:
        raise ValueError("names length mismatch")
    q = np.percentile(draws, [2.5, 50.0, 97.5], axis=0)
    ess = np.empty(d)
    acf1 = np.empty(d)
    degen = np.zeros(d, dtype=bool)
    for j in range(d):
        col = draws[:, j]
        if is_degenerate(col):
            degen[j] = True
            ess[j] = 0.0
            acf1[j] = 0.0
        else:
            ess[j] = effective_sample_size(col)
            acf1[j] = autocorrelation(col, 1)[1]
    return SummaryTable(
        names=list(names),
        mean=draws.mean(axis=0),
        sd=draws.std(axis=0, ddof=1),
        q2_5=q[0],
        q50=q[1],
        q97_5=q[2],
        ess=ess,
        acf1=acf1,
        degenerate=degen,
    )


def summarize(chain) -> SummaryTable:
    """Summary table for a Chain (see sampler.Chain)."""
    return summarize_draws(chain.samples, chain.layout.coordinate_names())


def principal_components(points: np.ndarray, k: int = 2) -> np.ndarray:
    """First k principal-component coordinates of a point cloud (rows)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    centered = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:k].T
