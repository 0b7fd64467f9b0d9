"""Field histograms, configuration gating, occupancy statistics, and
source-charge-conditioned splits of probe field measurements."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import FieldMeasurement


def measurements_to_array(measurements) -> np.ndarray:
    """(N, 2) array of (d_par, d_perp)."""
    return np.array([[m.d_par, m.d_perp] for m in measurements], dtype=float)


def histogram2d(measurements, bins=50, range_=None):
    """2D histogram of (d_par, d_perp); counts conserve N.

    Returns (counts, par_edges, perp_edges).
    """
    pts = measurements_to_array(measurements)
    if range_ is None and len(pts):
        pad = 1e-9
        range_ = [[pts[:, 0].min() - pad, pts[:, 0].max() + pad],
                  [pts[:, 1].min() - pad, pts[:, 1].max() + pad]]
    counts, xe, ye = np.histogram2d(pts[:, 0], pts[:, 1], bins=bins, range=range_)
    return counts, xe, ye


@dataclass
class Ellipse:
    """Gate in the (d_par, d_perp) plane."""

    center: tuple[float, float]
    semi_axes: tuple[float, float]
    rotation: float = 0.0  # radians
    name: str = ""

    def __post_init__(self):
        if self.semi_axes[0] <= 0 or self.semi_axes[1] <= 0:
            raise ValueError("ellipse semi-axes must be positive")

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - np.asarray(self.center)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        u = c * d[:, 0] + s * d[:, 1]
        v = -s * d[:, 0] + c * d[:, 1]
        return (u / self.semi_axes[0]) ** 2 + (v / self.semi_axes[1]) ** 2 <= 1.0


def wilson_interval(n: int, total: int, z: float = 1.959963984540054):
    """Wilson 95% (default) score interval for a binomial fraction."""
    if total == 0:
        return 0.0, 0.0, 1.0
    p = n / total
    denom = 1.0 + z**2 / total
    center = (p + z**2 / (2 * total)) / denom
    half = z * math.sqrt(p * (1 - p) / total + z**2 / (4 * total**2)) / denom
    return p, max(center - half, 0.0), min(center + half, 1.0)


@dataclass
class ClusterStats:
    name: str
    n: int
    total: int
    fraction: float
    ci_low: float
    ci_high: float


@dataclass
class GateResult:
    assignments: np.ndarray  # index into clusters, -1 for unassigned
    clusters: list[ClusterStats]
    means: list[np.ndarray] = field(default_factory=list)
    covariances: list[np.ndarray] = field(default_factory=list)


def gate_clusters(measurements, gates: list[Ellipse]) -> GateResult:
    """Point-in-ellipse assignment with per-cluster occupancy fractions."""
    pts = measurements_to_array(measurements)
    total = len(pts)
    assignments = np.full(total, -1, dtype=int)
    clusters = []
    means, covs = [], []
    for i, g in enumerate(gates):
        inside = g.contains(pts) & (assignments == -1)
        assignments[inside] = i
        n = int(inside.sum())
        frac, lo, hi = wilson_interval(n, total)
        clusters.append(ClusterStats(name=g.name or f"gate{i}", n=n, total=total,
                                     fraction=frac, ci_low=lo, ci_high=hi))
        if n:
            means.append(pts[inside].mean(axis=0))
            covs.append(np.cov(pts[inside].T) if n > 1 else np.zeros((2, 2)))
        else:
            means.append(np.full(2, np.nan))
            covs.append(np.full((2, 2), np.nan))
    return GateResult(assignments=assignments, clusters=clusters,
                      means=means, covariances=covs)


def mixture_clusters(measurements, k: int, seed: int = 0) -> GateResult:
    """Seeded Gaussian-mixture gating (k-means++ init, max-responsibility)."""
    from sklearn.mixture import GaussianMixture

    pts = measurements_to_array(measurements)
    if len(pts) < k:
        raise ValueError(f"need at least {k} points for a {k}-component mixture")
    gm = GaussianMixture(n_components=k, random_state=seed,
                         init_params="k-means++", n_init=1)
    gm.fit(pts)
    if not gm.converged_:
        raise RuntimeError(f"mixture fit did not converge (lower bound {gm.lower_bound_:.3g})")
    labels = gm.predict(pts)
    total = len(pts)
    clusters = []
    means, covs = [], []
    # Deterministic cluster order: by mean d_perp then d_par.
    order = np.lexsort((gm.means_[:, 0], gm.means_[:, 1]))
    remap = {old: new for new, old in enumerate(order)}
    labels = np.array([remap[l] for l in labels])
    for newi, oldi in enumerate(order):
        n = int((labels == newi).sum())
        frac, lo, hi = wilson_interval(n, total)
        clusters.append(ClusterStats(name=f"mix{newi}", n=n, total=total,
                                     fraction=frac, ci_low=lo, ci_high=hi))
        means.append(gm.means_[oldi].copy())
        covs.append(gm.covariances_[oldi].copy())
    return GateResult(assignments=labels, clusters=clusters, means=means,
                      covariances=covs)


@dataclass
class ConditionalSplit:
    """Probe-field statistics conditioned on a source charge flag."""

    on_mean: np.ndarray | None  # source negative (charge present)
    off_mean: np.ndarray | None  # source neutral
    on_cov: np.ndarray | None
    off_cov: np.ndarray | None
    n_on: int
    n_off: int
    delta_mean: np.ndarray | None
    z_score: float | None  # pooled-covariance separation significance


def conditional_split(probe_measurements, source_flags) -> ConditionalSplit:
    """Split probe measurements by source charge flag.

    ``source_flags`` holds "negative"/"neutral"/"indeterminate" per sweep;
    indeterminate sweeps are dropped.  The z-score is the Mahalanobis
    separation of the two means under the pooled standard-error covariance.
    """
    pts = measurements_to_array(probe_measurements)
    flags = list(source_flags)
    if len(flags) != len(pts):
        raise ValueError("flags and measurements must align")
    on = pts[[f == "negative" for f in flags]]
    off = pts[[f == "neutral" for f in flags]]

    def stats(x):
        if len(x) == 0:
            return None, None
        cov = np.cov(x.T) if len(x) > 1 else np.zeros((2, 2))
        return x.mean(axis=0), cov

    on_mean, on_cov = stats(on)
    off_mean, off_cov = stats(off)
    delta = z = None
    if on_mean is not None and off_mean is not None:
        delta = on_mean - off_mean
        se = on_cov / max(len(on), 1) + off_cov / max(len(off), 1)
        se = se + np.eye(2) * 1e-18
        z = float(math.sqrt(float(delta @ np.linalg.solve(se, delta))))
    return ConditionalSplit(on_mean=on_mean, off_mean=off_mean,
                            on_cov=on_cov, off_cov=off_cov,
                            n_on=len(on), n_off=len(off),
                            delta_mean=delta, z_score=z)


def vector_sum_predict(
    bias: FieldMeasurement,
    singles: list[FieldMeasurement],
    angles: list[float],
) -> FieldMeasurement:
    """Predict the joint measurement when several traps are occupied at once.

    Each single-trap measurement gives that trap's own field contribution
    (magnitude d_perp at angle ``angles[i]`` from the bias transverse
    direction, plus a longitudinal shift d_par).  Transverse parts add as
    vectors on top of the bias; longitudinal parts add scalar-wise.
    """
    if len(singles) != len(angles):
        raise ValueError("one angle per single-trap measurement")
    for a in angles:
        if not (0.0 <= a < 2 * math.pi):
            raise ValueError("angles must lie in [0, 2*pi)")
    tx = bias.d_perp + sum(s.d_perp * math.cos(a) for s, a in zip(singles, angles))
    ty = sum(s.d_perp * math.sin(a) for s, a in zip(singles, angles))
    d_par = bias.d_par + sum(s.d_par for s in singles)
    var_par = bias.var_par + sum(s.var_par for s in singles)
    var_perp = bias.var_perp + sum(s.var_perp for s in singles)
    return FieldMeasurement(d_par=d_par, d_perp=math.hypot(tx, ty),
                            var_par=var_par, var_perp=var_perp)
