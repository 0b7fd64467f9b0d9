"""Multi-probe fusion: reconstructing relative geometry of interacting probes.

When several negatively charged probes perturb each other, each ordered pair
(source alpha, probe beta) yields a localization loop for alpha's position in
beta's frame.  Frames of same-axis probes share their z axis up to a sign and
differ by an unknown azimuth phi (each probe's x axis is pinned to its own
transverse bias direction), so a point r in alpha's frame maps to beta's via

    r_beta = R_alpha_beta + Q r_alpha,   Q = R_z(phi) * M_s,

with M_+ = I, M_- = diag(1, -1, -1).  The search proceeds in stages: gate
joint transverse fields against a vector-sum consistency score, match loop
components against the reciprocal loop under the antipodal map, confirm with
a third probe located two independent ways, then aggregate survivors into
voxel posteriors and a phi estimate.  A separate routine co-localizes a dark
trap seen by two probes and scores the electron-vs-hole hypothesis by the
evidence (mass) of the product posterior.

Positions are nm; hypothesis coordinates live in the anchor probe's frame.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import PhysicalConstants
from .locate import (GridSpec, LoopComponent, LoopMixture, Measurement,
                     VoxelPosterior, bayes_posterior, gaussian_loop,
                     render_mixture)

EVIDENCE_FLOOR = 1e-300
DEFAULT_Z_GATE = 2.0
DEFAULT_SURVIVOR_CAP = 5000
# Loops are subsampled to at most this many components before the
# combinatorial matching stages.
MATCH_MAX_COMPONENTS = 120
PHI_COARSE_DEG = 5.0
PHI_REFINE_DEG = 1.0


class InconsistencyError(RuntimeError):
    """Every hypothesis was discarded; the model or data are inconsistent."""


def rot_z(phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def frame_map(phi: float, s: int) -> np.ndarray:
    """Rotation Q mapping source-frame vectors into the probe frame."""
    m = np.diag([1.0, -1.0, -1.0]) if s < 0 else np.eye(3)
    return rot_z(phi) @ m


@dataclass
class PairInput:
    """Conditional-split result for source toggling seen by one probe."""

    source_id: str
    probe_id: str
    measurement: Measurement
    z_score: float  # split significance from fieldstats
    charge_e: float = -1.0


@dataclass
class ProbePair:
    source_id: str
    probe_id: str
    loop: LoopMixture
    induced_fields: np.ndarray  # (n_components, 3), GHz, probe frame

    def __post_init__(self):
        if len(self.induced_fields) != len(self.loop.components):
            raise ValueError("induced fields must align with loop components")

    def subsampled(self, max_components: int = MATCH_MAX_COMPONENTS) -> "ProbePair":
        """Coarsen the loop by moment-matching runs of adjacent components.

        Merging (rather than decimating) keeps the coarse loop gap-free:
        each merged Gaussian absorbs the spread of the centers it replaces.
        """
        n = len(self.loop.components)
        if n <= max_components:
            return self
        bounds = np.linspace(0, n, max_components + 1).round().astype(int)
        comps, fields = [], []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            group = self.loop.components[lo:hi]
            w = np.array([g.weight for g in group])
            mu = np.array([g.center for g in group])
            mean = (w[:, None] * mu).sum(axis=0) / w.sum()
            cov = np.zeros((3, 3))
            for g, wi in zip(group, w):
                d = g.center - mean
                cov += wi * (g.cov + np.outer(d, d))
            cov /= w.sum()
            mid = (lo + hi) // 2
            comps.append(LoopComponent(
                theta=self.loop.components[mid].theta, center=mean,
                cov=cov, weight=float(w.sum())))
            fields.append(self.induced_fields[mid])
        return ProbePair(
            source_id=self.source_id, probe_id=self.probe_id,
            loop=LoopMixture(components=comps, charge_e=self.loop.charge_e),
            induced_fields=np.array(fields))


def pairwise_loops(inputs: list[PairInput], c: PhysicalConstants | None = None,
                   z_min: float = DEFAULT_Z_GATE) -> list[ProbePair]:
    """Build one localization loop per ordered (source, probe) pair.

    Pairs whose conditional split is insignificant (z < z_min) are omitted
    with a warning: that source is effectively invisible to that probe.
    """
    c = c or PhysicalConstants()
    pairs = []
    for inp in inputs:
        if inp.z_score < z_min:
            warnings.warn(
                f"pair ({inp.source_id} -> {inp.probe_id}) omitted: split "
                f"significance z = {inp.z_score:.2f} < {z_min}", stacklevel=2)
            continue
        loop = gaussian_loop(inp.measurement, inp.charge_e, c)
        fields = np.array([inp.measurement.charge_field(comp.theta)
                           for comp in loop.components])
        pairs.append(ProbePair(source_id=inp.source_id, probe_id=inp.probe_id,
                               loop=loop, induced_fields=fields))
    return pairs


def transverse_sum_gate(pair_a: ProbePair, pair_g: ProbePair,
                        measured_sum_perp: float, sigma_sum: float,
                        y_perp: float, z_max: float = DEFAULT_Z_GATE):
    """Vector-sum consistency of two sources seen jointly by one probe.

    For every component pair (k, k') the predicted joint transverse
    magnitude is |bias + F_perp(a, k) + F_perp(g, k')|; pairs with
    Z = |predicted - measured| / sigma above ``z_max`` are discarded, and
    survivors are reweighted by exp(-Z^2/2).  Returns (k_idx, kp_idx,
    weights) arrays.
    """
    if pair_a.probe_id != pair_g.probe_id:
        raise ValueError("transverse_sum_gate requires a common probe")
    fa = pair_a.induced_fields[:, :2]
    fg = pair_g.induced_fields[:, :2]
    # The probe-frame bias is its own x axis; the cached fields already
    # include the -y_perp offset along x, so add the bias back per source
    # and keep a single bias for the joint sum.
    joint = fa[:, None, :] + fg[None, :, :] + np.array([y_perp, 0.0])
    pred = np.linalg.norm(joint, axis=-1)
    z = np.abs(pred - measured_sum_perp) / sigma_sum
    keep = z <= z_max
    if not keep.any():
        raise InconsistencyError("transverse-sum gate discarded every "
                                 "component pair")
    k_idx, kp_idx = np.nonzero(keep)
    weights = np.exp(-0.5 * z[keep] ** 2)
    return k_idx, kp_idx, weights


@dataclass
class MatchHypothesis:
    k: int
    kp: int
    phi: float
    s: int
    center: np.ndarray  # product-Gaussian center, probe frame, nm
    cov: np.ndarray
    renorm: float  # F, the Gaussian-product amplitude
    z: float
    third_center: np.ndarray | None = None
    third_cov: np.ndarray | None = None
    third_renorm: float = 1.0

    @property
    def weight(self) -> float:
        return self.renorm * self.third_renorm


def _gaussian_product(mu1, cov1, mu2, cov2):
    """Product of two Gaussians: (center, covariance, amplitude F)."""
    s = cov1 + cov2
    d = mu1 - mu2
    prec = np.linalg.inv(s)
    f = math.exp(-0.5 * float(d @ prec @ d)) / math.sqrt(
        (2 * math.pi) ** 3 * float(np.linalg.det(s)))
    p1, p2 = np.linalg.inv(cov1), np.linalg.inv(cov2)
    cov = np.linalg.inv(p1 + p2)
    center = cov @ (p1 @ mu1 + p2 @ mu2)
    return center, cov, f


def _phi_grid(coarse_deg: float = PHI_COARSE_DEG) -> np.ndarray:
    n = int(round(360.0 / coarse_deg))
    return np.arange(n) * math.radians(coarse_deg)


def _match_at_phi(centers, covs, weights, rec_centers, rec_covs, rec_weights,
                  phi, s, z_max):
    """Vectorized hypothesis generation for one (phi, s)."""
    q = frame_map(phi, s)
    mapped = (q @ (-rec_centers.T)).T
    mapped_cov = np.einsum("ij,njk,lk->nil", q, rec_covs, q)
    d = centers[:, None, :] - mapped[None, :, :]
    # Cheap Euclidean pre-gate before the exact Mahalanobis score.
    scale = np.sqrt(np.einsum("nii->n", covs))[:, None] + \
        np.sqrt(np.einsum("nii->n", mapped_cov))[None, :]
    close = np.linalg.norm(d, axis=-1) <= z_max * scale
    k_idx, kp_idx = np.nonzero(close)
    if len(k_idx) == 0:
        return []
    dv = d[k_idx, kp_idx]
    ssum = covs[k_idx] + mapped_cov[kp_idx]
    z = np.sqrt(np.einsum("ni,nij,nj->n", dv, np.linalg.inv(ssum), dv))
    ok = z <= z_max
    out = []
    for k, kp, zi in zip(k_idx[ok], kp_idx[ok], z[ok]):
        center, cov, f = _gaussian_product(centers[k], covs[k],
                                           mapped[kp], mapped_cov[kp])
        out.append(MatchHypothesis(k=int(k), kp=int(kp), phi=phi, s=s,
                                   center=center, cov=cov,
                                   renorm=f * weights[k] * rec_weights[kp],
                                   z=float(zi)))
    return out


def reciprocal_match(pair_ab: ProbePair, pair_ba: ProbePair,
                     z_max: float = DEFAULT_Z_GATE,
                     cap: int = DEFAULT_SURVIVOR_CAP,
                     signs=(1, -1)) -> list[MatchHypothesis]:
    """Match a loop against its reciprocal under the antipodal frame map.

    Scans phi on a coarse 5-degree grid and refines at 1 degree around
    surviving angles; each survivor carries the product Gaussian of the two
    matched components and its renormalization factor F.
    """
    ab = pair_ab.subsampled()
    ba = pair_ba.subsampled()
    centers = np.array([cc.center for cc in ab.loop.components])
    covs = np.array([cc.cov for cc in ab.loop.components])
    wts = np.array([cc.weight for cc in ab.loop.components])
    wts /= wts.sum()
    rec_centers = np.array([cc.center for cc in ba.loop.components])
    rec_covs = np.array([cc.cov for cc in ba.loop.components])
    rec_wts = np.array([cc.weight for cc in ba.loop.components])
    rec_wts /= rec_wts.sum()

    survivors = []
    hit_phis = set()
    for phi in _phi_grid():
        for s in signs:
            found = _match_at_phi(centers, covs, wts, rec_centers, rec_covs,
                                  rec_wts, phi, s, z_max)
            if found:
                hit_phis.add((round(math.degrees(phi)), s))
                survivors.extend(found)
    refine = math.radians(PHI_REFINE_DEG)
    for deg, s in sorted(hit_phis):
        base = math.radians(deg)
        for step in (-4, -3, -2, -1, 1, 2, 3, 4):
            survivors.extend(_match_at_phi(
                centers, covs, wts, rec_centers, rec_covs, rec_wts,
                (base + step * refine) % (2 * math.pi), s, z_max))
    if not survivors:
        raise InconsistencyError("reciprocal match discarded every hypothesis")
    survivors.sort(key=lambda h: h.z)
    return survivors[:cap]


def third_position_consensus(matches: list[MatchHypothesis],
                             pair_gb: ProbePair, pair_ga: ProbePair,
                             z_max: float = DEFAULT_Z_GATE,
                             cap: int = DEFAULT_SURVIVOR_CAP) -> list[MatchHypothesis]:
    """Confirm hypotheses by locating a third probe two independent ways.

    The third probe's position in the anchor frame comes directly from its
    loop at the anchor, and indirectly by composing its loop at the matched
    probe with the hypothesis frame map; consistent composites are
    multiplied and the new renormalization recorded.
    """
    gb = pair_gb.subsampled()
    ga = pair_ga.subsampled()
    direct_c = np.array([cc.center for cc in gb.loop.components])
    direct_v = np.array([cc.cov for cc in gb.loop.components])
    direct_w = np.array([cc.weight for cc in gb.loop.components])
    direct_w /= direct_w.sum()
    ga_c = np.array([cc.center for cc in ga.loop.components])
    ga_v = np.array([cc.cov for cc in ga.loop.components])
    ga_w = np.array([cc.weight for cc in ga.loop.components])
    ga_w /= ga_w.sum()
    direct_scale = np.sqrt(np.einsum("nii->n", direct_v))

    out = []
    for hyp in matches:
        q = frame_map(hyp.phi, hyp.s)
        comp_c = hyp.center + (q @ ga_c.T).T
        comp_v = hyp.cov + np.einsum("ij,njk,lk->nil", q, ga_v, q)
        comp_scale = np.sqrt(np.einsum("nii->n", comp_v))
        d = direct_c[:, None, :] - comp_c[None, :, :]
        close = np.linalg.norm(d, axis=-1) <= \
            z_max * (direct_scale[:, None] + comp_scale[None, :])
        j_idx, m_idx = np.nonzero(close)
        if len(j_idx) == 0:
            continue
        dv = d[j_idx, m_idx]
        ssum = direct_v[j_idx] + comp_v[m_idx]
        z = np.sqrt(np.einsum("ni,nij,nj->n", dv, np.linalg.inv(ssum), dv))
        ok = z <= z_max
        for j, mi, zi in zip(j_idx[ok], m_idx[ok], z[ok]):
            center, cov, f = _gaussian_product(direct_c[j], direct_v[j],
                                               comp_c[mi], comp_v[mi])
            out.append(MatchHypothesis(
                k=hyp.k, kp=hyp.kp, phi=hyp.phi, s=hyp.s,
                center=hyp.center, cov=hyp.cov, renorm=hyp.renorm,
                z=max(hyp.z, float(zi)),
                third_center=center, third_cov=cov,
                third_renorm=f * direct_w[j] * ga_w[mi]))
    if not out:
        raise InconsistencyError("third-probe consensus discarded every "
                                 "hypothesis")
    out.sort(key=lambda h: -h.weight)
    return out[:cap]


@dataclass
class DarkTrapResult:
    posterior: VoxelPosterior | None  # best-sign product posterior
    evidence_electron: float
    evidence_hole: float
    sign_ratio: float | None  # log10(electron / hole); None if no trap

    @property
    def consistent(self) -> bool:
        return self.sign_ratio is not None

    @property
    def favored_charge(self) -> float | None:
        if not self.consistent:
            return None
        return -1.0 if self.sign_ratio >= 0 else +1.0


@dataclass
class ClusterSolution:
    anchor_id: str
    posteriors: dict  # nv id -> VoxelPosterior in the anchor frame
    phi_deg: float
    phi_std_deg: float
    hypotheses: list[MatchHypothesis] = field(default_factory=list)
    dark_traps: dict = field(default_factory=dict)  # trap id -> DarkTrapResult

    def mean_positions(self) -> dict:
        return {nv: p.mean_position() for nv, p in self.posteriors.items()}

    def distances(self) -> dict:
        """nv id -> (posterior mean distance to anchor, std), nm."""
        return {nv: p.mean_distance() for nv, p in self.posteriors.items()}

    def to_json(self) -> dict:
        entries = {}
        for nv, p in self.posteriors.items():
            mean, std = p.mean_distance()
            entries[nv] = {
                "mean_position_nm": [float(x) for x in p.mean_position()],
                "distance_nm": mean, "distance_std_nm": std,
            }
        traps = {}
        for tid, res in self.dark_traps.items():
            traps[tid] = {
                "evidence_electron": res.evidence_electron,
                "evidence_hole": res.evidence_hole,
                "sign_log10_ratio": res.sign_ratio,
                "favored_charge_e": res.favored_charge,
            }
        return {"anchor": self.anchor_id, "phi_deg": self.phi_deg,
                "phi_std_deg": self.phi_std_deg, "probes": entries,
                "dark_traps": traps, "n_hypotheses": len(self.hypotheses)}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")


def _circular_stats(phis: np.ndarray, weights: np.ndarray):
    w = weights / weights.sum()
    z = np.sum(w * np.exp(1j * phis))
    mean = math.atan2(z.imag, z.real) % (2 * math.pi)
    r = min(abs(z), 1.0)
    std = math.sqrt(-2.0 * math.log(r)) if r > 1e-12 else math.pi
    return mean, std


def aggregate(hypotheses: list[MatchHypothesis], anchor_id: str,
              matched_id: str, third_id: str | None = None,
              grid: GridSpec | None = None) -> ClusterSolution:
    """Weighted sum of surviving hypotheses into per-probe posteriors."""
    if not hypotheses:
        raise InconsistencyError("nothing to aggregate")
    if grid is None:
        grid = GridSpec.centered((400.0, 400.0, 400.0), (96, 96, 96))
    weights = np.array([h.weight for h in hypotheses])
    comps = [LoopComponent(theta=h.phi, center=h.center, cov=h.cov, weight=w)
             for h, w in zip(hypotheses, weights)]
    posteriors = {matched_id: render_mixture(
        LoopMixture(components=comps, charge_e=-1.0), grid)}
    if third_id is not None:
        third = [(h, w) for h, w in zip(hypotheses, weights)
                 if h.third_center is not None]
        if third:
            comps3 = [LoopComponent(theta=h.phi, center=h.third_center,
                                    cov=h.third_cov, weight=w)
                      for h, w in third]
            posteriors[third_id] = render_mixture(
                LoopMixture(components=comps3, charge_e=-1.0), grid)
    phis = np.array([h.phi for h in hypotheses])
    phi_mean, phi_std = _circular_stats(phis, weights)
    return ClusterSolution(anchor_id=anchor_id, posteriors=posteriors,
                           phi_deg=math.degrees(phi_mean),
                           phi_std_deg=math.degrees(phi_std),
                           hypotheses=list(hypotheses))


@dataclass
class TrapObservation:
    """One probe's view of a dark trap, with the probe's pose."""

    measurement: Measurement
    probe_position: np.ndarray  # nm in the common (anchor) frame
    phi: float = 0.0  # probe x axis azimuth in the common frame
    s: int = 1

    def __post_init__(self):
        self.probe_position = np.asarray(self.probe_position, dtype=float)


def _trap_likelihood(obs: TrapObservation, q: float, pts: np.ndarray,
                     c: PhysicalConstants) -> np.ndarray:
    """Unnormalized likelihood of obs for charge q at common-frame points."""
    from .locate import predicted_measurement
    local = (frame_map(obs.phi, obs.s).T @ (pts - obs.probe_position).T).T
    pred_par, pred_perp = predicted_measurement(local, q,
                                                obs.measurement.y_perp, c)
    m = obs.measurement
    var_perp = m.var_e_perp + m.var_y_perp
    ll = (-0.5 * (pred_par - m.delta_par) ** 2 / m.var_par
          - 0.5 * (pred_perp - m.e_perp) ** 2 / var_perp)
    ll[~np.isfinite(ll)] = -np.inf
    return ll


def dark_trap_colocalize(obs1: TrapObservation, obs2: TrapObservation | None,
                         c: PhysicalConstants | None = None,
                         grid: GridSpec | None = None) -> DarkTrapResult:
    """Co-localize a dark trap and score electron vs hole.

    Each probe's normalized posterior for the trap position is evaluated on
    a common grid; their product's mass is the evidence for the sign
    hypothesis (|q| fixed at one elementary charge).  With a single
    observation the product degenerates to the posterior's self-overlap,
    which by symmetry cannot distinguish the sign.
    """
    c = c or PhysicalConstants()
    if grid is None:
        grid = GridSpec.centered((400.0, 400.0, 400.0), (96, 96, 96),
                                 center=obs1.probe_position)
    pts = grid.centers()
    evidences = {}
    best = {}
    for q in (-1.0, +1.0):
        ll1 = _trap_likelihood(obs1, q, pts, c)
        dens1 = _normalize_loglik(ll1, grid)
        if obs2 is None:
            dens2 = dens1
        else:
            dens2 = _normalize_loglik(_trap_likelihood(obs2, q, pts, c), grid)
        product = dens1 * dens2
        evidences[q] = max(float(product.sum() * grid.voxel_volume),
                           EVIDENCE_FLOOR)
        best[q] = product
    ev_e, ev_h = evidences[-1.0], evidences[+1.0]
    if ev_e <= EVIDENCE_FLOOR and ev_h <= EVIDENCE_FLOOR:
        return DarkTrapResult(posterior=None, evidence_electron=ev_e,
                              evidence_hole=ev_h, sign_ratio=None)
    ratio = math.log10(ev_e / ev_h)
    q_best = -1.0 if ratio >= 0 else +1.0
    product = best[q_best]
    posterior = VoxelPosterior(
        grid=grid, density=product / (product.sum() * grid.voxel_volume),
        charge_e=q_best)
    return DarkTrapResult(posterior=posterior, evidence_electron=ev_e,
                          evidence_hole=ev_h, sign_ratio=ratio)


def _normalize_loglik(ll: np.ndarray, grid: GridSpec) -> np.ndarray:
    m = ll.max()
    if not np.isfinite(m):
        return np.zeros_like(ll)
    dens = np.exp(ll - m)
    return dens / (dens.sum() * grid.voxel_volume)


def tripartite_search(pairs: dict, anchor_id: str, matched_id: str,
                      third_id: str | None = None,
                      z_max: float = DEFAULT_Z_GATE,
                      cap: int = DEFAULT_SURVIVOR_CAP,
                      grid: GridSpec | None = None) -> ClusterSolution:
    """Run the staged search end to end.

    ``pairs`` maps (source_id, probe_id) to ProbePair.  The anchor probe
    sits at the origin of the solution frame.
    """
    ab = pairs[(matched_id, anchor_id)]
    ba = pairs[(anchor_id, matched_id)]
    matches = reciprocal_match(ab, ba, z_max=z_max, cap=cap)
    if third_id is not None:
        gb = pairs[(third_id, anchor_id)]
        ga = pairs[(third_id, matched_id)]
        matches = third_position_consensus(matches, gb, ga, z_max=z_max,
                                           cap=cap)
    return aggregate(matches, anchor_id, matched_id, third_id, grid=grid)
