"""Single-probe trap localization.

A measurement (delta_par, e_perp, y_perp) pins a point charge to a
one-parameter family of positions: for each transverse-rotation angle theta
the charge-induced field is

    Ec(theta) = (e_perp*cos(theta) - y_perp, e_perp*sin(theta), delta_par)

and the charge sits at distance sqrt(|q|*kappa/|Ec|) along -sign(q)*Ec_hat
(an electron lies along the field it produces at the probe).  Measurement
noise turns the loop into either a sum of propagated 3D Gaussians spaced
uniformly in overlap along the loop, or a full Bayesian posterior on a
voxel grid; both are provided, plus an overlap score to compare them.

All positions are nm in the probe NV's frame (z along the NV axis, x along
the transverse bias).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import PhysicalConstants

# Covariance floor applied when a propagation derivative vanishes, nm^2.
COV_FLOOR_NM2 = 0.1**2
# Peak-normalized overlap of adjacent loop Gaussians.
LOOP_OVERLAP = 0.8


class SingularityError(ValueError):
    """The charge-induced field vanishes; position is undefined."""


@dataclass
class Measurement:
    """Fields with (e_perp) and without (y_perp) the added charge, GHz."""

    delta_par: float  # longitudinal change e_par - y_par
    e_perp: float  # joint transverse magnitude
    y_perp: float  # bias transverse magnitude
    var_par: float = 0.0
    var_e_perp: float = 0.0
    var_y_perp: float = 0.0

    def __post_init__(self):
        if self.e_perp < 0 or self.y_perp < 0:
            raise ValueError("transverse magnitudes must be >= 0")
        if min(self.var_par, self.var_e_perp, self.var_y_perp) < 0:
            raise ValueError("variances must be >= 0")

    def charge_field(self, theta: float) -> np.ndarray:
        return np.array([
            self.e_perp * math.cos(theta) - self.y_perp,
            self.e_perp * math.sin(theta),
            self.delta_par,
        ])


def loop_position(theta: float, m: Measurement, q: float,
                  c: PhysicalConstants | None = None) -> np.ndarray:
    """Charge position (nm, NV frame) for transverse rotation ``theta``."""
    c = c or PhysicalConstants()
    ec = m.charge_field(theta)
    norm = float(np.linalg.norm(ec))
    if norm == 0.0:
        raise SingularityError("charge-induced field is zero; no position")
    radius = math.sqrt(abs(q) * c.coulomb_ghz_nm2 / norm)
    direction = -math.copysign(1.0, q) * ec / norm
    return radius * direction


@dataclass
class LoopComponent:
    theta: float
    center: np.ndarray  # nm
    cov: np.ndarray  # 3x3 nm^2
    weight: float  # z_k = (2 pi)^{3/2} sqrt(det cov)


@dataclass
class LoopMixture:
    components: list[LoopComponent]
    charge_e: float

    @property
    def total_weight(self) -> float:
        return sum(comp.weight for comp in self.components)

    def density(self, points: np.ndarray) -> np.ndarray:
        """Normalized mixture density (nm^-3) at (N, 3) points."""
        pts = np.atleast_2d(points)
        out = np.zeros(len(pts))
        for comp in self.components:
            d = pts - comp.center
            prec = np.linalg.inv(comp.cov)
            maha = np.einsum("ni,ij,nj->n", d, prec, d)
            norm = 1.0 / math.sqrt((2 * math.pi) ** 3 * np.linalg.det(comp.cov))
            out += comp.weight * norm * np.exp(-0.5 * maha)
        return out / self.total_weight

    def to_json(self) -> dict:
        return {"charge_e": self.charge_e, "components": [{
            "theta": comp.theta,
            "center_nm": [float(x) for x in comp.center],
            "cov_nm2": [[float(x) for x in row] for row in comp.cov],
            "weight": comp.weight,
        } for comp in self.components]}

    @classmethod
    def from_json(cls, d: dict) -> "LoopMixture":
        comps = [LoopComponent(theta=e["theta"],
                               center=np.array(e["center_nm"]),
                               cov=np.array(e["cov_nm2"]),
                               weight=e["weight"]) for e in d["components"]]
        return cls(components=comps, charge_e=d["charge_e"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "LoopMixture":
        return cls.from_json(json.loads(Path(path).read_text()))


def _position_jacobian(theta: float, m: Measurement, q: float,
                       c: PhysicalConstants) -> np.ndarray:
    """d(position)/d(delta_par, e_perp, y_perp) by central differences."""
    cols = []
    for attr in ("delta_par", "e_perp", "y_perp"):
        v = getattr(m, attr)
        h = max(1e-6, 1e-5 * abs(v))
        vals = []
        for sgn in (+1, -1):
            kw = {"delta_par": m.delta_par, "e_perp": m.e_perp, "y_perp": m.y_perp}
            kw[attr] = v + sgn * h
            # magnitudes may ephemerally go negative during differencing
            kw[attr] = kw[attr] if attr == "delta_par" else max(kw[attr], 0.0)
            mm = Measurement(**kw)
            vals.append(loop_position(theta, mm, q, c))
        cols.append((vals[0] - vals[1]) / (2 * h))
    return np.column_stack(cols)


def _component_at(theta: float, m: Measurement, q: float, c: PhysicalConstants,
                  diagonal_cov: bool) -> LoopComponent:
    center = loop_position(theta, m, q, c)
    jac = _position_jacobian(theta, m, q, c)
    sig2 = np.array([m.var_par, m.var_e_perp, m.var_y_perp])
    cov = jac @ np.diag(sig2) @ jac.T
    if diagonal_cov:
        cov = np.diag(np.diag(cov))
    # Regularize vanishing directions.
    w, v = np.linalg.eigh(cov)
    w = np.maximum(w, COV_FLOOR_NM2)
    cov = v @ np.diag(w) @ v.T
    weight = (2 * math.pi) ** 1.5 * math.sqrt(float(np.linalg.det(cov)))
    return LoopComponent(theta=theta, center=center, cov=cov, weight=weight)


def gaussian_loop(m: Measurement, q: float, c: PhysicalConstants | None = None,
                  diagonal_cov: bool = False,
                  max_components: int = 4000) -> LoopMixture:
    """Gaussian loop-mixture posterior via error propagation.

    The theta grid is built adaptively so each peak-normalized Gaussian
    evaluates to ~LOOP_OVERLAP at its predecessor's center, then rescaled to
    close the loop exactly; weights make the density uniform in theta.
    ``diagonal_cov`` drops the Jacobian cross terms (axis-wise propagation).
    """
    c = c or PhysicalConstants()
    if max(m.var_par, m.var_e_perp, m.var_y_perp) <= 0:
        raise ValueError("gaussian_loop requires at least one positive variance")
    target = -2.0 * math.log(LOOP_OVERLAP)  # Mahalanobis^2 at the neighbor

    thetas = [0.0]
    comp = _component_at(0.0, m, q, c, diagonal_cov)
    prec = np.linalg.inv(comp.cov)
    h = 1e-3
    while thetas[-1] < 2 * math.pi and len(thetas) < max_components:
        t = thetas[-1]
        tangent = (loop_position(t + h, m, q, c) - loop_position(t - h, m, q, c)) / (2 * h)
        rate2 = float(tangent @ prec @ tangent)
        step = math.sqrt(target / rate2) if rate2 > 0 else 2 * math.pi
        step = min(step, math.pi / 4)
        thetas.append(t + step)
        comp = _component_at(thetas[-1], m, q, c, diagonal_cov)
        prec = np.linalg.inv(comp.cov)
    # Rescale so the adaptive spacing pattern closes the loop exactly: the
    # gap between the last and first components matches the local spacing.
    thetas = np.array(thetas)
    if len(thetas) > 2:
        last_step = thetas[-1] - thetas[-2]
        thetas = thetas[:-1] * (2 * math.pi / thetas[-1]) if thetas[-1] >= 2 * math.pi \
            else thetas * (2 * math.pi / (thetas[-1] + last_step))
    comps = [_component_at(t, m, q, c, diagonal_cov) for t in thetas]
    return LoopMixture(components=comps, charge_e=q)


@dataclass
class GridSpec:
    origin_nm: np.ndarray  # corner of the first voxel
    spacing_nm: np.ndarray  # per-axis voxel size
    dims: tuple[int, int, int]

    def __post_init__(self):
        self.origin_nm = np.asarray(self.origin_nm, dtype=float)
        self.spacing_nm = np.asarray(self.spacing_nm, dtype=float)
        if np.any(self.spacing_nm <= 0):
            raise ValueError("grid spacing must be positive")

    @classmethod
    def centered(cls, extent_nm, dims, center=(0.0, 0.0, 0.0)) -> "GridSpec":
        extent = np.asarray(extent_nm, dtype=float)
        dims = tuple(int(d) for d in dims)
        spacing = extent / np.asarray(dims)
        origin = np.asarray(center, dtype=float) - extent / 2.0
        return cls(origin_nm=origin, spacing_nm=spacing, dims=dims)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing_nm))

    def centers(self) -> np.ndarray:
        """(N, 3) voxel centers in C order."""
        axes = [self.origin_nm[i] + self.spacing_nm[i] * (np.arange(self.dims[i]) + 0.5)
                for i in range(3)]
        xx, yy, zz = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])


@dataclass
class VoxelPosterior:
    grid: GridSpec
    density: np.ndarray  # flat, nm^-3, integrates to 1
    charge_e: float | None = None

    def __post_init__(self):
        self.density = np.asarray(self.density, dtype=float).ravel()
        if self.density.size != int(np.prod(self.grid.dims)):
            raise ValueError("density size does not match grid dims")

    @property
    def masses(self) -> np.ndarray:
        return self.density * self.grid.voxel_volume

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def mean_position(self) -> np.ndarray:
        return (self.grid.centers() * self.masses[:, None]).sum(axis=0)

    def mean_distance(self, origin=(0.0, 0.0, 0.0)):
        """Posterior mean and std of the distance to ``origin``."""
        r = np.linalg.norm(self.grid.centers() - np.asarray(origin), axis=1)
        mean = float((r * self.masses).sum())
        var = float(((r - mean) ** 2 * self.masses).sum())
        return mean, math.sqrt(max(var, 0.0))

    def save(self, path_stem) -> None:
        """Flat float32 little-endian array + JSON sidecar."""
        stem = Path(path_stem)
        self.density.astype("<f4").tofile(stem.with_suffix(".f32"))
        sidecar = {
            "origin_nm": [float(x) for x in self.grid.origin_nm],
            "spacing_nm": [float(x) for x in self.grid.spacing_nm],
            "dims": list(self.grid.dims),
            "q": self.charge_e,
            "total_mass": self.total_mass,
        }
        stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=1) + "\n")

    @classmethod
    def load(cls, path_stem) -> "VoxelPosterior":
        stem = Path(path_stem)
        sidecar = json.loads(stem.with_suffix(".json").read_text())
        density = np.fromfile(stem.with_suffix(".f32"), dtype="<f4").astype(float)
        grid = GridSpec(origin_nm=sidecar["origin_nm"],
                        spacing_nm=sidecar["spacing_nm"],
                        dims=tuple(sidecar["dims"]))
        return cls(grid=grid, density=density, charge_e=sidecar.get("q"))


DEFAULT_VOLUME = ((600.0, 600.0, 2000.0), (64, 64, 128))


def predicted_measurement(points: np.ndarray, q: float, y_perp: float,
                          c: PhysicalConstants):
    """(delta_par, e_perp) a charge q at each point would produce."""
    pts = np.atleast_2d(points)
    rn = np.linalg.norm(pts, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = -c.coulomb_ghz_nm2 * q * pts / rn[:, None] ** 3
    pred_par = f[:, 2]
    pred_perp = np.hypot(y_perp + f[:, 0], f[:, 1])
    return pred_par, pred_perp


def bayes_posterior(m: Measurement, q: float,
                    c: PhysicalConstants | None = None,
                    volume: GridSpec | None = None) -> VoxelPosterior:
    """Flat-prior Bayesian posterior for the charge position on a grid.

    The likelihood is a product of independent Gaussians in the measured
    (delta_par, e_perp); the bias-magnitude uncertainty is folded into the
    transverse variance.  Warns when >1% of the mass sits on the volume
    boundary.
    """
    c = c or PhysicalConstants()
    if volume is None:
        volume = GridSpec.centered(*DEFAULT_VOLUME)
    var_par = m.var_par
    var_perp = m.var_e_perp + m.var_y_perp
    if var_par <= 0 or var_perp <= 0:
        raise ValueError("bayes_posterior requires positive variances")
    pts = volume.centers()
    pred_par, pred_perp = predicted_measurement(pts, q, m.y_perp, c)
    loglik = (-0.5 * (pred_par - m.delta_par) ** 2 / var_par
              - 0.5 * (pred_perp - m.e_perp) ** 2 / var_perp)
    loglik[~np.isfinite(loglik)] = -np.inf
    loglik -= loglik.max()
    lik = np.exp(loglik)
    norm = lik.sum() * volume.voxel_volume
    if norm == 0.0:
        raise ValueError("likelihood vanished everywhere on the grid")
    density = lik / norm
    post = VoxelPosterior(grid=volume, density=density, charge_e=q)
    if _boundary_mass(post) > 0.01:
        warnings.warn("posterior mass on volume boundary exceeds 1%; "
                      "enlarge the search volume", stacklevel=2)
    return post


def _boundary_mass(p: VoxelPosterior) -> float:
    masses = p.masses.reshape(p.grid.dims)
    inner = masses[1:-1, 1:-1, 1:-1].sum() if min(p.grid.dims) > 2 else 0.0
    return float(masses.sum() - inner)


def render_mixture(mix: LoopMixture, grid: GridSpec,
                   n_sigma: float = 6.0) -> VoxelPosterior:
    """Evaluate a loop mixture on a voxel grid and renormalize discretely.

    Each Gaussian is evaluated inside its +-``n_sigma`` bounding box and
    renormalized there so its discrete mass equals its mixture weight even
    when narrower than a voxel; components entirely off-grid are dropped.
    """
    out = np.zeros(grid.dims)
    axes = [grid.origin_nm[i] + grid.spacing_nm[i] * (np.arange(grid.dims[i]) + 0.5)
            for i in range(3)]
    for comp in mix.components:
        sigma_max = math.sqrt(float(np.linalg.eigvalsh(comp.cov)[-1]))
        radius = max(n_sigma * sigma_max, 1.5 * float(grid.spacing_nm.max()))
        sl, local = [], []
        for i in range(3):
            lo = int(np.searchsorted(axes[i], comp.center[i] - radius))
            hi = int(np.searchsorted(axes[i], comp.center[i] + radius))
            if lo >= hi:
                break
            sl.append(slice(lo, hi))
            local.append(axes[i][lo:hi] - comp.center[i])
        else:
            prec = np.linalg.inv(comp.cov)
            dx, dy, dz = np.meshgrid(*local, indexing="ij")
            d = np.stack([dx, dy, dz], axis=-1)
            maha = np.einsum("...i,ij,...j->...", d, prec, d)
            vals = np.exp(-0.5 * maha)
            mass = vals.sum()
            if mass > 0:
                out[tuple(sl)] += comp.weight * vals / (mass * grid.voxel_volume)
            else:
                # Narrow component between voxel samples: deposit on the
                # voxel nearest its center to preserve its mass.
                idx = tuple(int(np.clip(np.searchsorted(axes[i], comp.center[i]),
                                        0, grid.dims[i] - 1)) for i in range(3))
                out[idx] += comp.weight / grid.voxel_volume
    density = out.ravel() / mix.total_weight
    total = density.sum() * grid.voxel_volume
    if total == 0.0:
        raise ValueError("mixture has no support on the grid")
    return VoxelPosterior(grid=grid, density=density / total,
                          charge_e=mix.charge_e)


def posterior_compare(a: "LoopMixture | VoxelPosterior", b: VoxelPosterior) -> float:
    """Bhattacharyya coefficient of two densities on b's grid, in [0, 1]."""
    pa = render_mixture(a, b.grid) if isinstance(a, LoopMixture) else a
    if pa.grid.dims != b.grid.dims or not np.allclose(pa.grid.origin_nm, b.grid.origin_nm):
        raise ValueError("posterior_compare requires a common grid")
    return float(np.sqrt(pa.masses * b.masses).sum())


def credible_region(p: VoxelPosterior, level: float):
    """Highest-posterior-density mask whose mass >= level.

    Returns (mask over flat voxels, region volume in nm^3).
    """
    if not (0.0 < level <= 1.0):
        raise ValueError("level must lie in (0, 1]")
    masses = p.masses
    order = np.argsort(masses)[::-1]
    csum = np.cumsum(masses[order])
    n_sel = int(np.searchsorted(csum, level * p.total_mass) + 1)
    n_sel = min(n_sel, int((masses > 0).sum()))
    mask = np.zeros(masses.size, dtype=bool)
    mask[order[:n_sel]] = True
    return mask, float(mask.sum()) * p.grid.voxel_volume
