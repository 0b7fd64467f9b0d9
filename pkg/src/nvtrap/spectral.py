"""NV- excited-state fine structure: delta-field -> optical lines and back.

The six zero-phonon-line resonances are the eigenvalues of the 6x6
excited-state Hamiltonian in the orbital {X, Y} (x) spin {+1, 0, -1} product
basis.  The transverse field enters the orbital block, the longitudinal field
is a uniform shift of all six lines.  Labels (E1, E2, Ey, Ex, A1, A2) are
assigned by adiabatic continuation from the zero-field ordering; lines from
different orbital branches cross as the transverse field grows, so sorted
order is not label order.

A per-parameter-set lookup table (eigenvalues tracked along a dense
transverse-field ramp, plus cubic splines per labeled line) makes both the
forward map and the pairwise inversion fast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import linear_sum_assignment

from .core import FieldMeasurement, FieldVector, FrameError

LABELS = ("E1", "E2", "Ey", "Ex", "A1", "A2")

# Transverse-field range covered by the lookup table (GHz).  Inversions are
# bracketed inside this range.
DPERP_MAX = 40.0
_TABLE_POINTS = 4001
_FD_STEP = 1e-4  # finite-difference step scale for sensitivities, GHz


class EstimationError(RuntimeError):
    """Field inversion failed (degenerate pairs or out-of-bracket lines)."""


@dataclass(frozen=True)
class FineStructureConstants:
    """Excited-state fine-structure parameters, GHz.

    ``d_par``/``d_perp`` are the axial/transverse spin-spin parameters,
    ``lambda_par``/``lambda_perp`` the axial/transverse spin-orbit ones.
    The transverse spin-orbit term defaults to zero: it is small, commonly
    neglected, and it is the only term that ties the spectrum to the
    in-plane field direction rather than its magnitude alone.
    """

    d_par: float = 1.44
    d_perp: float = 0.77
    lambda_par: float = 5.33
    lambda_perp: float = 0.0

    def __post_init__(self):
        for name in ("d_par", "d_perp", "lambda_par", "lambda_perp"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite fine-structure parameter {name}")

    @classmethod
    def from_dict(cls, d: dict) -> "FineStructureConstants":
        default = cls()
        return cls(**{k: d.get(k, getattr(default, k))
                      for k in ("d_par", "d_perp", "lambda_par", "lambda_perp")})


# Spin-1 operators, basis (+1, 0, -1); orbital Pauli matrices on {X, Y}.
_SX = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]]) / math.sqrt(2)
_SY = np.array([[0, -1j, 0], [1j, 0, -1j], [0, 1j, 0]]) / math.sqrt(2)
_SZ = np.diag([1.0, 0.0, -1.0]).astype(complex)
_I3 = np.eye(3, dtype=complex)
_I2 = np.eye(2, dtype=complex)
_PX = np.array([[0, 1], [1, 0]], dtype=complex)
_PY = np.array([[0, -1j], [1j, 0]])
_PZ = np.diag([1.0, -1.0]).astype(complex)


def _h_zero(k: FineStructureConstants) -> np.ndarray:
    """Field-free 6x6 excited-state Hamiltonian."""
    return (
        np.kron(_I2, k.d_par * (_SZ @ _SZ - (2.0 / 3.0) * _I3))
        - k.lambda_par * np.kron(_PY, _SZ)
        + k.d_perp * (np.kron(_PZ, _SY @ _SY - _SX @ _SX)
                      - np.kron(_PX, _SX @ _SY + _SY @ _SX))
        + k.lambda_perp * (np.kron(_PZ, _SX @ _SZ + _SZ @ _SX)
                           - np.kron(_PX, _SY @ _SZ + _SZ @ _SY))
    )


def hamiltonian(delta_x: float, delta_y: float, delta_z: float,
                k: FineStructureConstants) -> np.ndarray:
    """Full 6x6 Hamiltonian at the given NV-frame delta-field (GHz)."""
    return (
        _h_zero(k)
        + delta_z * np.eye(6)
        + delta_x * np.kron(_PZ, _I3)
        - delta_y * np.kron(_PX, _I3)
    )


class _LineModel:
    """Adiabatically labeled eigenline table for one parameter set."""

    def __init__(self, k: FineStructureConstants):
        self.k = k
        self.h0 = _h_zero(k)
        self._px = np.kron(_PZ, _I3)
        grid = np.linspace(0.0, DPERP_MAX, _TABLE_POINTS)
        # Start slightly off zero so the E1/E2 and Ex/Ey degeneracies are
        # lifted and the zero-field ordering fixes the labels.
        grid[0] = 1e-6
        tracks = np.empty((_TABLE_POINTS, 6))
        prev = None
        for i, dp in enumerate(grid):
            w, v = np.linalg.eigh(self.h0 + dp * self._px)
            if prev is None:
                perm = np.arange(6)
            else:
                overlap = np.abs(prev.conj().T @ v)
                rows, cols = linear_sum_assignment(-overlap)
                perm = cols[np.argsort(rows)]
            tracks[i] = w[perm]
            prev = v[:, perm]
        grid[0] = 0.0
        self.grid = grid
        self.tracks = tracks
        self.spline = CubicSpline(grid, tracks)  # vector-valued, one call -> 6 lines
        self._diffs: dict[tuple[int, int], CubicSpline] = {}

    def lines_at(self, d_perp: float) -> dict[str, float]:
        """Exact eigenvalues at d_perp with table-guided label assignment."""
        if not (0.0 <= d_perp <= DPERP_MAX):
            raise EstimationError(f"d_perp {d_perp:g} GHz outside table range")
        w = np.linalg.eigvalsh(self.h0 + d_perp * self._px)
        pred = self.spline(d_perp)
        cost = np.abs(pred[:, None] - w[None, :])
        rows, cols = linear_sum_assignment(cost)
        return {LABELS[r]: float(w[ccol]) for r, ccol in zip(rows, cols)}

    def diff_spline(self, a: str, b: str) -> CubicSpline:
        key = (LABELS.index(a), LABELS.index(b))
        sp = self._diffs.get(key)
        if sp is None:
            sp = CubicSpline(self.grid, self.tracks[:, key[0]] - self.tracks[:, key[1]])
            self._diffs[key] = sp
        return sp

    def pair_roots(self, a: str, b: str, value: float) -> list[float]:
        """All d_perp in [0, DPERP_MAX] where line_a - line_b == value.

        Sign changes are located on the sampled table, then the cubic spline
        piece of each bracketing interval is solved exactly.
        """
        ia, ib = LABELS.index(a), LABELS.index(b)
        resid = self.tracks[:, ia] - self.tracks[:, ib] - value
        hit = resid[:-1] * resid[1:] <= 0.0
        idx = np.nonzero(hit)[0]
        if idx.size == 0:
            return []
        sp = self.diff_spline(a, b)
        roots = []
        for i in idx:
            dx = self.grid[i + 1] - self.grid[i]
            c3, c2, c1, c0 = sp.c[:, i]
            for t in np.roots([c3, c2, c1, c0 - value]):
                if abs(t.imag) < 1e-12 and -1e-12 <= t.real <= dx + 1e-12:
                    roots.append(float(self.grid[i] + np.clip(t.real, 0.0, dx)))
        return sorted(set(roots))

    def pair_slope(self, a: str, b: str, d_perp: float) -> float:
        return abs(float(self.diff_spline(a, b)(d_perp, 1)))


@lru_cache(maxsize=8)
def _model(k: FineStructureConstants) -> _LineModel:
    return _LineModel(k)


def zero_field_lines(k: FineStructureConstants | None = None) -> dict[str, float]:
    """The six labeled line offsets at zero delta-field (GHz)."""
    k = k or FineStructureConstants()
    return _model(k).lines_at(0.0)


def eigenlines(delta: FieldVector, k: FineStructureConstants | None = None) -> dict[str, float]:
    """Map an NV-frame delta-field to the six labeled resonance offsets."""
    if delta.frame == "lab":
        raise FrameError("eigenlines requires an NV-frame field")
    k = k or FineStructureConstants()
    dx, dy, dz = delta.v
    d_perp = math.hypot(dx, dy)
    lines = _model(k).lines_at(d_perp)
    return {lab: val + dz for lab, val in lines.items()}


def pair_sensitivity(pair: tuple[str, str], d_perp: float,
                     k: FineStructureConstants | None = None) -> float:
    """|d(line_a - line_b)/d(d_perp)| by central finite differences."""
    a, b = pair
    if a == b:
        raise ValueError("pair labels must be distinct")
    k = k or FineStructureConstants()
    m = _model(k)
    h = max(_FD_STEP, _FD_STEP * abs(d_perp))
    lo = max(0.0, d_perp - h)
    hi = min(DPERP_MAX, d_perp + h)
    flo = m.lines_at(lo)
    fhi = m.lines_at(hi)
    return abs((fhi[a] - fhi[b]) - (flo[a] - flo[b])) / (hi - lo)


def fields_from_lines(
    lines: dict[str, float],
    k: FineStructureConstants | None = None,
    line_variance: float | dict[str, float] = 0.0,
) -> FieldMeasurement:
    """Invert a (possibly partial) labeled line set back to (d_par, d_perp).

    Every label pair with nonzero transverse sensitivity contributes a
    candidate d_perp from a bracketed root find on the eigenline difference;
    candidates are combined with inverse-variance weights (variance of a pair
    estimate = (sigma_a^2 + sigma_b^2) / slope^2).  d_par is the mean offset
    of the present lines from their predicted zero-shift positions at the
    estimated d_perp.
    """
    k = k or FineStructureConstants()
    labels = [lab for lab in LABELS if lab in lines]
    if len(labels) < 2:
        raise EstimationError("need at least two labeled lines")
    for lab in labels:
        if not np.isfinite(lines[lab]):
            raise EstimationError(f"non-finite line value for {lab}")
    if isinstance(line_variance, dict):
        var = {lab: float(line_variance.get(lab, 0.0)) for lab in labels}
    else:
        var = {lab: float(line_variance) for lab in labels}

    m = _model(k)
    pairs = [(a, b) for i, a in enumerate(labels) for b in labels[i + 1:]]

    # Candidate roots per pair; a pair may admit several (non-monotone
    # differences), resolved by cross-pair consistency against the most
    # sensitive pair.
    candidates: dict[tuple[str, str], list[float]] = {}
    for a, b in pairs:
        roots = m.pair_roots(a, b, lines[a] - lines[b])
        if roots:
            candidates[(a, b)] = roots
    if not candidates:
        raise EstimationError("no pair admits a transverse-field solution in bracket")

    def mismatch(dp: float) -> float:
        model = m.spline(dp)
        return sum((model[LABELS.index(a)] - model[LABELS.index(b)]
                    - (lines[a] - lines[b])) ** 2 for a, b in pairs)

    ranked = sorted(candidates,
                    key=lambda p: -m.pair_slope(p[0], p[1], candidates[p][0]))
    primary_pair = ranked[0]
    primary = min(candidates[primary_pair], key=mismatch)

    noisy = any(v > 0 for v in var.values())
    est_num = est_den = 0.0
    for pair, roots in candidates.items():
        dp = min(roots, key=lambda r: abs(r - primary))
        s = m.pair_slope(pair[0], pair[1], dp)
        if s < 1e-9:
            continue
        a, b = pair
        if noisy:
            pair_var = (var[a] + var[b] + 1e-30) / s**2
            w = 1.0 / pair_var
        else:
            w = s**2
        est_num += w * dp
        est_den += w
    if est_den == 0.0:
        raise EstimationError("all pairs transverse-insensitive at the solution")
    d_perp = max(float(est_num / est_den), 0.0)
    var_perp = 1.0 / est_den if noisy else 0.0

    # Gauss-Newton polish on exact eigenvalues removes the residual spline
    # interpolation bias (the table is only accurate to ~1e-7 GHz).
    for _ in range(2):
        exact = m.lines_at(d_perp)
        num = den = 0.0
        for (a, b) in candidates:
            s = float(m.diff_spline(a, b)(d_perp, 1))
            if abs(s) < 1e-9:
                continue
            w = 1.0 / (var[a] + var[b]) if noisy and (var[a] + var[b]) > 0 else 1.0
            r = (exact[a] - exact[b]) - (lines[a] - lines[b])
            num += w * s * r
            den += w * s * s
        if den == 0.0:
            break
        step = num / den
        d_perp = min(max(d_perp - step, 0.0), DPERP_MAX)
        if abs(step) < 1e-12:
            break

    model_lines = m.lines_at(d_perp)
    offsets = [lines[lab] - model_lines[lab] for lab in labels]
    d_par = float(np.mean(offsets))
    var_par = float(sum(var[lab] for lab in labels)) / len(labels) ** 2
    return FieldMeasurement(d_par=d_par, d_perp=d_perp,
                            var_par=var_par, var_perp=float(var_perp))
