"""Geometry, units, constants, reference frames, and Coulomb field evaluation.

Conventions used throughout the package:

* positions in nm, fields in GHz (strain/electric fields are lumped into a
  single effective "delta-field" expressed in GHz via the Stark
  proportionality factor ``mu_e``);
* the field attributed to a point charge is the physical electric field at
  the probe scaled to GHz, so an electron produces a field pointing toward
  itself;
* every ``FieldVector`` carries an explicit frame tag ("lab" or a named NV
  frame) and mixing frames is an error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Coulomb constant times elementary charge, e/(4 pi eps0), in V*m.
_KE_E_VM = 1.602176634e-19 * 8.9875517873681764e9

# The four <111> crystallographic axes addressable by name in scene files.
AXIS_VECTORS = {
    "111": np.array([1.0, 1.0, 1.0]) / math.sqrt(3.0),
    "1-11": np.array([1.0, -1.0, 1.0]) / math.sqrt(3.0),
    "-111": np.array([-1.0, 1.0, 1.0]) / math.sqrt(3.0),
    "11-1": np.array([1.0, 1.0, -1.0]) / math.sqrt(3.0),
}

LAB_FRAME = "lab"


class FrameError(ValueError):
    """Operation mixed field vectors from different reference frames."""


def vec3(x, y, z) -> np.ndarray:
    v = np.array([x, y, z], dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite vector components: {v}")
    return v


def as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite vector components: {a}")
    return a


@dataclass(frozen=True)
class PhysicalConstants:
    """Unit conversions for the Coulomb/Stark evaluation boundary.

    ``mu_e`` is the Stark proportionality factor in GHz per MV/m; ``eps_rel``
    the relative permittivity of diamond.
    """

    mu_e: float = 6.3
    eps_rel: float = 5.7

    def __post_init__(self):
        if not (self.mu_e > 0):
            raise ValueError("mu_e must be positive")
        if not (self.eps_rel >= 1):
            raise ValueError("eps_rel must be >= 1")

    @property
    def coulomb_ghz_nm2(self) -> float:
        """Field magnitude, in GHz, of one elementary charge at 1 nm.

        mu_e * e / (4 pi eps0 eps_rel), with the position in nm.  Divides by
        r^2 in nm^2 to give the field at distance r.
        """
        # V*m -> MV/m at r nm: 1e18 (nm^-2 -> m^-2) * 1e-6 (V -> MV)
        return self.mu_e * _KE_E_VM * 1e12 / self.eps_rel

    @classmethod
    def from_dict(cls, d: dict) -> "PhysicalConstants":
        return cls(mu_e=d.get("mu_e", 6.3), eps_rel=d.get("eps_rel", 5.7))


@dataclass(frozen=True)
class FieldVector:
    """A delta-field 3-vector (GHz) tagged with its reference frame."""

    v: np.ndarray
    frame: str = LAB_FRAME

    def __post_init__(self):
        object.__setattr__(self, "v", as_vec3(self.v))
        if not self.frame:
            raise FrameError("field vector requires a frame tag")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.v))

    def __add__(self, other: "FieldVector") -> "FieldVector":
        if other.frame != self.frame:
            raise FrameError(f"cannot add frames {self.frame!r} and {other.frame!r}")
        return FieldVector(self.v + other.v, self.frame)

    def __neg__(self) -> "FieldVector":
        return FieldVector(-self.v, self.frame)


@dataclass
class FieldMeasurement:
    """The measurable pair (delta_par, |delta_perp|) with variances, GHz."""

    d_par: float
    d_perp: float
    var_par: float = 0.0
    var_perp: float = 0.0

    def __post_init__(self):
        if self.d_perp < 0:
            raise ValueError("d_perp is a magnitude and must be >= 0")
        if self.var_par < 0 or self.var_perp < 0:
            raise ValueError("variances must be >= 0")


@dataclass(frozen=True)
class NVOrientation:
    """NV frame: z along the symmetry axis, x along ``transverse_ref``.

    ``transverse_ref`` is anchored to the transverse bias direction when a
    bias is defined, else to a fixed crystallographic reference.
    """

    axis: np.ndarray
    transverse_ref: np.ndarray
    name: str = "nv"

    def __post_init__(self):
        ax = as_vec3(self.axis)
        tr = as_vec3(self.transverse_ref)
        if abs(np.linalg.norm(ax) - 1.0) > 1e-12 or abs(np.linalg.norm(tr) - 1.0) > 1e-12:
            raise ValueError("axis and transverse_ref must be unit vectors")
        if abs(float(ax @ tr)) > 1e-12:
            raise ValueError("transverse_ref must be orthogonal to axis")
        object.__setattr__(self, "axis", ax)
        object.__setattr__(self, "transverse_ref", tr)

    @property
    def frame(self) -> str:
        return f"nv:{self.name}"

    @property
    def rotation(self) -> np.ndarray:
        """Rows are the NV frame basis vectors expressed in the lab frame."""
        x = self.transverse_ref
        z = self.axis
        y = np.cross(z, x)
        return np.vstack([x, y, z])

    @classmethod
    def from_axis(cls, axis, transverse_hint=None, name: str = "nv") -> "NVOrientation":
        """Build an orientation from an axis and an optional in-plane hint.

        The hint (e.g. the lab-frame bias field) is projected onto the plane
        perpendicular to the axis; a fixed crystallographic reference is used
        when no hint is given or the hint is (anti)parallel to the axis.
        """
        ax = as_vec3(axis)
        n = np.linalg.norm(ax)
        if n == 0:
            raise ValueError("degenerate axis")
        ax = ax / n
        candidates = []
        if transverse_hint is not None:
            candidates.append(as_vec3(transverse_hint))
        candidates += [np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])]
        for cand in candidates:
            proj = cand - (cand @ ax) * ax
            np_ = np.linalg.norm(proj)
            if np_ > 1e-9:
                return cls(axis=ax, transverse_ref=proj / np_, name=name)
        raise ValueError("could not construct a transverse reference")


def to_nv_frame(v: FieldVector, o: NVOrientation) -> FieldVector:
    """Rotate a lab-frame field vector into the NV frame of ``o``."""
    if v.frame != LAB_FRAME:
        raise FrameError(f"expected a lab-frame vector, got {v.frame!r}")
    return FieldVector(o.rotation @ v.v, o.frame)


def from_nv_frame(v: FieldVector, o: NVOrientation) -> FieldVector:
    """Inverse of :func:`to_nv_frame`."""
    if v.frame != o.frame:
        raise FrameError(f"expected frame {o.frame!r}, got {v.frame!r}")
    return FieldVector(o.rotation.T @ v.v, LAB_FRAME)


def coulomb_delta_field(
    charge_e: float,
    r_from_nv,
    c: PhysicalConstants,
    frame: str = LAB_FRAME,
) -> FieldVector:
    """Delta-field (GHz) at the NV due to a point charge at ``r_from_nv`` (nm).

    The returned vector is the physical electric field at the NV scaled by
    mu_e: for an electron (charge_e = -1) it points from the NV toward the
    charge.
    """
    if not np.isfinite(charge_e):
        raise ValueError("non-finite charge")
    r = as_vec3(r_from_nv)
    rn = np.linalg.norm(r)
    if rn == 0:
        raise ValueError("zero-length separation vector")
    # E(origin) from charge q at r is along -r_hat for q > 0.
    mag = c.coulomb_ghz_nm2 * charge_e / rn**2
    return FieldVector(-mag * r / rn, frame)


def charge_field_at_probe(charge_e: float, r_from_probe: np.ndarray, c: PhysicalConstants) -> np.ndarray:
    """Bare-array variant of :func:`coulomb_delta_field` for vectorized use.

    ``r_from_probe`` may be (..., 3); returns fields of matching shape.
    """
    r = np.asarray(r_from_probe, dtype=float)
    rn = np.linalg.norm(r, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = -c.coulomb_ghz_nm2 * charge_e * r / rn**3
    return np.where(rn > 0, f, np.nan)


def superpose(fields) -> FieldVector:
    """Componentwise sum of same-frame field vectors; empty sum is lab zero."""
    fields = list(fields)
    if not fields:
        return FieldVector(np.zeros(3), LAB_FRAME)
    total = fields[0]
    for f in fields[1:]:
        total = total + f
    return total


def measurement_of(v: FieldVector) -> FieldMeasurement:
    """Project an NV-frame field onto the measurable (d_par, d_perp) pair."""
    if v.frame == LAB_FRAME:
        raise FrameError("measurement_of requires an NV-frame vector")
    return FieldMeasurement(
        d_par=float(v.v[2]),
        d_perp=float(math.hypot(v.v[0], v.v[1])),
    )
