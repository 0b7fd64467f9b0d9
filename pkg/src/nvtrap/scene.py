"""Scene description: NV centers, charge traps, noise and drift parameters.

The on-disk form is JSON with the layout::

    {
      "constants": {"mu_e": 6.3, "eps_rel": 5.7},
      "fine_structure": {"d_par": 1.44, ...},
      "nvs": [{"id": "G", "position_nm": [0,0,0], "axis": "111",
               "bias_ghz": {"x": 0.4, "y": 0.1, "z": 0.2},
               "ionization_prob": 0.2}],
      "traps": [{"id": "T1", "position_nm": [100,0,0], "charge_e": -1,
                 "occupancy_prob": 0.13}],
      "noise": {"background_sigma_ghz": 0.02,
                "drift": {"mode": "linear", "total_ghz": 0.1,
                          "direction": [1,0,0]}},
      "occupancy_mode": "independent"
    }

Bias fields are given in the lab frame; each NV's transverse reference axis
is anchored to its own bias direction, so in its frame the bias reads
(y_perp, 0, y_par).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    AXIS_VECTORS,
    FieldVector,
    NVOrientation,
    PhysicalConstants,
    as_vec3,
    to_nv_frame,
)
from .spectral import FineStructureConstants


class SceneError(ValueError):
    """Scene file violates the schema."""


@dataclass
class NVSpec:
    id: str
    position_nm: np.ndarray
    axis: str
    bias_ghz: np.ndarray  # lab frame
    ionization_prob: float = 0.0

    def __post_init__(self):
        self.position_nm = as_vec3(self.position_nm)
        self.bias_ghz = as_vec3(self.bias_ghz)
        if self.axis not in AXIS_VECTORS:
            raise SceneError(f"unknown axis {self.axis!r}; expected one of {sorted(AXIS_VECTORS)}")
        if not (0.0 <= self.ionization_prob <= 1.0):
            raise SceneError(f"ionization_prob out of [0,1] for NV {self.id}")

    @property
    def orientation(self) -> NVOrientation:
        hint = self.bias_ghz if np.linalg.norm(self.bias_ghz) > 0 else None
        return NVOrientation.from_axis(AXIS_VECTORS[self.axis],
                                       transverse_hint=hint, name=self.id)

    def bias_nv_frame(self) -> FieldVector:
        return to_nv_frame(FieldVector(self.bias_ghz), self.orientation)


@dataclass
class TrapSpec:
    id: str
    position_nm: np.ndarray
    charge_e: float = -1.0
    occupancy_prob: float = 0.0

    def __post_init__(self):
        self.position_nm = as_vec3(self.position_nm)
        if not (0.0 <= self.occupancy_prob <= 1.0):
            raise SceneError(f"occupancy_prob out of [0,1] for trap {self.id}")


@dataclass
class DriftSpec:
    mode: str = "linear"  # "linear" ramp or "walk" (Gaussian random walk)
    total_ghz: float = 0.0  # ramp total across a series
    step_ghz: float = 0.0  # walk step per sweep
    direction: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def __post_init__(self):
        self.direction = as_vec3(self.direction)
        if self.mode not in ("linear", "walk"):
            raise SceneError(f"unknown drift mode {self.mode!r}")


@dataclass
class NoiseSpec:
    background_sigma_ghz: float = 0.0
    floor_kcps: float = 0.0
    drift: DriftSpec = field(default_factory=DriftSpec)


@dataclass
class Scene:
    nvs: list[NVSpec]
    traps: list[TrapSpec]
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    fine_structure: FineStructureConstants = field(default_factory=FineStructureConstants)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    occupancy_mode: str = "independent"  # or "exclusive"

    def __post_init__(self):
        if self.occupancy_mode not in ("independent", "exclusive"):
            raise SceneError(f"unknown occupancy_mode {self.occupancy_mode!r}")
        ids = [nv.id for nv in self.nvs] + [t.id for t in self.traps]
        if len(set(ids)) != len(ids):
            raise SceneError("duplicate NV/trap ids")

    def nv(self, nv_id: str) -> NVSpec:
        for nv in self.nvs:
            if nv.id == nv_id:
                return nv
        raise KeyError(nv_id)

    def trap(self, trap_id: str) -> TrapSpec:
        for t in self.traps:
            if t.id == trap_id:
                return t
        raise KeyError(trap_id)

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        try:
            nvs = [NVSpec(id=e["id"], position_nm=e["position_nm"], axis=e["axis"],
                          bias_ghz=_bias(e.get("bias_ghz", {})),
                          ionization_prob=e.get("ionization_prob", 0.0))
                   for e in d.get("nvs", [])]
            traps = [TrapSpec(id=e["id"], position_nm=e["position_nm"],
                              charge_e=e.get("charge_e", -1.0),
                              occupancy_prob=e.get("occupancy_prob", 0.0))
                     for e in d.get("traps", [])]
        except KeyError as exc:
            raise SceneError(f"missing required scene field: {exc}") from exc
        noise_d = d.get("noise", {})
        drift_d = noise_d.get("drift", {})
        drift = DriftSpec(mode=drift_d.get("mode", "linear"),
                          total_ghz=drift_d.get("total_ghz", 0.0),
                          step_ghz=drift_d.get("step_ghz", 0.0),
                          direction=drift_d.get("direction", [1.0, 0.0, 0.0]))
        noise = NoiseSpec(background_sigma_ghz=noise_d.get("background_sigma_ghz", 0.0),
                          floor_kcps=noise_d.get("floor_kcps", 0.0), drift=drift)
        return cls(
            nvs=nvs,
            traps=traps,
            constants=PhysicalConstants.from_dict(d.get("constants", {})),
            fine_structure=FineStructureConstants.from_dict(d.get("fine_structure", {})),
            noise=noise,
            occupancy_mode=d.get("occupancy_mode", "independent"),
        )

    def to_dict(self) -> dict:
        return {
            "constants": {"mu_e": self.constants.mu_e, "eps_rel": self.constants.eps_rel},
            "fine_structure": {
                "d_par": self.fine_structure.d_par,
                "d_perp": self.fine_structure.d_perp,
                "lambda_par": self.fine_structure.lambda_par,
                "lambda_perp": self.fine_structure.lambda_perp,
            },
            "nvs": [
                {"id": nv.id, "position_nm": list(nv.position_nm), "axis": nv.axis,
                 "bias_ghz": {"x": nv.bias_ghz[0], "y": nv.bias_ghz[1], "z": nv.bias_ghz[2]},
                 "ionization_prob": nv.ionization_prob}
                for nv in self.nvs
            ],
            "traps": [
                {"id": t.id, "position_nm": list(t.position_nm), "charge_e": t.charge_e,
                 "occupancy_prob": t.occupancy_prob}
                for t in self.traps
            ],
            "noise": {
                "background_sigma_ghz": self.noise.background_sigma_ghz,
                "floor_kcps": self.noise.floor_kcps,
                "drift": {"mode": self.noise.drift.mode,
                          "total_ghz": self.noise.drift.total_ghz,
                          "step_ghz": self.noise.drift.step_ghz,
                          "direction": list(self.noise.drift.direction)},
            },
            "occupancy_mode": self.occupancy_mode,
        }

    @classmethod
    def load(cls, path) -> "Scene":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _bias(d: dict) -> np.ndarray:
    return np.array([d.get("x", 0.0), d.get("y", 0.0), d.get("z", 0.0)], dtype=float)
