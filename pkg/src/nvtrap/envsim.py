"""Forward simulator: stochastic charge environment + PLE sweep synthesis.

A series alternates green charge resets (which rescramble trap occupations
and NV charge states and resample the slow background field) with red
frequency sweeps (which render the six resonance lines of every negatively
charged NV into Lorentzians plus Poisson counting noise).  Negatively
charged NVs also act as sources: each one contributes the Coulomb field of
one extra electron at its position to every other NV, so the configured
bias of a probe refers to the all-neighbors-neutral state.

Everything is driven by a single seeded generator; a ground-truth log of
states, fields, and line positions is recorded for round-trip validation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FieldVector, charge_field_at_probe, to_nv_frame
from .scene import Scene
from .spectral import eigenlines

GREEN_RESET = "green-reset"
MID_SWEEP_IONIZATION = "mid-sweep-ionization"

REFERENCE_THZ = 470.000


@dataclass
class Protocol:
    mode: str = "repump"  # "repump" (reset every sweep) or "repump-free"
    repump_every: int = 1  # resets every N sweeps in repump-free mode
    f_start_ghz: float = -20.0
    f_stop_ghz: float = 20.0
    step_ghz: float = 0.02
    dwell_s: float = 1.0
    counts_scale_kcps: float = 1.0
    linewidth_ghz: float = 0.1
    mid_sweep_ionization_prob: float = 0.0
    trap_toggle_prob: float = 0.0  # per trap, per red sweep
    poisson_noise: bool = True

    def __post_init__(self):
        if self.mode not in ("repump", "repump-free"):
            raise ValueError(f"unknown protocol mode {self.mode!r}")
        if self.f_start_ghz >= self.f_stop_ghz:
            raise ValueError("f_start must be below f_stop")
        if self.step_ghz <= 0:
            raise ValueError("step must be positive")
        if self.repump_every < 1:
            raise ValueError("repump_every must be >= 1")
        for p in (self.mid_sweep_ionization_prob, self.trap_toggle_prob):
            if not (0.0 <= p <= 1.0):
                raise ValueError("probabilities must lie in [0,1]")

    def frequencies(self) -> np.ndarray:
        n = int(np.floor((self.f_stop_ghz - self.f_start_ghz) / self.step_ghz)) + 1
        return self.f_start_ghz + self.step_ghz * np.arange(n)

    @classmethod
    def from_dict(cls, d: dict) -> "Protocol":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        return cls(**known)


@dataclass
class EnvState:
    trap_occupied: np.ndarray  # bool, per trap
    nv_negative: np.ndarray  # bool, per NV
    background: np.ndarray  # (n_nv, 3) lab-frame GHz
    drift_offset: np.ndarray  # (n_nv, 3) lab-frame GHz

    @classmethod
    def initial(cls, scene: Scene) -> "EnvState":
        return cls(
            trap_occupied=np.zeros(len(scene.traps), dtype=bool),
            nv_negative=np.ones(len(scene.nvs), dtype=bool),
            background=np.zeros((len(scene.nvs), 3)),
            drift_offset=np.zeros((len(scene.nvs), 3)),
        )

    def copy(self) -> "EnvState":
        return EnvState(self.trap_occupied.copy(), self.nv_negative.copy(),
                        self.background.copy(), self.drift_offset.copy())


def step_environment(
    state: EnvState,
    event: str,
    scene: Scene,
    rng: np.random.Generator,
    drift_step_ghz: np.ndarray | None = None,
) -> EnvState:
    """Advance the charge environment across a green reset or a red sweep."""
    out = state.copy()
    if event == GREEN_RESET:
        probs = np.array([t.occupancy_prob for t in scene.traps])
        if scene.occupancy_mode == "independent":
            out.trap_occupied = rng.random(len(probs)) < probs
        else:
            # At most one trap occupied; draw one categorical outcome.
            out.trap_occupied = np.zeros(len(probs), dtype=bool)
            u = rng.random()
            acc = 0.0
            for i, p in enumerate(probs):
                acc += p
                if u < acc:
                    out.trap_occupied[i] = True
                    break
        ion = np.array([nv.ionization_prob for nv in scene.nvs])
        out.nv_negative = rng.random(len(ion)) >= ion
        sigma = scene.noise.background_sigma_ghz
        out.background = (rng.standard_normal((len(scene.nvs), 3)) * sigma
                          if sigma > 0 else np.zeros((len(scene.nvs), 3)))
    elif event == "red-sweep":
        if drift_step_ghz is not None:
            out.drift_offset = out.drift_offset + drift_step_ghz
        return out
    else:
        raise ValueError(f"unknown event {event!r}")
    return out


def nv_total_field(scene: Scene, state: EnvState, nv_index: int) -> FieldVector:
    """Lab-frame delta-field at one NV for a given environment state."""
    nv = scene.nvs[nv_index]
    total = nv.bias_ghz + state.background[nv_index] + state.drift_offset[nv_index]
    for t_idx, trap in enumerate(scene.traps):
        if state.trap_occupied[t_idx]:
            total = total + charge_field_at_probe(
                trap.charge_e, trap.position_nm - nv.position_nm, scene.constants)
    for j, other in enumerate(scene.nvs):
        if j != nv_index and state.nv_negative[j]:
            total = total + charge_field_at_probe(
                -1.0, other.position_nm - nv.position_nm, scene.constants)
    return FieldVector(total)


def nv_lines(scene: Scene, state: EnvState, nv_index: int) -> dict[str, float]:
    """Resonance offsets of one NV for a given environment state."""
    nv = scene.nvs[nv_index]
    local = to_nv_frame(nv_total_field(scene, state, nv_index), nv.orientation)
    return eigenlines(local, scene.fine_structure)


def spectrum_of_state(
    scene: Scene,
    state: EnvState,
    protocol: Protocol,
    rng: np.random.Generator | None = None,
):
    """Render one sweep.

    Returns ``(counts_kcps, events, truth_lines, state_after)``: mid-sweep
    ionization truncates an NV's lines above a uniform random frequency and
    leaves that NV neutral in the returned state.
    """
    freqs = protocol.frequencies()
    expected = np.full(freqs.shape, scene.noise.floor_kcps)
    events = []
    truth_lines: dict[str, dict[str, float]] = {}
    state_after = state.copy()
    half = protocol.linewidth_ghz / 2.0
    for i, nv in enumerate(scene.nvs):
        if not state.nv_negative[i]:
            continue
        lines = nv_lines(scene, state, i)
        truth_lines[nv.id] = lines
        mask = np.ones(freqs.shape, dtype=bool)
        if rng is not None and protocol.mid_sweep_ionization_prob > 0 \
                and rng.random() < protocol.mid_sweep_ionization_prob:
            cut = rng.uniform(protocol.f_start_ghz, protocol.f_stop_ghz)
            mask = freqs < cut
            state_after.nv_negative[i] = False
            events.append({"kind": MID_SWEEP_IONIZATION, "nv_id": nv.id,
                           "cut_ghz": float(cut)})
        for center in lines.values():
            expected = expected + mask * (
                protocol.counts_scale_kcps * half**2 / ((freqs - center) ** 2 + half**2))
    if protocol.poisson_noise:
        if rng is None:
            raise ValueError("poisson_noise requires an rng")
        quanta = protocol.dwell_s * 1000.0  # counts per kcps
        counts = rng.poisson(np.clip(expected, 0.0, None) * quanta) / quanta
    else:
        counts = expected
    return counts, events, truth_lines, state_after


@dataclass
class TruthRecord:
    sweep: int
    trap_occupied: list[bool]
    nv_negative: list[bool]
    lines: dict[str, dict[str, float]]
    fields: dict[str, dict[str, float]]  # nv_id -> {d_par, d_perp}


@dataclass
class SpectralSeries:
    frequencies: np.ndarray
    sweeps: list[np.ndarray]
    events: list[dict]  # {"sweep": int, "kind": str, ...}
    truth: list[TruthRecord] | None = None
    reference_thz: float = REFERENCE_THZ

    def __len__(self) -> int:
        return len(self.sweeps)


def synth_series(scene: Scene, protocol: Protocol, n_sweeps: int, seed: int) -> SpectralSeries:
    """Synthesize a deterministic spectral series with a ground-truth log."""
    if n_sweeps < 1:
        raise ValueError("n_sweeps must be >= 1")
    rng = np.random.default_rng(seed)
    drift = scene.noise.drift
    if drift.mode == "linear":
        norm = np.linalg.norm(drift.direction)
        unit = drift.direction / norm if norm > 0 else np.zeros(3)
        per_sweep = unit * (drift.total_ghz / max(n_sweeps - 1, 1))
        drift_steps = [np.tile(per_sweep, (len(scene.nvs), 1))] * n_sweeps
    else:
        drift_steps = [rng.standard_normal((len(scene.nvs), 3)) * drift.step_ghz
                       for _ in range(n_sweeps)]

    state = EnvState.initial(scene)
    sweeps, events, truth = [], [], []
    from .core import measurement_of, to_nv_frame as _to_nv

    for i in range(n_sweeps):
        reset = protocol.mode == "repump" or i % protocol.repump_every == 0
        if reset:
            state = step_environment(state, GREEN_RESET, scene, rng)
            events.append({"sweep": i, "kind": GREEN_RESET})
        # Optional slow trap toggles under red illumination.
        if protocol.trap_toggle_prob > 0:
            flips = rng.random(len(scene.traps)) < protocol.trap_toggle_prob
            state.trap_occupied = state.trap_occupied ^ flips
        pre_state = state.copy()
        counts, sweep_events, lines, state = spectrum_of_state(scene, state, protocol, rng)
        for ev in sweep_events:
            events.append({"sweep": i, **ev})
        fields = {}
        for j, nv in enumerate(scene.nvs):
            if nv.id in lines:
                local = _to_nv(nv_total_field(scene, pre_state, j), nv.orientation)
                m = measurement_of(local)
                fields[nv.id] = {"d_par": m.d_par, "d_perp": m.d_perp}
        truth.append(TruthRecord(
            sweep=i,
            trap_occupied=[bool(b) for b in pre_state.trap_occupied],
            nv_negative=[bool(b) for b in pre_state.nv_negative],
            lines=lines,
            fields=fields,
        ))
        sweeps.append(counts)
        state = step_environment(state, "red-sweep", scene, rng,
                                 drift_step_ghz=drift_steps[i])
    return SpectralSeries(frequencies=protocol.frequencies(), sweeps=sweeps,
                          events=events, truth=truth)


# ---------------------------------------------------------------------------
# Serialization

def save_series_jsonl(series: SpectralSeries, path) -> None:
    with open(path, "w") as fh:
        header = {"type": "header",
                  "reference_thz": series.reference_thz,
                  "frequencies_ghz": [round(float(f), 9) for f in series.frequencies],
                  "events": series.events}
        fh.write(json.dumps(header) + "\n")
        for i, counts in enumerate(series.sweeps):
            fh.write(json.dumps({"index": i, "counts_kcps": [float(c) for c in counts]}) + "\n")


def load_series_jsonl(path) -> SpectralSeries:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("type") != "header":
            raise ValueError("series file missing header line")
        sweeps = {}
        for line in fh:
            rec = json.loads(line)
            sweeps[rec["index"]] = np.array(rec["counts_kcps"], dtype=float)
    ordered = [sweeps[i] for i in sorted(sweeps)]
    return SpectralSeries(frequencies=np.array(header["frequencies_ghz"]),
                          sweeps=ordered, events=header.get("events", []),
                          reference_thz=header.get("reference_thz", REFERENCE_THZ))


def save_series_csv(series: SpectralSeries, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sweep_index", "freq_offset_ghz", "counts_kcps"])
        for i, counts in enumerate(series.sweeps):
            for f, c in zip(series.frequencies, counts):
                w.writerow([i, f"{f:.9g}", f"{c:.9g}"])


def save_truth_json(series: SpectralSeries, path) -> None:
    if series.truth is None:
        raise ValueError("series carries no truth log")
    records = [{
        "sweep": t.sweep,
        "trap_occupied": t.trap_occupied,
        "nv_negative": t.nv_negative,
        "lines": t.lines,
        "fields": t.fields,
    } for t in series.truth]
    Path(path).write_text(json.dumps({"records": records}, indent=1) + "\n")


def load_truth_json(path) -> list[TruthRecord]:
    data = json.loads(Path(path).read_text())
    return [TruthRecord(sweep=r["sweep"], trap_occupied=r["trap_occupied"],
                        nv_negative=r["nv_negative"], lines=r["lines"],
                        fields=r["fields"]) for r in data["records"]]
