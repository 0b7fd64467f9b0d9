"""Automated analysis of a spectral series.

Band-gated Gaussian line fitting per sweep, per-NV field time series via the
spectral-model inversion, charge-state flags from the presence of a
reference line, and time-differenced fields within repump blocks.

The fit model is a Gaussian even though the simulator renders Lorentzians;
center estimates are unbiased for symmetric profiles and the mismatch
mirrors real analysis practice.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import curve_fit

from .core import FieldMeasurement
from .envsim import GREEN_RESET, SpectralSeries
from .spectral import LABELS, EstimationError, FineStructureConstants, fields_from_lines

DEFAULT_THRESHOLD_KCPS = 0.075

NEGATIVE = "negative"
NEUTRAL = "neutral"
INDETERMINATE = "indeterminate"


@dataclass
class SearchBand:
    """Frequency window(s) where one labeled resonance of one NV may appear."""

    nv_id: str
    label: str
    windows: list[tuple[float, float]]
    companion: tuple[str, float] | None = None  # (label, expected offset GHz)

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown line label {self.label!r}")
        if not self.windows:
            raise ValueError("band requires at least one window")
        self.windows = [(float(lo), float(hi)) for lo, hi in self.windows]
        for lo, hi in self.windows:
            if not lo < hi:
                raise ValueError(f"degenerate window ({lo}, {hi})")


def load_bands_json(path) -> list[SearchBand]:
    data = json.loads(Path(path).read_text())
    bands = []
    for e in data["bands"]:
        comp = e.get("companion")
        bands.append(SearchBand(
            nv_id=e["nv_id"], label=e["label"],
            windows=[tuple(w) for w in e["windows"]],
            companion=(comp["label"], comp["offset_ghz"]) if comp else None))
    return bands


def save_bands_json(bands: list[SearchBand], path) -> None:
    out = {"bands": [{
        "nv_id": b.nv_id, "label": b.label,
        "windows": [list(w) for w in b.windows],
        **({"companion": {"label": b.companion[0], "offset_ghz": b.companion[1]}}
           if b.companion else {}),
    } for b in bands]}
    Path(path).write_text(json.dumps(out, indent=1) + "\n")


@dataclass
class LineFit:
    nv_id: str
    label: str
    center_ghz: float
    width_ghz: float
    amplitude_kcps: float
    center_variance: float


def _gaussian(f, amp, center, sigma):
    return amp * np.exp(-0.5 * ((f - center) / sigma) ** 2)


def _fit_window(freqs, counts, lo, hi, background, threshold):
    """Fit one background-subtracted Gaussian inside [lo, hi].

    Returns (center, width, amplitude, center_var) or None.
    """
    sel = (freqs >= lo) & (freqs <= hi)
    if sel.sum() < 5:
        return None
    f = freqs[sel]
    y = counts[sel] - background
    peak = float(np.max(y))
    if peak < threshold:
        return None
    c0 = float(f[np.argmax(y)])
    s0 = max((hi - lo) / 20.0, 2.0 * (f[1] - f[0]))
    try:
        popt, pcov = curve_fit(_gaussian, f, y, p0=[peak, c0, s0],
                               maxfev=2000)
    except (RuntimeError, ValueError):
        return None
    amp, center, sigma = popt
    sigma = abs(sigma)
    if amp < threshold or not (lo <= center <= hi):
        return None
    cvar = float(pcov[1, 1]) if np.isfinite(pcov[1, 1]) else sigma**2
    return float(center), float(sigma), float(amp), cvar


def fit_lines(
    freqs: np.ndarray,
    counts: np.ndarray,
    bands: list[SearchBand],
    threshold_kcps: float = DEFAULT_THRESHOLD_KCPS,
) -> list[LineFit]:
    """Per-band Gaussian fits above the amplitude threshold.

    The background is the median of out-of-band bins.  When a band has
    several windows, the candidate minimizing the companion-offset residual
    wins; without a usable companion the larger amplitude wins.
    """
    freqs = np.asarray(freqs, dtype=float)
    counts = np.asarray(counts, dtype=float)
    in_band = np.zeros(freqs.shape, dtype=bool)
    for b in bands:
        for lo, hi in b.windows:
            in_band |= (freqs >= lo) & (freqs <= hi)
    background = float(np.median(counts[~in_band])) if (~in_band).any() else 0.0

    candidates: dict[tuple[str, str], list[tuple]] = {}
    for b in bands:
        found = []
        for lo, hi in b.windows:
            r = _fit_window(freqs, counts, lo, hi, background, threshold_kcps)
            if r is not None:
                found.append(r)
        if found:
            candidates[(b.nv_id, b.label)] = found

    # Resolve multi-window ambiguity; companions first pass by amplitude,
    # then the companion-offset residual picks among candidates.
    resolved: dict[tuple[str, str], tuple] = {}
    for (nv_id, label), found in candidates.items():
        if len(found) == 1:
            resolved[(nv_id, label)] = found[0]
        else:
            resolved[(nv_id, label)] = max(found, key=lambda r: r[2])
    for b in bands:
        key = (b.nv_id, b.label)
        found = candidates.get(key)
        if not found or len(found) == 1 or b.companion is None:
            continue
        comp_key = (b.nv_id, b.companion[0])
        comp = resolved.get(comp_key)
        if comp is None:
            continue
        expected = comp[0] + b.companion[1]
        resolved[key] = min(found, key=lambda r: abs(r[0] - expected))

    fits = []
    for b in bands:
        r = resolved.get((b.nv_id, b.label))
        if r is None:
            continue
        if any(f.nv_id == b.nv_id and f.label == b.label for f in fits):
            continue
        center, sigma, amp, cvar = r
        fits.append(LineFit(nv_id=b.nv_id, label=b.label, center_ghz=center,
                            width_ghz=sigma, amplitude_kcps=amp,
                            center_variance=cvar))
    return fits


@dataclass
class SweepResult:
    sweep: int
    fits: list[LineFit]
    fields: dict[str, FieldMeasurement]  # nv_id -> measurement
    charge_flag: dict[str, str]  # nv_id -> negative | neutral | indeterminate


@dataclass
class TrackResult:
    sweeps: list[SweepResult]
    nv_ids: list[str]

    def field_series(self, nv_id: str):
        """(sweep indices, measurements) for sweeps where the field exists."""
        idx, ms = [], []
        for s in self.sweeps:
            if nv_id in s.fields:
                idx.append(s.sweep)
                ms.append(s.fields[nv_id])
        return idx, ms


def _reference_label(labels: list[str], zero_field: dict[str, float]) -> str:
    """Highest-energy configured transition (scan runs low to high)."""
    return max(labels, key=lambda lab: zero_field[lab])


def track_series(
    series: SpectralSeries,
    bands: list[SearchBand],
    k: FineStructureConstants | None = None,
    threshold_kcps: float = DEFAULT_THRESHOLD_KCPS,
) -> TrackResult:
    """Fit every sweep, invert fields, and flag charge states.

    An NV is flagged neutral in a sweep when its reference line (the
    highest-energy configured transition) is missing together with at least
    one more of its lines while other NVs are visible; a missing reference
    alone is indeterminate (it may be a mere fit failure).  An entirely
    empty sweep is indeterminate for everyone.
    """
    from .spectral import zero_field_lines

    k = k or FineStructureConstants()
    zf = zero_field_lines(k)
    nv_ids = sorted({b.nv_id for b in bands})
    nv_labels = {nv: sorted({b.label for b in bands if b.nv_id == nv})
                 for nv in nv_ids}
    for nv, labels in nv_labels.items():
        if len(labels) < 2:
            raise ValueError(f"NV {nv} needs bands for at least two lines")
    ref_label = {nv: _reference_label(labels, zf) for nv, labels in nv_labels.items()}

    results = []
    for i, counts in enumerate(series.sweeps):
        fits = fit_lines(series.frequencies, counts, bands, threshold_kcps)
        by_nv: dict[str, dict[str, LineFit]] = {}
        for f in fits:
            by_nv.setdefault(f.nv_id, {})[f.label] = f
        fields: dict[str, FieldMeasurement] = {}
        flags: dict[str, str] = {}
        for nv in nv_ids:
            present = by_nv.get(nv, {})
            if not fits:
                flags[nv] = INDETERMINATE
                continue
            if ref_label[nv] not in present:
                others_visible = any(o != nv and by_nv.get(o) for o in nv_ids)
                n_missing = len(nv_labels[nv]) - len(present)
                if others_visible and n_missing >= 2:
                    flags[nv] = NEUTRAL
                else:
                    flags[nv] = INDETERMINATE
                continue
            flags[nv] = NEGATIVE
            if len(present) >= 2:
                lines = {lab: f.center_ghz for lab, f in present.items()}
                var = {lab: f.center_variance for lab, f in present.items()}
                try:
                    fields[nv] = fields_from_lines(lines, k, line_variance=var)
                except EstimationError:
                    pass
        results.append(SweepResult(sweep=i, fits=fits, fields=fields,
                                   charge_flag=flags))
    return TrackResult(sweeps=results, nv_ids=nv_ids)


@dataclass
class EtaSample:
    nv_id: str
    sweep_from: int
    d_par: float
    d_perp: float


def eta_differences(track: TrackResult, events: list[dict]) -> list[EtaSample]:
    """Field differences between consecutive sweeps inside a repump block.

    Pairs spanning a green reset are excluded; so are pairs where either
    sweep lacks a field for the NV.
    """
    resets = {e["sweep"] for e in events if e.get("kind") == GREEN_RESET}
    by_sweep = {s.sweep: s for s in track.sweeps}
    out = []
    for nv in track.nv_ids:
        for s in track.sweeps:
            nxt = by_sweep.get(s.sweep + 1)
            if nxt is None or (s.sweep + 1) in resets:
                continue
            a = s.fields.get(nv)
            b = nxt.fields.get(nv)
            if a is None or b is None:
                continue
            out.append(EtaSample(nv_id=nv, sweep_from=s.sweep,
                                 d_par=b.d_par - a.d_par,
                                 d_perp=b.d_perp - a.d_perp))
    return out


# ---------------------------------------------------------------------------
# Serialization

def save_linefits_json(track: TrackResult, path) -> None:
    out = {"sweeps": [{
        "sweep": s.sweep,
        "fits": [{
            "nv_id": f.nv_id, "label": f.label, "center_ghz": f.center_ghz,
            "width_ghz": f.width_ghz, "amplitude_kcps": f.amplitude_kcps,
            "center_variance": f.center_variance,
        } for f in s.fits],
    } for s in track.sweeps]}
    Path(path).write_text(json.dumps(out, indent=1) + "\n")


def save_fields_csv(track: TrackResult, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sweep", "nv_id", "d_par", "d_perp", "var_par", "var_perp",
                    "charge_flag"])
        for s in track.sweeps:
            for nv in track.nv_ids:
                m = s.fields.get(nv)
                flag = s.charge_flag.get(nv, INDETERMINATE)
                if m is None:
                    w.writerow([s.sweep, nv, "", "", "", "", flag])
                else:
                    w.writerow([s.sweep, nv, f"{m.d_par:.9g}", f"{m.d_perp:.9g}",
                                f"{m.var_par:.9g}", f"{m.var_perp:.9g}", flag])
