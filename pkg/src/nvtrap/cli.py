"""Command-line pipeline: simulate -> extract -> fields -> cluster ->
locate -> colocate -> report.

Each stage reads declared inputs, writes its outputs under the run
directory, and updates ``manifest.json`` with content hashes so a rerun
with the same config and seed is byte-identical.  Wall-clock timings go to
a separate ``timings.log`` that is deliberately excluded from the manifest.

Exit codes: 2 config/schema error, 3 missing upstream artifact,
4 colocation inconsistency.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .colocate import (InconsistencyError, PairInput, TrapObservation,
                       dark_trap_colocalize, pairwise_loops, tripartite_search)
from .core import PhysicalConstants
from .envsim import (Protocol, load_series_jsonl, save_series_csv,
                     save_series_jsonl, save_truth_json, synth_series)
from .extract import (DEFAULT_THRESHOLD_KCPS, load_bands_json,
                      save_fields_csv, save_linefits_json, track_series)
from .fieldstats import Ellipse, conditional_split, gate_clusters
from .locate import (DEFAULT_VOLUME, GridSpec, Measurement, bayes_posterior,
                     gaussian_loop)
from .scene import Scene, SceneError

EXIT_SCHEMA = 2
EXIT_MISSING = 3
EXIT_INCONSISTENT = 4
OUT_ROOT_ENV = "NVTRAP_OUT"


class ConfigError(ValueError):
    pass


class MissingUpstreamError(FileNotFoundError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


class Run:
    """A run directory with its manifest and timing sidecar."""

    def __init__(self, out_dir: Path, config_path: Path | None):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.dir / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {"tool_version": __version__, "inputs": {},
                             "stages": {}}
        if config_path is not None:
            self.manifest["config_sha256"] = _sha256(config_path)

    def need(self, name: str) -> Path:
        path = self.dir / name
        if not path.exists():
            raise MissingUpstreamError(f"missing upstream artifact: {path}")
        return path

    def record(self, stage: str, inputs: list[Path], outputs: list[Path],
               elapsed_s: float) -> None:
        for p in inputs:
            self.manifest["inputs"][p.name] = _sha256(p)
        self.manifest["stages"][stage] = {
            "outputs": {p.name: _sha256(p) for p in sorted(outputs)}}
        _write_json(self.manifest_path, self.manifest)
        with open(self.dir / "timings.log", "a") as fh:
            fh.write(f"{stage}\t{elapsed_s:.3f}s\n")


def load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _resolve(cfg: dict, key: str, base: Path) -> Path:
    if key not in cfg:
        raise ConfigError(f"config field {key!r} is required")
    p = Path(cfg[key])
    return p if p.is_absolute() else base / p


def _grid_from(cfg: dict, args) -> GridSpec:
    extent, dims = DEFAULT_VOLUME
    g = cfg.get("grid", {})
    extent = g.get("extent_nm", list(extent))
    dims = g.get("dims", list(dims))
    if getattr(args, "volume_nm", None):
        extent = args.volume_nm
    if getattr(args, "grid_nm", None):
        dims = args.grid_nm
    return GridSpec.centered(extent, dims, center=g.get("center_nm", (0, 0, 0)))


def _split_measurement(split) -> Measurement:
    """Conditional split -> localization measurement with SE variances."""
    if split.on_mean is None or split.off_mean is None:
        raise ConfigError("split lacks an on or off population")
    return Measurement(
        delta_par=float(split.on_mean[0] - split.off_mean[0]),
        e_perp=float(split.on_mean[1]),
        y_perp=float(split.off_mean[1]),
        var_par=float(split.on_cov[0, 0] / max(split.n_on, 1)
                      + split.off_cov[0, 0] / max(split.n_off, 1)),
        var_e_perp=float(split.on_cov[1, 1] / max(split.n_on, 1)),
        var_y_perp=float(split.off_cov[1, 1] / max(split.n_off, 1)),
    )


def _track(run: Run, cfg: dict, base: Path, threshold: float):
    series = load_series_jsonl(run.need("series.jsonl"))
    bands = load_bands_json(_resolve(cfg, "bands", base))
    return series, track_series(series, bands, threshold_kcps=threshold)


def _source_split(track, source: str, probe: str):
    """Probe-field split conditioned on the source NV's charge flag."""
    idx, ms = track.field_series(probe)
    flags = [track.sweeps[i].charge_flag.get(source, "indeterminate")
             for i in idx]
    return conditional_split(ms, flags)


def _gate_split(track, probe: str, gates: list[Ellipse], on_gate: int,
                off_gate: int):
    idx, ms = track.field_series(probe)
    res = gate_clusters(ms, gates)
    flags = ["negative" if a == on_gate else
             "neutral" if a == off_gate else "indeterminate"
             for a in res.assignments]
    return conditional_split(ms, flags)


def _gates_from(cfg_entry) -> list[Ellipse]:
    return [Ellipse(center=tuple(g["center"]), semi_axes=tuple(g["semi_axes"]),
                    rotation=g.get("rotation", 0.0), name=g.get("name", ""))
            for g in cfg_entry]


# ---------------------------------------------------------------- stages


def cmd_simulate(cfg, run: Run, base: Path, args) -> None:
    t0 = time.perf_counter()
    scene_path = _resolve(cfg, "scene", base)
    scene = Scene.load(scene_path)
    protocol = Protocol.from_dict(cfg.get("protocol", {}))
    n_sweeps = int(cfg.get("n_sweeps", 0))
    if n_sweeps <= 0:
        raise ConfigError("n_sweeps must be a positive integer")
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise ConfigError("simulate requires a seed (config or --seed)")
    series = synth_series(scene, protocol, n_sweeps, int(seed))
    out = [run.dir / "series.jsonl", run.dir / "series.csv",
           run.dir / "truth.json"]
    save_series_jsonl(series, out[0])
    save_series_csv(series, out[1])
    save_truth_json(series, out[2])
    run.record("simulate", [scene_path], out, time.perf_counter() - t0)


def cmd_extract(cfg, run: Run, base: Path, args) -> None:
    t0 = time.perf_counter()
    threshold = args.threshold_kcps if args.threshold_kcps is not None \
        else cfg.get("threshold_kcps", DEFAULT_THRESHOLD_KCPS)
    series, track = _track(run, cfg, base, threshold)
    out = run.dir / "linefits.json"
    save_linefits_json(track, out)
    run.record("extract", [run.dir / "series.jsonl"], [out],
               time.perf_counter() - t0)


def cmd_fields(cfg, run: Run, base: Path, args) -> None:
    t0 = time.perf_counter()
    threshold = args.threshold_kcps if args.threshold_kcps is not None \
        else cfg.get("threshold_kcps", DEFAULT_THRESHOLD_KCPS)
    series, track = _track(run, cfg, base, threshold)
    out = [run.dir / "fields.csv", run.dir / "flags.json"]
    save_fields_csv(track, out[0])
    flags = [{"sweep": s.sweep, "charge_flag": s.charge_flag}
             for s in track.sweeps]
    _write_json(out[1], flags)
    run.record("fields", [run.dir / "series.jsonl"], out,
               time.perf_counter() - t0)


def cmd_cluster(cfg, run: Run, base: Path, args) -> None:
    t0 = time.perf_counter()
    threshold = args.threshold_kcps if args.threshold_kcps is not None \
        else cfg.get("threshold_kcps", DEFAULT_THRESHOLD_KCPS)
    series, track = _track(run, cfg, base, threshold)
    gates_cfg = cfg.get("gates", {})
    summary = {}
    for nv in track.nv_ids:
        idx, ms = track.field_series(nv)
        if nv not in gates_cfg or not ms:
            continue
        res = gate_clusters(ms, _gates_from(gates_cfg[nv]))
        clusters = []
        for st, mean in zip(res.clusters, res.means):
            clusters.append({"name": st.name, "n": st.n,
                             "fraction": st.fraction,
                             "ci95": [st.ci_low, st.ci_high],
                             "mean": None if np.isnan(mean).any()
                             else [float(x) for x in mean]})
        summary[nv] = {"total": len(ms), "clusters": clusters}
    out = run.dir / "clusters.json"
    _write_json(out, summary)
    run.record("cluster", [run.dir / "series.jsonl"], [out],
               time.perf_counter() - t0)


def cmd_locate(cfg, run: Run, base: Path, args) -> None:
    t0 = time.perf_counter()
    threshold = args.threshold_kcps if args.threshold_kcps is not None \
        else cfg.get("threshold_kcps", DEFAULT_THRESHOLD_KCPS)
    series, track = _track(run, cfg, base, threshold)
    c = PhysicalConstants()
    grid = _grid_from(cfg, args)
    outputs = []
    summary = {}
    for target in cfg.get("locate", []):
        probe = target["probe"]
        name = target.get("id") or f"{target.get('source', 'trap')}_at_{probe}"
        if "source" in target:
            split = _source_split(track, target["source"], probe)
        else:
            gates = _gates_from(cfg["gates"][probe])
            split = _gate_split(track, probe, gates,
                                int(target["on_gate"]), int(target["off_gate"]))
        m = _split_measurement(split)
        q = float(target.get("charge_e", -1.0))
        mix = gaussian_loop(m, q, c)
        post = bayes_posterior(m, q, c, volume=grid)
        stem = run.dir / f"posterior_{name}"
        post.save(stem)
        mix.save(run.dir / f"loop_{name}.json")
        outputs += [stem.with_suffix(".f32"), stem.with_suffix(".json"),
                    run.dir / f"loop_{name}.json"]
        dist, dist_std = post.mean_distance()
        summary[name] = {"probe": probe, "charge_e": q,
                         "split_z": split.z_score,
                         "distance_nm": dist, "distance_std_nm": dist_std,
                         "mean_position_nm": [float(x) for x in post.mean_position()]}
    out = run.dir / "locate.json"
    _write_json(out, summary)
    run.record("locate", [run.dir / "series.jsonl"], outputs + [out],
               time.perf_counter() - t0)


def cmd_colocate(cfg, run: Run, base: Path, args) -> None:
    t0 = time.perf_counter()
    threshold = args.threshold_kcps if args.threshold_kcps is not None \
        else cfg.get("threshold_kcps", DEFAULT_THRESHOLD_KCPS)
    series, track = _track(run, cfg, base, threshold)
    c = PhysicalConstants()
    spec = cfg.get("colocate")
    if not spec:
        raise ConfigError("config field 'colocate' is required for this stage")
    anchor, matched = spec["anchor"], spec["matched"]
    third = spec.get("third")
    z_gate = args.z_gate if args.z_gate is not None else spec.get("z_gate", 2.0)
    ids = [anchor, matched] + ([third] if third else [])
    inputs = []
    for source in ids:
        for probe in ids:
            if source == probe:
                continue
            if third and {source, probe} == {anchor, third} and source == anchor:
                continue  # the anchor's effect on the third probe is unused
            split = _source_split(track, source, probe)
            if split.z_score is None:
                continue
            inputs.append(PairInput(source_id=source, probe_id=probe,
                                    measurement=_split_measurement(split),
                                    z_score=split.z_score))
    pairs = {(p.source_id, p.probe_id): p
             for p in pairwise_loops(inputs, c, z_min=z_gate)}
    for key in [(matched, anchor), (anchor, matched)]:
        if key not in pairs:
            raise InconsistencyError(
                f"pair {key[0]} -> {key[1]} unavailable (insignificant split)")
    sol = tripartite_search(pairs, anchor, matched,
                            third if (third, anchor) in pairs and
                            (third, matched) in pairs else None,
                            z_max=z_gate)
    outputs = []
    for nv, post in sol.posteriors.items():
        stem = run.dir / f"posterior_nv_{nv}"
        post.save(stem)
        outputs += [stem.with_suffix(".f32"), stem.with_suffix(".json")]
    positions = sol.mean_positions()
    for trap in spec.get("dark_traps", []):
        obs = []
        for view in trap["observations"][:2]:
            probe = view["probe"]
            gates = _gates_from(cfg["gates"][probe])
            split = _gate_split(track, probe, gates,
                                int(view["on_gate"]), int(view["off_gate"]))
            m = _split_measurement(split)
            pos = np.zeros(3) if probe == anchor else positions.get(probe)
            if pos is None:
                raise InconsistencyError(f"no solved position for probe {probe}")
            phi = 0.0 if probe == anchor else math.radians(sol.phi_deg)
            obs.append(TrapObservation(m, pos, phi=phi))
        if len(obs) < 2:
            obs.append(None)
        res = dark_trap_colocalize(obs[0], obs[1], c)
        sol.dark_traps[trap["id"]] = res
        if res.posterior is not None:
            stem = run.dir / f"posterior_trap_{trap['id']}"
            res.posterior.save(stem)
            outputs += [stem.with_suffix(".f32"), stem.with_suffix(".json")]
    out = run.dir / "colocate.json"
    sol.save(out)
    run.record("colocate", [run.dir / "series.jsonl"], outputs + [out],
               time.perf_counter() - t0)


def cmd_report(cfg, run: Run, base: Path, args) -> None:
    t0 = time.perf_counter()
    report = {"tool_version": __version__, "stages": {}, "partial": False}
    for stage, name in [("cluster", "clusters.json"), ("locate", "locate.json"),
                        ("colocate", "colocate.json")]:
        path = run.dir / name
        if path.exists():
            report["stages"][stage] = json.loads(path.read_text())
        else:
            report["partial"] = True
    rows = []
    colo = report["stages"].get("colocate", {})
    scene = None
    if "scene" in cfg:
        scene_path = _resolve(cfg, "scene", base)
        if scene_path.exists():
            scene = Scene.load(scene_path)
    for nv, entry in colo.get("probes", {}).items():
        pos = np.array(entry["mean_position_nm"])
        row = {"entity": nv, "frame": colo.get("anchor", ""),
               "x_nm": pos[0], "y_nm": pos[1], "z_nm": pos[2],
               "distance_nm": entry["distance_nm"],
               "distance_std_nm": entry["distance_std_nm"]}
        if scene is not None and colo.get("anchor") in [s.nv_id for s in scene.nvs]:
            anchor_nv = scene.nv(colo["anchor"])
            lab = anchor_nv.orientation().rotation.T @ pos
            row["lab_x_nm"], row["lab_y_nm"] = float(lab[0]), float(lab[1])
        rows.append(row)
    out_json = run.dir / "report.json"
    _write_json(out_json, report)
    out_csv = run.dir / "report.csv"
    fieldnames = ["entity", "frame", "x_nm", "y_nm", "z_nm", "distance_nm",
                  "distance_std_nm", "lab_x_nm", "lab_y_nm"]
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fieldnames})
    run.record("report", [], [out_json, out_csv], time.perf_counter() - t0)


COMMANDS = {
    "simulate": cmd_simulate,
    "extract": cmd_extract,
    "fields": cmd_fields,
    "cluster": cmd_cluster,
    "locate": cmd_locate,
    "colocate": cmd_colocate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nvtrap",
        description="Simulate and invert charge-trap fields seen by optical "
                    "probe spectra.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None,
                       help="run directory (default: config 'out' or "
                            f"${OUT_ROOT_ENV})")
        p.add_argument("--threshold-kcps", type=float, default=None)
        p.add_argument("--z-gate", type=float, default=None)
        p.add_argument("--grid-nm", type=int, nargs=3, default=None,
                       metavar=("NX", "NY", "NZ"))
        p.add_argument("--volume-nm", type=float, nargs=3, default=None,
                       metavar=("LX", "LY", "LZ"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        base = Path(args.config).resolve().parent
        out = args.out or cfg.get("out") or os.environ.get(OUT_ROOT_ENV)
        if not out:
            raise ConfigError("no output directory: use --out, config 'out', "
                              f"or ${OUT_ROOT_ENV}")
        run = Run(Path(out), Path(args.config))
        COMMANDS[args.command](cfg, run, base, args)
    except (ConfigError, SceneError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except MissingUpstreamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except InconsistencyError as exc:
        print(f"error: inconsistent colocation: {exc}", file=sys.stderr)
        return EXIT_INCONSISTENT
    return 0


if __name__ == "__main__":
    sys.exit(main())
