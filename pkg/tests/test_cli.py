"""End-to-end tests for the command-line pipeline.

A small single-NV scene is pushed through every stage once per module; the
individual tests then assert on the artifacts.  Error paths map to the
documented exit codes: 2 for config/schema problems, 3 for missing upstream
artifacts, 4 for colocation inconsistencies.
"""

import json
import math

import numpy as np
import pytest

from nvtrap.cli import (EXIT_INCONSISTENT, EXIT_MISSING, EXIT_SCHEMA, main)

SQ2 = 1.0 / math.sqrt(2.0)


def _scene(nvs, traps):
    return {
        "constants": {"mu_e": 6.3, "eps_rel": 5.7},
        "fine_structure": {"d_par": 1.44, "d_perp": 0.77,
                           "lambda_par": 5.33, "lambda_perp": 0.0},
        "nvs": nvs,
        "traps": traps,
        "noise": {"background_sigma_ghz": 0.0, "floor_kcps": 0.0},
        "occupancy_mode": "independent",
    }


def one_nv_scene():
    """One NV at the origin with a half-occupied trap 150 nm away."""
    direction = np.array([0.2, 0.5, np.sqrt(1 - 0.04 - 0.25)])
    return _scene(
        nvs=[{"id": "A", "position_nm": [0, 0, 0], "axis": "111",
              "bias_ghz": {"x": 3 * SQ2, "y": -3 * SQ2, "z": 0.0}}],
        traps=[{"id": "T", "position_nm": (150.0 * direction).tolist(),
                "charge_e": -1.0, "occupancy_prob": 0.5}],
    )


BANDS = {"bands": [
    {"nv_id": "A", "label": "Ey", "windows": [[-4.4, -3.5]]},
    {"nv_id": "A", "label": "Ex", "windows": [[1.6, 2.5]],
     "companion": {"label": "Ey", "offset_ghz": -6.0}},
    {"nv_id": "A", "label": "A1", "windows": [[4.8, 5.6]]},
]}

PROTOCOL = {"f_start_ghz": -8.0, "f_stop_ghz": 10.0, "step_ghz": 0.02,
            "counts_scale_kcps": 2.0, "linewidth_ghz": 0.08}


def write_config(path, extra=None, scene=None, bands=BANDS):
    scene_path = path.parent / "scene.json"
    bands_path = path.parent / "bands.json"
    scene_path.write_text(json.dumps(scene or one_nv_scene()))
    bands_path.write_text(json.dumps(bands))
    cfg = {"scene": "scene.json", "bands": "bands.json",
           "protocol": PROTOCOL, "n_sweeps": 300, "seed": 11}
    cfg.update(extra or {})
    path.write_text(json.dumps(cfg))
    return path


def run_stage(stage, config, out):
    return main([stage, "--config", str(config), "--out", str(out)])


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """Full simulate..report chain on the one-NV scene."""
    base = tmp_path_factory.mktemp("chain")
    out = base / "run"
    # Gate centers: trap occupied shifts (delta_perp, e_perp) away from the
    # bare bias point (0, 3); on-gate center from the known geometry.
    cfg = write_config(base / "config.json", extra={
        "gates": {"A": [
            {"center": [0.0630, 2.9851], "semi_axes": [0.03, 0.03],
             "name": "occupied"},
            {"center": [0.0, 3.0], "semi_axes": [0.03, 0.03],
             "name": "empty"},
        ]},
        "locate": [{"id": "T_at_A", "probe": "A",
                    "on_gate": 0, "off_gate": 1}],
    })
    for stage in ["simulate", "extract", "fields", "cluster", "locate",
                  "report"]:
        assert run_stage(stage, cfg, out) == 0, stage
    return out


def test_chain_artifacts_exist(chain):
    for name in ["series.jsonl", "series.csv", "truth.json", "linefits.json",
                 "fields.csv", "flags.json", "clusters.json", "locate.json",
                 "posterior_T_at_A.f32", "loop_T_at_A.json", "manifest.json",
                 "report.json", "report.csv", "timings.log"]:
        assert (chain / name).exists(), name


def test_chain_cluster_fractions(chain):
    summary = json.loads((chain / "clusters.json").read_text())
    clusters = {c["name"]: c for c in summary["A"]["clusters"]}
    lo, hi = clusters["occupied"]["ci95"]
    assert lo <= 0.5 <= hi


def test_chain_locate_distance(chain):
    summary = json.loads((chain / "locate.json").read_text())
    entry = summary["T_at_A"]
    assert abs(entry["distance_nm"] - 150.0) < 5.0
    assert entry["split_z"] > 5.0


def test_chain_manifest_lists_all_stages(chain):
    manifest = json.loads((chain / "manifest.json").read_text())
    assert set(manifest["stages"]) == {"simulate", "extract", "fields",
                                       "cluster", "locate", "report"}
    assert "timings.log" not in str(manifest)


def test_rerun_is_byte_identical(chain, tmp_path):
    cfg = chain.parent / "config.json"
    out2 = tmp_path / "run2"
    for stage in ["simulate", "extract", "fields", "cluster", "locate",
                  "report"]:
        assert run_stage(stage, cfg, out2) == 0
    assert (chain / "manifest.json").read_bytes() == \
        (out2 / "manifest.json").read_bytes()
    assert (chain / "report.json").read_bytes() == \
        (out2 / "report.json").read_bytes()


def test_report_alone_is_partial(tmp_path):
    cfg = write_config(tmp_path / "config.json")
    assert run_stage("report", cfg, tmp_path / "run") == 0
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert report["partial"] is True


def test_invalid_json_config(tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text("{not json")
    assert run_stage("simulate", cfg, tmp_path / "run") == EXIT_SCHEMA


def test_config_not_found(tmp_path):
    assert run_stage("simulate", tmp_path / "nope.json",
                     tmp_path / "run") == EXIT_SCHEMA


def test_simulate_requires_sweeps(tmp_path):
    cfg = write_config(tmp_path / "config.json", extra={"n_sweeps": 0})
    assert run_stage("simulate", cfg, tmp_path / "run") == EXIT_SCHEMA


def test_simulate_requires_seed(tmp_path):
    cfg = write_config(tmp_path / "config.json")
    body = json.loads(cfg.read_text())
    del body["seed"]
    cfg.write_text(json.dumps(body))
    assert run_stage("simulate", cfg, tmp_path / "run") == EXIT_SCHEMA


def test_no_output_directory(tmp_path, monkeypatch):
    monkeypatch.delenv("NVTRAP_OUT", raising=False)
    cfg = write_config(tmp_path / "config.json")
    assert main(["simulate", "--config", str(cfg)]) == EXIT_SCHEMA


def test_out_root_env(tmp_path, monkeypatch):
    out = tmp_path / "envrun"
    monkeypatch.setenv("NVTRAP_OUT", str(out))
    cfg = write_config(tmp_path / "config.json", extra={"n_sweeps": 5})
    assert main(["simulate", "--config", str(cfg)]) == 0
    assert (out / "series.jsonl").exists()


def test_extract_without_series(tmp_path):
    cfg = write_config(tmp_path / "config.json")
    assert run_stage("extract", cfg, tmp_path / "run") == EXIT_MISSING


def test_colocate_without_significant_pairs(tmp_path):
    # Two trap-free NVs never flip each other's lines, so every conditional
    # split is insignificant and no reciprocal pair can be formed.
    scene = _scene(
        nvs=[{"id": "A", "position_nm": [0, 0, 0], "axis": "111",
              "bias_ghz": {"x": 3 * SQ2, "y": -3 * SQ2, "z": 0.0}},
             {"id": "B", "position_nm": [48, 0, 0], "axis": "111",
              "bias_ghz": {"x": 3 * SQ2, "y": -3 * SQ2, "z": 0.0},
              "ionization_prob": 0.3}],
        traps=[],
    )
    bands = {"bands": BANDS["bands"] + [
        dict(b, nv_id="B") for b in BANDS["bands"]]}
    cfg = write_config(tmp_path / "config.json", scene=scene, bands=bands,
                      extra={"n_sweeps": 60,
                             "colocate": {"anchor": "A", "matched": "B"}})
    out = tmp_path / "run"
    assert run_stage("simulate", cfg, out) == 0
    assert run_stage("colocate", cfg, out) == EXIT_INCONSISTENT


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as err:
        main(["--version"])
    assert err.value.code == 0
    assert capsys.readouterr().out.strip()
