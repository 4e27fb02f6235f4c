import csv
import filecmp
import os

import numpy as np
import pytest

from chns.cli import ConfigError, PRESETS, ScenarioConfig, load_config, main, run


def write_cfg(path, text):
    path.write_text(text)
    return str(path)


def small_spinodal(nsteps=6):
    vals = PRESETS["spinodal_desk"]()
    vals.update({"nx": 8, "ny": 8, "nsteps": nsteps,
                 "a_max": 4.0e-3, "a_min": 1.9e-3, "seed": 5})
    return vals


def test_presets_parse():
    for name, make in PRESETS.items():
        if name == "custom":
            continue
        cfg = ScenarioConfig(make())
        assert cfg.scenario == name
        assert cfg.params.tau > 0


def test_unknown_key_rejected(tmp_path):
    p = write_cfg(tmp_path / "c.cfg", "scenario = spinodal_desk\nwibble = 3\n")
    with pytest.raises(ConfigError, match="wibble"):
        load_config(p)


def test_bad_value_names_key(tmp_path):
    p = write_cfg(tmp_path / "c.cfg", "scenario = spinodal_desk\ntau = soon\n")
    with pytest.raises(ConfigError, match="tau"):
        load_config(p)


def test_missing_required_custom_keys(tmp_path):
    p = write_cfg(tmp_path / "c.cfg", "scenario = custom\nnx = 4\n")
    with pytest.raises(ConfigError, match="rho1"):
        load_config(p)


def test_unknown_scenario(tmp_path):
    p = write_cfg(tmp_path / "c.cfg", "scenario = warp_drive\n")
    with pytest.raises(ConfigError, match="warp_drive"):
        load_config(p)


def test_end_time_to_nsteps(tmp_path):
    p = write_cfg(tmp_path / "c.cfg",
                  "scenario = spinodal_desk\nend_time = 0.002\n")
    cfg = load_config(p)
    assert cfg.values["nsteps"] == 20


def test_cadence_below_tau_rejected(tmp_path):
    p = write_cfg(tmp_path / "c.cfg",
                  "scenario = spinodal_desk\noutput_cadence = 1e-6\n")
    with pytest.raises(ConfigError, match="cadence"):
        load_config(p)


def test_validate_subcommand(tmp_path, capsys):
    p = write_cfg(tmp_path / "ok.cfg", "scenario = spinodal_desk\n")
    assert main(["validate", p]) == 0
    bad = write_cfg(tmp_path / "bad.cfg", "scenario = spinodal_desk\nnx = wide\n")
    assert main(["validate", bad]) == 2


def test_run_outputs_and_manifest(tmp_path):
    cfg = ScenarioConfig(small_spinodal())
    out = tmp_path / "out"
    assert run(cfg, str(out)) == 0
    for name in ("diagnostics.csv", "newton.csv", "adaptation.csv", "manifest.txt"):
        assert (out / name).exists()
    manifest = (out / "manifest.txt").read_text()
    # every physical/numerical parameter appears in the manifest
    for key in ("rho1", "rho2", "eta1", "eta2", "mobility", "sigma", "epsilon",
                "s", "tau", "gravity", "seed", "theta_r", "theta_c",
                "a_min", "a_max", "nsteps"):
        assert key in manifest, key
    rows = list(csv.DictReader(open(out / "diagnostics.csv")))
    assert len(rows) == cfg.values["nsteps"] + 1  # t=0 row plus one per step


def test_run_determinism(tmp_path):
    cfg1 = ScenarioConfig(small_spinodal())
    cfg2 = ScenarioConfig(small_spinodal())
    out1, out2 = tmp_path / "a", tmp_path / "b"
    run(cfg1, str(out1))
    run(cfg2, str(out2))
    assert filecmp.cmp(out1 / "diagnostics.csv", out2 / "diagnostics.csv",
                       shallow=False)


def test_seed_changes_output(tmp_path):
    v1 = small_spinodal()
    v2 = small_spinodal()
    v2["seed"] = 99
    out1, out2 = tmp_path / "a", tmp_path / "b"
    run(ScenarioConfig(v1), str(out1))
    run(ScenarioConfig(v2), str(out2))
    assert not filecmp.cmp(out1 / "diagnostics.csv", out2 / "diagnostics.csv",
                           shallow=False)


def test_vtk_snapshots(tmp_path):
    vals = small_spinodal(nsteps=4)
    vals["output_cadence"] = 2e-4
    out = tmp_path / "out"
    run(ScenarioConfig(vals), str(out))
    vtks = sorted(out.glob("fields_*.vtk"))
    assert vtks
    text = vtks[0].read_text()
    assert "SCALARS phi double 1" in text
    assert "VECTORS v double" in text


def test_cli_main_run(tmp_path):
    p = write_cfg(tmp_path / "c.cfg",
                  "scenario = spinodal_desk\nnx = 8\nny = 8\nnsteps = 3\n"
                  "a_max = 4e-3\na_min = 1.9e-3\n")
    out = tmp_path / "runout"
    assert main(["run", p, "--out", str(out)]) == 0
    assert (out / "diagnostics.csv").exists()


def test_perturb_seed(tmp_path):
    p = write_cfg(tmp_path / "c.cfg",
                  "scenario = spinodal_desk\nnx = 8\nny = 8\nnsteps = 3\n"
                  "a_max = 4e-3\na_min = 1.9e-3\nseed = 5\n")
    out = tmp_path / "s"
    assert main(["perturb-seed", p, "123", "--out", str(out)]) == 0
    manifest = (out / "manifest.txt").read_text()
    assert "seed = 123" in manifest
