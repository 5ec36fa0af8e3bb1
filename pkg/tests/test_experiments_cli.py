import json
import subprocess
import sys

import numpy as np
import pytest

from wasep.cli import EXIT_ACCEPTANCE, EXIT_OK, EXIT_VALIDATION, main
from wasep.experiments import (DEFAULTS, ExperimentConfig, ValidationError, apply_overrides,
                               profile_from_preset, replica_map, run_experiment)


def _square(x):
    return x * x


# --------------------------------------------------------------------------
# configuration


def test_defaults_validate_for_every_kind():
    for kind in DEFAULTS:
        cfg = ExperimentConfig.from_dict({"kind": kind})
        assert cfg.params["seed"] == 0


@pytest.mark.parametrize("doc,match", [
    ({"kind": "simulate", "replicas": 0}, "empty ensemble"),
    ({"kind": "martingale", "replicas": -3}, "empty ensemble"),
    ({"kind": "simulate", "m": 1.5}, "mass"),
    ({"kind": "simulate", "bogus": 1}, "unknown keys"),
    ({"kind": "nope"}, "unknown experiment kind"),
    ({"kind": "hydro", "rho0": {"mean": 0.3}}, "differs from m"),
    ({"kind": "hydro", "rho0": {"amplitude": 0.9}}, "leaves"),
    ({"kind": "hydro", "field": {"preset": "unknown"}}, "unknown"),
    ({"kind": "hydro_limit", "eps": 0.7}, "eps"),
    ({"kind": "hydro", "d": 4}, "dimension"),
    ({"kind": "hydro", "M": 0}, "positive"),
])
def test_invalid_configurations_are_rejected(doc, match):
    with pytest.raises(ValidationError, match=match):
        ExperimentConfig.from_dict(doc)


def test_nested_merge_and_overrides():
    doc = apply_overrides({"kind": "hydro"}, ["--rho0.amplitude=0.1", "--M=64", "--field.value=2"])
    cfg = ExperimentConfig.from_dict(doc)
    assert cfg.params["rho0"] == {"preset": "sine", "amplitude": 0.1}
    assert cfg.params["field"] == {"preset": "constant", "value": 2}
    assert cfg.params["M"] == 64
    cfg = ExperimentConfig.from_dict({"kind": "hydro", "field": {"preset": "sine", "amplitude": 1}})
    assert cfg.params["field"] == {"preset": "sine", "amplitude": 1}
    with pytest.raises(ValidationError):
        apply_overrides({}, ["novalue"])


def test_hashes_track_seed_and_output():
    a = ExperimentConfig.from_dict({"kind": "simulate", "seed": 1, "output": "x"})
    b = ExperimentConfig.from_dict({"kind": "simulate", "seed": 1, "output": "y"})
    c = ExperimentConfig.from_dict({"kind": "simulate", "seed": 2})
    assert a.config_hash() == b.config_hash() != c.config_hash()
    assert a.lineage_hash() == c.lineage_hash()
    assert a.K(128) == 64


def test_profile_presets():
    assert np.allclose(profile_from_preset("constant", 0.3, 1, 8), 0.3)
    p = profile_from_preset({"preset": "sine", "amplitude": 0.2, "mode": 2}, 0.5, 2, 8)
    assert p.shape == (64,) and p.mean() == pytest.approx(0.5)
    with pytest.raises(ValidationError):
        profile_from_preset({"preset": "values", "values": [0.5, 0.5]}, 0.5, 1, 4)


def test_replica_map_preserves_order(monkeypatch):
    assert replica_map(_square, range(10), workers=1) == [x * x for x in range(10)]
    assert replica_map(_square, range(10), workers=2) == [x * x for x in range(10)]
    monkeypatch.setenv("WASEP_WORKERS", "many")
    with pytest.raises(ValidationError):
        replica_map(_square, range(3))


# --------------------------------------------------------------------------
# manifests and reproducibility


def test_simulate_manifest_is_reproducible(tmp_path):
    doc = {"kind": "simulate", "N": 32, "T": 0.05, "replicas": 2, "seed": 7}
    reps = []
    for name in ("a", "b"):
        reps.append(run_experiment(ExperimentConfig.from_dict({**doc, "output": str(tmp_path / name)})))
    fa, fb = reps[0].manifest.files, reps[1].manifest.files
    assert fa == fb and len(fa) == 2
    assert reps[0].manifest.config_hash == reps[1].manifest.config_hash
    other = run_experiment(ExperimentConfig.from_dict({**doc, "seed": 8, "output": str(tmp_path / "c")}))
    assert other.manifest.files != fa
    assert other.manifest.lineage_hash == reps[0].manifest.lineage_hash
    saved = json.load(open(tmp_path / "a" / "manifest.json"))
    assert saved["files"] == fa and saved["version"]


# --------------------------------------------------------------------------
# command line


def test_cli_hydro_run_and_report(tmp_path, capsys):
    out = tmp_path / "hydro"
    assert main(["hydro", "--out", str(out), "--M=32", "--t=0.01"]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["passed"] and summary["kind"] == "hydro"
    assert (out / "report.json").exists() and (out / "density.csv").exists()
    assert main(["report", str(out), "--gnuplot"]) == EXIT_OK
    assert (out / "density.dat").exists()
    text = capsys.readouterr().out
    assert text.startswith("PASS hydro")


def test_cli_config_file_and_print(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"kind": "action", "configs": 2}))
    assert main(["action", "--config", str(cfg), "--seed", "3", "--print-config"]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert printed["configs"] == 2 and printed["seed"] == 3
    assert main(["hydro", "--config", str(cfg)]) == EXIT_VALIDATION


@pytest.mark.parametrize("argv", [
    ["simulate", "--replicas=0"],
    ["hydro", "--rho0.mean=0.2"],
    ["simulate", "--unknown_key=3"],
    ["hydro", "--config", "/nonexistent.json"],
])
def test_cli_validation_exit_code(argv, capsys):
    assert main(argv) == EXIT_VALIDATION
    assert "error" in capsys.readouterr().err


def test_cli_failed_check_exit_code(tmp_path, capsys):
    argv = ["phase-scan", "--E_grid=[0, 5]", "--j_grid=[1]", "--target_E=5", "--M=32",
            "--restarts=2", "--zero_field_restarts=2", "--out", str(tmp_path / "ps")]
    assert main(argv) == EXIT_ACCEPTANCE
    summary = json.loads(capsys.readouterr().out)
    assert summary["checks"]["transition_at_target_field"] is False
    assert summary["checks"]["closed_form"] is True
    assert main(["report", str(tmp_path / "ps")]) == EXIT_ACCEPTANCE


def test_cli_defaults_and_version(capsys):
    assert main(["defaults", "coupling"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["kind"] == "coupling"
    proc = subprocess.run([sys.executable, "-m", "wasep", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("wasep ")
