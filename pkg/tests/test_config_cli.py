import copy
import json
from pathlib import Path

import pytest

from lppvid.cli import EXIT_CODES, main
from lppvid.config import load_config, validate
from lppvid.errors import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMOKE_VDP = {
    "schema_version": 1,
    "system": "vanderpol",
    "cycle": {"grid_size": 128},
    "analytic": {"grid_size": 32},
    "datasets": {
        "D1": {"x_perp0": [0.1], "n_trajectories": 2, "duration_periods": 0.3,
               "samples_per_period": 60, "snr_db": 40.0, "seed": 1},
    },
    "models": {"D1": {"dataset": "D1", "budget": 30, "n_starts": 2}},
    "test": {"duration_periods": 0.3, "samples_per_period": 60, "models": ["analytic", "D1"]},
    "compare": {"models": ["D1"], "grid_size": 32},
}


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr()


@pytest.mark.parametrize("name", ["vanderpol.json", "kite.json", "kite_smoke.json"])
def test_shipped_configs_validate(name):
    cfg = load_config(CONFIGS / name)
    assert cfg["schema_version"] == 1


def test_defaults_filled():
    cfg = validate(SMOKE_VDP)
    assert cfg["params"]["mu"] == 1.0
    assert cfg["models"]["D1"]["multivariate"] is False
    assert cfg["datasets"]["D1"]["forcing_frequency_factor"] == 10.0


def test_unknown_key_rejected():
    bad = copy.deepcopy(SMOKE_VDP)
    bad["datasets"]["D1"]["snr"] = 40
    with pytest.raises(ConfigError, match="unknown"):
        validate(bad)
    bad = dict(SMOKE_VDP, extra=1)
    with pytest.raises(ConfigError, match="unknown"):
        validate(bad)


def test_missing_required_key():
    bad = copy.deepcopy(SMOKE_VDP)
    del bad["datasets"]["D1"]["seed"]
    with pytest.raises(ConfigError, match="seed"):
        validate(bad)


@pytest.mark.parametrize("edit", [
    lambda c: c["models"]["D1"].update(dataset="nope"),
    lambda c: c["test"].update(models=["ghost"]),
    lambda c: c["compare"].update(models=["analytic"]),
    lambda c: c.update(schema_version=2),
    lambda c: c.update(system="pendulum"),
    lambda c: c["surface"].update(kind="radial") if "surface" in c else c.update(
        surface={"kind": "radial"}),
    lambda c: c["datasets"]["D1"].update(seed=1.5),
])
def test_bad_references(edit):
    bad = copy.deepcopy(SMOKE_VDP)
    edit(bad)
    with pytest.raises(ConfigError):
        validate(bad)


def test_cli_config_error_is_json(tmp_path, capsys):
    bad = copy.deepcopy(SMOKE_VDP)
    bad["bogus"] = True
    code, io = run(capsys, "identify", "--config", write(tmp_path, bad), "--out", str(tmp_path))
    assert code == EXIT_CODES["config"] == 2
    err = json.loads(io.err.strip().splitlines()[-1])
    assert err["error"] == "config" and "bogus" in err["message"]


def test_cli_missing_config_file(tmp_path, capsys):
    code, io = run(capsys, "limit-cycle", "--config", str(tmp_path / "none.json"),
                   "--out", str(tmp_path))
    assert code == 2
    assert json.loads(io.err)["error"] == "config"


def test_cli_invalid_json(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    code, _ = run(capsys, "limit-cycle", "--config", str(path), "--out", str(tmp_path))
    assert code == 2


def test_cli_missing_artifact(tmp_path, capsys):
    code, io = run(capsys, "predict", "--config", write(tmp_path, SMOKE_VDP),
                   "--out", str(tmp_path / "empty"))
    assert code == EXIT_CODES["missing-artifact"] == 3
    assert json.loads(io.err)["error"] == "missing-artifact"


def test_cli_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


@pytest.fixture(scope="module")
def vdp_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("vdp_smoke")
    cfg = str(root / "cfg.json")
    Path(cfg).write_text(json.dumps(SMOKE_VDP))
    outs = []
    for tag in ("a", "b"):
        out = str(root / tag)
        for cmd in ("limit-cycle", "identify", "predict", "compare-omega"):
            assert main([cmd, "--config", cfg, "--out", out]) == 0
        outs.append(Path(out))
    return outs


def test_pipeline_artifacts(vdp_run):
    out = vdp_run[0]
    for name in ("cycle.csv", "cycle_summary.json", "dataset_D1.csv", "model_D1.json",
                 "identify_summary.json", "prediction_analytic.csv", "prediction_D1.csv",
                 "report.txt", "omega_D1.csv", "compare.json"):
        assert (out / name).exists(), name
    summary = json.loads((out / "cycle_summary.json").read_text())
    assert abs(summary["period"] - 6.663286859) < 1e-4
    report = (out / "report.txt").read_text()
    assert "analytic" in report and "D1" in report


def test_pipeline_deterministic(vdp_run):
    a, b = vdp_run
    for name in ("dataset_D1.csv", "model_D1.json", "report.txt", "compare.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
