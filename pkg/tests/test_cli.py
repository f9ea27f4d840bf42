import json

import pytest

from heraldcool.cli import main
from heraldcool.config import ConfigError, RunConfig, env_overrides


def run(tmp_path, *argv, config=None):
    args = list(argv) + ["--out", str(tmp_path)]
    if config is not None:
        path = tmp_path / "run.yaml"
        path.write_text(config, encoding="utf-8")
        args += ["--config", str(path)]
    return main(args)


def test_config_defaults_and_hash():
    cfg = RunConfig.from_mapping({}, environ={})
    assert cfg.protocol().nbar == 18 and cfg.mode().lamb_dicke == 0.094
    assert cfg.pulse("sideband").chirp_range == 40e3
    assert cfg.digest() == RunConfig.from_mapping({}, environ={}).digest()
    assert cfg.digest() != RunConfig.from_mapping({"seed": 1}, environ={}).digest()


def test_config_yaml_exponents_and_env_override():
    env = {"HERALDCOOL_PROTOCOL__SHOTS": "1234", "HERALDCOOL_THERMAL__NBAR": "5"}
    cfg = RunConfig.from_mapping({"carrier_pulse": {"duration": "40e-6"}}, environ=env)
    assert cfg.pulse("carrier").duration == 40e-6
    assert cfg.protocol().shots == 1234 and cfg.protocol().nbar == 5
    assert env_overrides({"OTHER": "1"}) == {}


@pytest.mark.parametrize("mapping", [
    {"protocol": {"shots": 0}},
    {"protocol": {"detection_fidelity": 0.3}},
    {"mode": {"lamb_dicke": 2}},
    {"nonsense": 1},
    {"protocol": {"shots": "many"}},
    {"rabi": {"source": "nowhere"}},
])
def test_config_rejected_before_work(mapping):
    with pytest.raises(ConfigError):
        RunConfig.from_mapping(mapping, environ={})


def test_cool_byte_identical_and_headers(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "cool", "--shots", "3000", "--seed", "7") == 0
    assert run(b, "cool", "--shots", "3000", "--seed", "7") == 0
    for name in ("cool_summary.json", "cool_trials.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    summary = json.loads((a / "cool_summary.json").read_text())
    assert summary["meta"]["seed"] == 7 and len(summary["meta"]["config_sha256"]) == 16
    assert [c["cycles"] for c in summary["per_cycle"]] == [1, 2]
    assert "analytic_p0_with_carrier" in summary["per_cycle"][0]
    first = (a / "cool_trials.csv").read_text().splitlines()[0]
    assert first.startswith("#") and "config_sha256=" in first and "seed=7" in first


def test_cool_ideal_hook_fraction(tmp_path):
    cfg = ("protocol: {forced_transfer: 1.0, detection_fidelity: 1.0, heating_rate: 0,"
           " cycles: 1, shots: 40000}\n")
    assert run(tmp_path, "cool", config=cfg) == 0
    frac = json.loads((tmp_path / "cool_summary.json").read_text())["per_cycle"][0]
    assert abs(frac["heralded_fraction"] - 1 / 19) < 3 * (1 / 19 * 18 / 19 / 40000) ** 0.5


def test_cool_zero_accepted_still_succeeds(tmp_path):
    cfg = "protocol: {forced_transfer: 0.0, detection_fidelity: 1.0, heating_rate: 0}\nthermal: {nbar: 0.0}\n"
    assert run(tmp_path, "cool", "--shots", "50", config=cfg) == 0
    summary = json.loads((tmp_path / "cool_summary.json").read_text())
    assert summary["per_cycle"][0]["defined"] is False
    assert summary["per_cycle"][0]["p0_given_herald"] is None


def test_cool_zero_shots_is_config_error(tmp_path):
    assert run(tmp_path, "cool", "--shots", "0") == 1


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["bogus"])
    assert info.value.code == 1
    assert run(tmp_path, "sweep-rap", "--transition", "carrier",
               config="sweep: {carrier: {num: 0}}\n") == 1


def test_sweep_rap_rows(tmp_path):
    cfg = "sweep: {carrier: {start: 20.0e-6, stop: 60.0e-6, num: 3}, sideband: {durations: [50.0e-6]}}\n"
    assert run(tmp_path, "sweep-rap", config=cfg) == 0
    lines = (tmp_path / "sweep_rap.csv").read_text().splitlines()
    assert lines[0].startswith("# heraldcool sweep-rap config_sha256=")
    assert lines[1] == "transition,duration_s,transfer_efficiency"
    assert [l.split(",")[0] for l in lines[2:]] == ["carrier"] * 3 + ["sideband"]


def test_sweep_rap_integration_failure_rows(tmp_path, monkeypatch):
    import heraldcool.cli as cli
    from heraldcool.dynamics import IntegrationError

    def failing(pulse, *a, **k):
        raise IntegrationError("forced", time=0.0, n=0)

    monkeypatch.setattr(cli, "transfer_efficiency", failing)
    cfg = "sweep: {carrier: {durations: [30.0e-6]}, sideband: {durations: [50.0e-6]}}\n"
    assert run(tmp_path, "sweep-rap", config=cfg) == 2
    rows = (tmp_path / "sweep_rap.csv").read_text().splitlines()[2:]
    assert all(r.endswith(",nan") for r in rows) and len(rows) == 2


def test_rabi_then_fit_round_trip(tmp_path):
    cfg = "rabi: {source: model, p0: 0.96, nbar_tail: 18}\n"
    assert run(tmp_path, "rabi", "--seed", "3", config=cfg) == 0
    scan = tmp_path / "rabi_scan.csv"
    assert scan.read_text().startswith("# heraldcool rabi config_sha256=")
    assert run(tmp_path, "fit", "--input", str(scan)) == 0
    result = json.loads((tmp_path / "fit_result.json").read_text())
    assert result["mode"] == "p0" and abs(result["p0"] - 0.96) < 0.02
    assert result["converged"] is True


def test_rabi_from_protocol_and_carrier_nbar(tmp_path):
    assert run(tmp_path, "rabi", "--shots", "900",
               config="rabi: {source: protocol}\nprotocol: {shots: 20000}\n") == 0
    assert run(tmp_path, "fit", "--input", str(tmp_path / "rabi_scan.csv")) == 0
    assert 0.5 < json.loads((tmp_path / "fit_result.json").read_text())["p0"] <= 1
    cfg = "rabi: {source: thermal, transition: carrier, stop: 100.0e-6, points: 60}\n"
    assert run(tmp_path, "rabi", config=cfg) == 0
    assert run(tmp_path, "fit", "--input", str(tmp_path / "rabi_scan.csv")) == 0
    result = json.loads((tmp_path / "fit_result.json").read_text())
    assert result["mode"] == "nbar" and abs(result["nbar"] - 18) < 2


def test_fit_constant_signal_degenerate(tmp_path):
    rows = "".join(f"{i * 1e-5!r},0.5,900\n" for i in range(50))
    path = tmp_path / "flat.csv"
    path.write_text("# transition=blue_sideband\ntime_s,excitation,shots\n" + rows)
    assert run(tmp_path, "fit", "--input", str(path)) == 0
    assert json.loads((tmp_path / "fit_result.json").read_text())["degenerate"] is True


def test_fit_errors(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("time_s,excitation,shots\n0,0.1,900\n1e-6,1.2,900\n")
    assert run(tmp_path, "fit", "--input", str(bad)) == 1
    assert "line 3" in capsys.readouterr().err
    assert run(tmp_path, "fit", "--input", str(tmp_path / "missing.csv")) == 3
    assert run(tmp_path, "fit") == 1


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["cool", "--shots", "10", "--out", str(blocker / "sub")]) == 3
