"""Command-line interface: file formats, exit codes, artifacts."""

import json
import shutil
import subprocess

import pytest

from gridforge import baselines, cli
from gridforge.simulate import LoadStep, PlugIn, Unplug

SMALL = {
    "sigma_bar": 10.0,
    "alphas": [1e-4, 1e-4, 1e-4, 1e-6, 1e-6],
    "t_end": 0.05, "dt": 1e-5, "record_dt": 1e-4, "line_model": "qsl",
    "dgus": [
        {"id": 1, "r_t": 0.1, "l_t": 1.8e-3, "c_t": 2.2e-3,
         "load": {"type": "resistance", "value": 10.0}, "v_ref": 47.9},
        {"id": 2, "r_t": 0.2, "l_t": 1.7e-3, "c_t": 2.0e-3,
         "load": {"type": "resistance", "value": 6.0}, "v_ref": 48.06},
    ],
    "lines": [{"i": 1, "j": 2, "r": 0.05, "l": 2.1e-6}],
    "events": [],
}


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture
def small_file(tmp_path):
    return write_json(tmp_path / "small.json", SMALL)


@pytest.fixture(scope="module")
def bundle_file(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("bundle")
    scenario = write_json(tmp / "small.json", SMALL)
    bundle = tmp / "bundle.json"
    assert cli.main(["synth", scenario, "--out", str(bundle)]) == 0
    return scenario, str(bundle)


class TestScenarioFormat:
    def test_round_trip_is_identity(self, small_file):
        first = cli.load_scenario(small_file)
        again = cli.parse_scenario(cli.scenario_to_json(first))
        assert again == first

    def test_packaged_scenario_round_trips(self):
        sc = cli.load_scenario(cli.packaged_scenario_path())
        assert cli.parse_scenario(cli.scenario_to_json(sc)) == sc

    def test_packaged_scenario_timeline(self):
        sc = cli.load_scenario(cli.packaged_scenario_path())
        assert sorted(sc.initial_topology.ids) == [1, 2, 3, 4, 5]
        assert sc.sigma_bar == 10.0 and sc.t_end == 16.0 and sc.dt == 1e-5
        assert [type(ev) for ev in sc.events] == [PlugIn, LoadStep, Unplug]
        assert [ev.t for ev in sc.events] == [4.0, 8.0, 12.0]
        plug = sc.events[0]
        assert plug.dgu_id == 6 and len(plug.lines) == 2
        assert plug.params.r_t == 0.4
        assert sc.events[1].load.value == 4.0
        assert sc.events[2].dgu_id == 3

    def test_missing_field_is_a_value_error(self):
        broken = {k: v for k, v in SMALL.items() if k != "t_end"}
        with pytest.raises(ValueError, match="missing field"):
            cli.parse_scenario(broken)

    def test_unknown_event_type_rejected(self):
        payload = dict(SMALL)
        payload["events"] = [{"t": 0.01, "type": "teleport", "dgu": 1}]
        with pytest.raises(ValueError, match="unknown event type"):
            cli.parse_scenario(payload)

    def test_line_inductance_is_optional(self):
        payload = json.loads(json.dumps(SMALL))
        del payload["lines"][0]["l"]
        sc = cli.parse_scenario(payload)
        assert sc.initial_topology.lines[0].l is None
        assert "l" not in cli.scenario_to_json(sc)["lines"][0]

    def test_current_load_parses(self):
        payload = json.loads(json.dumps(SMALL))
        payload["dgus"][0]["load"] = {"type": "current", "value": 5.0}
        sc = cli.parse_scenario(payload)
        assert sc.initial_topology.dgus[1].load.kind == "current"


class TestSynth:
    def test_bundle_written_and_structured(self, bundle_file):
        _, bundle = bundle_file
        payload = json.loads(open(bundle).read())
        assert payload["sigma_bar"] == 10.0
        assert len(payload["controllers"]) == 2
        entry = payload["controllers"][0]
        for key in ("dgu_id", "K", "P", "eta", "delta", "diagnostics"):
            assert key in entry
        assert len(entry["K"]) == 3 and len(entry["P"]) == 3

    def test_denied_dgu_exits_two_and_names_it(self, tmp_path, capsys):
        payload = json.loads(json.dumps(SMALL))
        payload["dgus"][0]["c_t"] = 1e6
        code = cli.main(["synth", write_json(tmp_path / "d.json", payload)])
        assert code == 2
        err = capsys.readouterr().err
        assert "denied: dgu 1" in err and "infeasible" in err

    def test_negative_resistance_exits_one(self, tmp_path, capsys):
        payload = json.loads(json.dumps(SMALL))
        payload["dgus"][0]["r_t"] = -1.0
        code = cli.main(["synth", write_json(tmp_path / "n.json", payload)])
        assert code == 1
        assert "r_t must be positive" in capsys.readouterr().err

    def test_missing_file_exits_one(self, tmp_path, capsys):
        assert cli.main(["synth", str(tmp_path / "absent.json")]) == 1
        assert "error:" in capsys.readouterr().err

    def test_malformed_json_exits_one(self, tmp_path, capsys):
        path = tmp_path / "junk.json"
        path.write_text("{not json")
        assert cli.main(["synth", str(path)]) == 1


class TestCertify:
    def test_pass_line_and_certificate(self, bundle_file, tmp_path, capsys):
        scenario, bundle = bundle_file
        cert_path = tmp_path / "cert.json"
        code = cli.main(["certify", scenario, bundle,
                         "--out", str(cert_path)])
        assert code == 0
        assert capsys.readouterr().out.strip() == "theorem1: pass"
        cert = json.loads(cert_path.read_text())
        assert cert["theorem1"]["verdict"] == "Pass"
        assert cert["lasalle_kernel"]["nullity"] == 3
        assert cert["checks"]["q_global_max_eig"] <= 1e-6

    def test_gain_only_baseline_bundle_fails(self, bundle_file, tmp_path,
                                             capsys):
        scenario, _ = bundle_file
        report = baselines.destabilization_demo(baselines.LQR)
        payload = {"sigma_bar": 10.0, "controllers": [
            {"dgu_id": 1, "K": report.gains[0].tolist()},
            {"dgu_id": 2, "K": report.gains[1].tolist()}]}
        path = write_json(tmp_path / "lqr.json", payload)
        code = cli.main(["certify", scenario, path])
        assert code == 2
        line = capsys.readouterr().out.strip()
        assert line.startswith("theorem1: fail, abscissa ≈ ")
        assert float(line.rsplit(" ", 1)[-1]) == pytest.approx(17.5, abs=0.1)

    def test_incomplete_bundle_is_hard_error(self, bundle_file, tmp_path,
                                             capsys):
        scenario, bundle = bundle_file
        payload = json.loads(open(bundle).read())
        payload["controllers"] = payload["controllers"][:1]
        path = write_json(tmp_path / "partial.json", payload)
        assert cli.main(["certify", scenario, path]) == 1
        assert "no controller" in capsys.readouterr().err

    def test_mixed_sigma_bar_is_hard_error(self, bundle_file, tmp_path,
                                           capsys):
        scenario, bundle = bundle_file
        payload = json.loads(open(bundle).read())
        payload["controllers"][0]["eta"] *= 2.0
        path = write_json(tmp_path / "mixed.json", payload)
        assert cli.main(["certify", scenario, path]) == 1
        assert "error:" in capsys.readouterr().err


class TestSimulate:
    def test_writes_artifacts(self, small_file, tmp_path, capsys):
        out = tmp_path / "run"
        assert cli.main(["simulate", small_file, "--out", str(out)]) == 0
        header = (out / "trajectory.csv").read_text().splitlines()[0]
        assert header.startswith("t,dgu1.V,dgu1.It,dgu1.v,dgu1.u")
        assert (out / "events.log").exists()
        assert "simulated 0.05 s" in capsys.readouterr().out

    def test_dt_and_line_model_flags(self, small_file, tmp_path):
        out = tmp_path / "rl"
        code = cli.main(["simulate", small_file, "--out", str(out),
                         "--dt", "2e-5", "--line-model", "rl"])
        assert code == 0

    def test_denied_grid_exits_two(self, tmp_path, capsys):
        payload = json.loads(json.dumps(SMALL))
        payload["dgus"][1]["c_t"] = 1e6
        path = write_json(tmp_path / "d.json", payload)
        assert cli.main(["simulate", path, "--out", str(tmp_path)]) == 2
        assert "denied: dgu 2" in capsys.readouterr().err


class TestReports:
    def test_appendix_a_reproduces_everything(self, capsys):
        assert cli.main(["appendix-a"]) == 0
        out = capsys.readouterr().out
        assert out.count("-> pass") == 7
        assert "FAIL" not in out
        assert "lqr coupled:" in out and "pole_placement coupled:" in out
        assert out.count("in the right half plane") == 2
        assert "pnp coupled:" in out

    def test_sweep_summary_and_artifacts(self, tmp_path, capsys):
        out = tmp_path / "sweep"
        code = cli.main(["sweep", "--points", "2", "--out", str(out)])
        assert code == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary == {"total": 8, "feasible": 8,
                           "infeasible": 0, "failures": 0}
        assert json.loads((out / "summary.json").read_text()) == summary
        rows = (out / "sweep.csv").read_text().strip().splitlines()
        assert len(rows) == 9

    def test_sweep_box_flags(self, capsys):
        code = cli.main(["sweep", "--points", "1",
                         "--r-t", "0.1", "0.1", "--l-t", "2e-3", "2e-3",
                         "--c-t", "1e6", "1e6"])
        assert code == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["infeasible"] == 1


class TestEntryPoint:
    def test_console_script_exists(self):
        exe = shutil.which("gridforge")
        assert exe is not None
        proc = subprocess.run([exe, "--help"], capture_output=True,
                              text=True, timeout=60)
        assert proc.returncode == 0
        for name in ("synth", "certify", "simulate", "appendix-a", "sweep"):
            assert name in proc.stdout
