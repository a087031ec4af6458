import csv
import json

import pytest

from nvcharge import model
from nvcharge.cli import DEFAULT_SEED, main
from nvcharge.datasets import synthetic_path
from nvcharge.params import save_params


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    err = capsys.readouterr().err
    return code, (json.loads(err) if err.strip() else None)


@pytest.fixture
def pair_seq(tmp_path):
    path = tmp_path / "pair592.json"
    path.write_text(json.dumps(model.pulse_pair(150.0, 300.0).to_dict()))
    return path


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_simulate_matches_model(capsys, tmp_path, pair_seq, params):
    out = tmp_path / "sim"
    assert run(capsys, "simulate", "--seq", pair_seq, "--out", out)[0] == 0
    rows = read_csv(out / "trajectory.csv")
    start = model.ground_state(1.0, params.spin_polarization)
    golden = model.run_sequence(start, model.pulse_pair(150.0, 300.0), params)
    assert len(rows) == len(golden)
    for row, (t, p) in zip(rows, golden):
        assert float(row["t_ns"]) == t
        assert [float(row[k]) for k in model.LEVELS] == list(p)
    config = json.loads((out / "config.json").read_text())
    assert config["seed"] == DEFAULT_SEED


def test_simulate_empty_sequence_echoes_state(capsys, tmp_path):
    seq = tmp_path / "empty.json"
    seq.write_text('{"segments": []}')
    out = tmp_path / "sim"
    assert run(capsys, "simulate", "--seq", seq, "--initial", "e_zero", "--out", out)[0] == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["final_state"]["e_zero"] == 1.0


def test_missing_params_is_config_error(capsys, tmp_path, pair_seq):
    out = tmp_path / "never"
    code, err = run(capsys, "simulate", "--params", tmp_path / "nope.json", "--seq", pair_seq, "--out", out)
    assert code != 0 and err["error"]["kind"] == "config"
    assert not out.exists()


def test_simulate_thread_independent(capsys, tmp_path, pair_seq):
    outs = []
    for threads in (1, 3):
        out = tmp_path / f"t{threads}"
        run(capsys, "simulate", "--seq", pair_seq, "--trajectories", 250_000, "--threads", threads, "--out", out)
        outs.append(json.loads((out / "summary.json").read_text())["sampled_final_state"])
    assert outs[0] == outs[1]


def test_fit_bundled_dataset(capsys, tmp_path, params):
    out = tmp_path / "fit"
    assert run(capsys, "fit", "--data", synthetic_path(), "--out", out)[0] == 0
    res = json.loads((out / "fit.json").read_text())
    for name in ("a", "b", "c", "d", "e", "f"):
        assert abs(res["params"][name] - getattr(params, name)) < 3 * res["errors"][name], name
    residuals = read_csv(out / "residuals.csv")
    assert len(residuals) == res["n_data"]

    out2 = tmp_path / "fit_excited"
    assert run(capsys, "fit", "--data", synthetic_path(), "--variant", "excited", "--out", out2)[0] == 0
    excited = json.loads((out2 / "fit.json").read_text())
    assert excited["variant"] == "excited" and excited["sse"] > res["sse"]


def test_fit_conflicting_declaration(capsys, tmp_path):
    out = tmp_path / "fit"
    code, err = run(capsys, "fit", "--data", synthetic_path(), "--free", "a,b", "--fixed", "a", "--out", out)
    assert code == 2 and err["error"]["kind"] == "config"
    assert not out.exists()


def test_fit_malformed_header(capsys, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("kind,green_uW,red_power,tau_ns,spin,charge_init,value,sigma\n")
    code, err = run(capsys, "fit", "--data", bad, "--out", tmp_path / "o")
    assert code == 2 and err["error"]["kind"] == "parse"
    assert "red_power" in err["error"]["message"]


def test_predict_cycling(capsys, tmp_path):
    out = tmp_path / "cyc"
    assert run(capsys, "predict", "cycling", "--out", out)[0] == 0
    opt = json.loads((out / "optimum.json").read_text())
    assert abs(opt["cycling"] - 0.825) <= 0.003
    assert read_csv(out / "sweep.csv")


@pytest.mark.parametrize("what", ["excitation", "branching", "grid", "steady"])
def test_predict_other_sweeps(capsys, tmp_path, what):
    out = tmp_path / what
    assert run(capsys, "predict", what, "--out", out, "--duration-us", 5)[0] == 0
    assert (out / "optimum.json").exists()


def test_predict_zero_rates(capsys, tmp_path, params):
    zero = params.replace(a=0.0, b=0.0, c=0.0, d=0.0, e=0.0, f=0.0, Is_rate=0.0)
    path = tmp_path / "zero.json"
    save_params(zero, path)
    out = tmp_path / "grid"
    assert run(capsys, "predict", "grid", "--params", path, "--out", out)[0] == 0
    rows = read_csv(out / "sweep.csv")
    assert all(abs(float(r["ionization"])) < 1e-15 and abs(float(r["recombination"])) < 1e-15 for r in rows)


def test_predict_bad_grid(capsys, tmp_path):
    code, err = run(capsys, "predict", "excitation", "--green", "1:x:3", "--out", tmp_path / "o")
    assert code == 2 and err["error"]["kind"] == "config"


def test_outputs_byte_identical(capsys, tmp_path):
    for name in ("a", "b"):
        run(capsys, "generate", "--kinds", "switching_vs_green", "--shots", 2000,
            "--calibration-shots", 20_000, "--out", tmp_path / name)
        run(capsys, "predict", "excitation", "--bands", "--out", tmp_path / f"p{name}")
    for f in ("data.csv", "calibration.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    # the echoed settings differ only in the output directory
    ca, cb = (json.loads((tmp_path / n / "config.json").read_text()) for n in ("a", "b"))
    assert {k: v for k, v in ca.items() if k != "out"} == {k: v for k, v in cb.items() if k != "out"}
    for f in ("sweep.csv", "optimum.json"):
        assert (tmp_path / "pa" / f).read_bytes() == (tmp_path / "pb" / f).read_bytes()


def test_generate_extract_round_trip(capsys, tmp_path):
    gen = tmp_path / "gen"
    assert run(capsys, "generate", "--mode", "readouts", "--green-uw", 150, "--shots", 300_000,
               "--seed", 17, "--out", gen)[0] == 0
    ext = tmp_path / "ext"
    assert run(capsys, "extract", "--data", gen / "readouts.csv",
               "--calibration", gen / "calibration.json", "--out", ext)[0] == 0
    truth = json.loads((gen / "truth.json").read_text())
    est = json.loads((ext / "switching.json").read_text())
    assert abs(est["P_I"] - truth["P_I"]) < 4 * est["P_I_err"]
    assert abs(est["P_R"] - truth["P_R"]) < 4 * est["P_R_err"]


def test_extract_perfect_calibration(capsys, tmp_path):
    cal = tmp_path / "cal.json"
    cal.write_text(json.dumps({"threshold": 5, "R0": 1.0, "Rm": 1.0, "I0": 1.0, "Im": 1.0}))
    data = tmp_path / "r.csv"
    data.write_text("first,second\n" + "0,0\n" * 10 + "20,20\n" * 10)
    out = tmp_path / "ext"
    assert run(capsys, "extract", "--data", data, "--calibration", cal, "--out", out)[0] == 0
    est = json.loads((out / "switching.json").read_text())
    assert est["P_I"] == 0.0 and est["P_R"] == 0.0


def test_extract_malformed_header(capsys, tmp_path):
    cal = tmp_path / "cal.json"
    cal.write_text(json.dumps({"threshold": 5, "R0": 0.95, "Rm": 0.95}))
    data = tmp_path / "r.csv"
    data.write_text("first,later\n1,2\n")
    code, err = run(capsys, "extract", "--data", data, "--calibration", cal, "--out", tmp_path / "o")
    assert code == 2 and err["error"]["kind"] == "parse" and "later" in err["error"]["message"]
    assert not (tmp_path / "o").exists()


def test_config_layering(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"shots": 1000, "calibration_shots": 10_000, "seed": 5,
                               "kinds": "switching_vs_green"}))
    out = tmp_path / "g"
    assert run(capsys, "generate", "--config", cfg, "--seed", 9, "--out", out)[0] == 0
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["shots"] == 1000 and echoed["seed"] == 9


def test_config_unknown_key(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"shoots": 1000}))
    code, err = run(capsys, "generate", "--config", cfg, "--out", tmp_path / "g")
    assert code == 2 and err["error"]["kind"] == "config"
