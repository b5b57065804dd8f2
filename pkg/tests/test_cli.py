import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from robustdp.cli import run
from robustdp.fixtures import EX_5_1, EX_5_2, fixture
from robustdp.model import serialize

ROOT = Path(__file__).resolve().parents[1]
MODELS = ROOT / "models"
GOLDEN = Path(__file__).parent / "golden" / "tables.txt"


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


def call_json(*argv):
    code, out, err = call(*argv)
    assert code == 0, err
    return json.loads(out)["result"]


def write_json(tmp_path, name, doc):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


# ---------------------------------------------------------------- usage


def test_version_and_help_exit_zero():
    assert call("--version")[0] == 0
    assert call("solve", "--help")[0] == 0


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["solve", "--tol", "-1", "--model", MODELS / "ex51.json"],
    ["solve", "--gamma", "1.5", "--model", MODELS / "ex51.json"],
    ["tables", "--csv", "--text"],
    ["learn-sim", "--seeds", "0", "--seed", "1"],
])
def test_bad_flags_exit_two(argv):
    assert call(*argv)[0] == 2


def test_missing_required_inputs_exit_two():
    code, out, err = call("learn-sim")
    assert code == 2 and out == "" and "--seed" in err
    code, _, err = call("solve")
    assert code == 2 and "--model" in err
    code, _, err = call("evaluate", "--model", MODELS / "ex51.json", "--policy", MODELS / "ex51_commit_policy.json")
    assert code == 2 and "--adversary" in err
    code, _, err = call("evaluate", "--model", MODELS / "ex51.json", "--policy", MODELS / "ex51_commit_policy.json",
                        "--adversary", MODELS / "ex51_p1_adversary.json", "--mc-samples", 10)
    assert code == 2 and "--seed" in err


def test_domain_errors_exit_one(tmp_path):
    code, _, err = call("solve", "--model", tmp_path / "missing.json")
    assert code == 1 and err.startswith("error:")
    bad = tmp_path / "bad.json"
    bad.write_text("{", encoding="utf-8")
    assert call("solve", "--model", bad)[0] == 1
    code, _, err = call("robust-eval", "--model", MODELS / "ex51.json", "--policy",
                        MODELS / "ex51_commit_policy.json", "--initial", "Z")
    assert code == 1 and "unknown state" in err
    assert call("learn-sim", "--seed", 0, "--mode", "turbo")[0] == 1


# ---------------------------------------------------------------- commands


def test_validate(tmp_path):
    result = call_json("validate", "--model", MODELS / "ex52.json")
    assert result["valid"] and result["diagnostics"] == []
    doc = json.loads(serialize(fixture(EX_5_2).model))
    doc["ambiguity"]["sets"]["B"][0][0] = [0.0, 0.9, 0.0]
    code, out, _ = call("validate", "--model", write_json(tmp_path, "m.json", doc))
    assert code == 1
    assert json.loads(out)["result"]["valid"] is False


def test_solve_equations():
    result = call_json("solve", "--model", MODELS / "ex51.json")
    assert result["value"]["paper"] == pytest.approx({"I": 0.0, "G": 1.0, "B": -1.0}, abs=1e-8)
    assert result["residual"] <= 1e-9
    assert result["greedy_rule"]["I"] == pytest.approx([0.5, 0.5], abs=1e-8)
    infsup = call_json("solve", "--model", MODELS / "ex51.json", "--equation", "infsup")
    assert infsup["value"]["paper"]["I"] == pytest.approx(0.9 / (1 - 0.81), abs=1e-8)
    q = call_json("solve", "--model", MODELS / "ex52.json", "--equation", "q")
    assert set(q["q"]["I"]) == {"a1", "a2"}


def test_solve_gamma_override():
    result = call_json("solve", "--model", MODELS / "ex53_finite.json", "--gamma", 0.5)
    assert result["value"]["paper"]["I0"] == pytest.approx(-(0.5**3) / (1 - 0.25), abs=1e-8)


def test_evaluate_exact_and_mc():
    base = ["evaluate", "--model", MODELS / "ex51.json", "--policy", MODELS / "ex51_commit_policy.json",
            "--adversary", MODELS / "ex51_p1_adversary.json", "--initial", "I"]
    exact = call_json(*base)
    assert exact["method"] == "linear_solve"
    assert exact["value"]["paper"] == pytest.approx(3.8368421, abs=1e-7)
    mc = call_json(*base, "--mc-samples", 2000, "--seed", 3)
    assert mc["method"] == "monte_carlo"
    assert abs(mc["value"]["paper"] - exact["value"]["paper"]) <= 3.2905 / 1.96 * mc["error_bound"] + 1e-9


def test_robust_eval_classes():
    base = ["robust-eval", "--model", MODELS / "ex51.json", "--policy", MODELS / "ex51_commit_policy.json",
            "--initial", "I"]
    g = 0.9
    stationary = call_json(*base, "--class", "stationary")
    assert stationary["value"]["paper"] == pytest.approx(g**3 / (1 - g**2), abs=1e-8)
    history = call_json(*base, "--class", "history")
    assert history["value"]["paper"] == pytest.approx(-(g**3) / (1 - g**2), abs=1e-8)


def test_policy_file_kinds(tmp_path):
    model_path = MODELS / "ex52.json"
    rule = {"I": [0.75, 0.25], "B": [1.0, 0.0], "C": [1.0, 0.0]}
    docs = [
        {"kind": "stationary", "rule": rule},
        {"kind": "markov_schedule", "rules": [rule], "tail": rule},
        {"kind": "periodic", "rules": [rule, rule]},
        {"kind": "finite_memory", "initial": "m", "decide": [{"memory": "m", "state": None, "probs": [0.75, 0.25]}],
         "update": []},
    ]
    values = []
    for i, doc in enumerate(docs):
        path = write_json(tmp_path, f"p{i}.json", doc)
        values.append(call_json("robust-eval", "--model", model_path, "--policy", path, "--class", "stationary",
                                "--initial", "I")["value"]["normalized"])
    assert values == pytest.approx([values[0]] * 4, abs=1e-9)
    path = write_json(tmp_path, "bad.json", {"kind": "stationary", "rule": {"I": [1.0, 0.0]}})
    assert call("robust-eval", "--model", model_path, "--policy", path)[0] == 1


def test_adversary_file_kinds(tmp_path):
    model = fixture(EX_5_2).model
    kernel = {s: model.ambiguity.sets[i].vertices[0].tolist() for i, s in enumerate(model.states)}
    base = ["evaluate", "--model", MODELS / "ex52.json", "--policy",
            write_json(tmp_path, "p.json", {"kind": "stationary", "rule": {s: [0.5, 0.5] for s in model.states}}),
            "--initial", "I", "--adversary"]
    docs = [
        {"kind": "stationary", "kernel": kernel},
        {"kind": "vertex", "choice": {s: 0 for s in model.states}},
        {"kind": "markov", "kernels": [kernel], "tail": kernel},
    ]
    values = [call_json(*base, write_json(tmp_path, f"a{i}.json", d))["value"]["normalized"] for i, d in enumerate(docs)]
    assert values == pytest.approx([values[0]] * 3, abs=1e-12)


def test_check_dpp_reports():
    result = call_json("check-dpp", "--model", MODELS / "ex51.json", "--controller-info", "history",
                       "--adversary-info", "stationary", "--initial", "I")
    (report,) = result["reports"]
    assert report["verdict"] == "FAILS"
    every = call_json("check-dpp", "--model", MODELS / "ex52.json", "--initial", "I")
    assert len(every["reports"]) == 9


@pytest.mark.parametrize("fixture_id", [EX_5_1, EX_5_2])
def test_counterexample(fixture_id):
    result = call_json("counterexample", fixture_id)
    assert result["fixture"] == fixture_id
    assert all(r["verdict"] == "FAILS" for r in result["dpp"].values())


def test_counterexample_alternation_includes_markov_grid():
    result = call_json("counterexample", "EX_5_3_FINITE")
    grid = result["witnesses"]["branching"]["vs_markov_grid"]
    assert len(grid) == 5


def test_diameter():
    result = call_json("diameter", "--model", MODELS / "learner4.json")
    assert result["diameter"] == 1.0 and result["communicating"] and result["kernels"] == 16


def test_learn_sim_csv_and_threshold():
    code, out, _ = call("learn-sim", "--seed", 0, "--seeds", 2, "--gammas", "0.9", "--mode", "practical:2", "--csv")
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0][:3] == ["gamma", "n", "m"] and len(rows) == 1 + 2 * 16 + 1
    result = call_json("learn-sim", "--seed", 0, "--seeds", 3, "--gammas", "0.9", "--threshold-delta", 0.1)
    assert result["threshold"]["n"] == 549 and result["threshold"]["m"] == 1


def test_tables_outputs():
    code, out, _ = call("tables", "--text")
    assert code == 0 and out == GOLDEN.read_text(encoding="utf-8")
    result = call_json("tables")
    assert result["counts"] == {"HOLDS": 31, "FAILS": 5}
    code, out, _ = call("tables", "--csv")
    assert code == 0 and out.startswith("key,value\n")


def test_out_file(tmp_path):
    target = tmp_path / "report.json"
    code, out, err = call("tables", "--out", target)
    assert code == 0 and out == "" and "wall_time_s=" in err
    assert json.loads(target.read_text(encoding="utf-8"))["command"] == "tables"


def test_output_is_deterministic():
    argv = ["evaluate", "--model", MODELS / "ex51.json", "--policy", MODELS / "ex51_commit_policy.json",
            "--adversary", MODELS / "ex51_p1_adversary.json", "--mc-samples", 500, "--seed", 9]
    assert call(*argv)[1] == call(*argv)[1]
    sim = ["learn-sim", "--seed", 4, "--seeds", 2, "--gammas", "0.9,0.99"]
    assert call(*sim)[1] == call(*sim)[1]
    assert call(*sim)[1] != call("learn-sim", "--seed", 5, "--seeds", 2, "--gammas", "0.9,0.99")[1]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "robustdp", "tables", "--text"], capture_output=True, text=True,
                          check=False)
    assert proc.returncode == 0
    assert proc.stdout == GOLDEN.read_text(encoding="utf-8")
    assert "wall_time_s=" in proc.stderr
