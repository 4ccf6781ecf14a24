import json
import subprocess
import sys

import numpy as np
import pytest

from efftree.cli import main
from efftree.data import write_csv
from efftree.simulate import SimSetting, generate
from efftree.tree import schema_to_dict


@pytest.fixture(scope="module")
def heterog_csv(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    data, _ = generate(SimSetting("heterogeneous", n=800, seed=51))
    csv_path = base / "train.csv"
    write_csv(data, csv_path)
    schema_path = base / "schema.json"
    schema_path.write_text(json.dumps(schema_to_dict(data.schema)), encoding="utf-8")
    return base, csv_path, schema_path, data


def run_cli(args):
    return main([str(a) for a in args])


def test_help_lists_every_fit_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli(["fit", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--data", "--schema", "--estimator", "--propensity-spec", "--outcome-spec",
                 "--scope", "--lambda", "--train-frac", "--min-node", "--min-per-arm",
                 "--max-depth", "--epsilon", "--seed", "--bootstrap", "--out"):
        assert flag in text
    assert "default" in text


def test_fit_g_homogeneous_single_node(tmp_path, capsys):
    data, _ = generate(SimSetting("homogeneous", n=800, seed=53))
    csv_path = tmp_path / "homog.csv"
    write_csv(data, csv_path)
    schema_path = tmp_path / "schema.json"
    schema_path.write_text(json.dumps(schema_to_dict(data.schema)), encoding="utf-8")
    code = run_cli([
        "fit", "--data", csv_path, "--schema", schema_path,
        "--estimator", "g",
        "--outcome-spec", "1 + A + lt(x1,0) + exp(x2) + gt(x4,0) + cube(x5)",
        "--seed", 4, "--out", tmp_path,
    ])
    assert code == 0
    tree = json.loads((tmp_path / "tree.json").read_text())
    assert len(tree["nodes"]) == 1
    assert (tmp_path / "tree.txt").exists()
    assert (tmp_path / "selection.json").exists()
    out = capsys.readouterr().out
    assert "terminal" in out and "effect" in out


def test_fit_requires_propensity_for_ipw(heterog_csv):
    base, csv_path, schema_path, _ = heterog_csv
    code = run_cli(["fit", "--data", csv_path, "--schema", schema_path,
                    "--estimator", "ipw", "--out", base])
    assert code == 2


def test_fit_bad_data_path(heterog_csv, tmp_path):
    base, csv_path, schema_path, _ = heterog_csv
    code = run_cli(["fit", "--data", tmp_path / "missing.csv", "--schema", schema_path,
                    "--estimator", "g", "--outcome-spec", "1 + A", "--out", tmp_path])
    assert code == 3


def test_fit_deterministic_artifacts(heterog_csv, tmp_path):
    base, csv_path, schema_path, _ = heterog_csv
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = run_cli([
            "fit", "--data", csv_path, "--schema", schema_path,
            "--estimator", "dr",
            "--propensity-spec", "1 + x1 + x2 + x3",
            "--outcome-spec", "1 + A + lt(x1,0) + exp(x2) + A:gt(x4,0) + cube(x5)",
            "--seed", 12, "--bootstrap", 30, "--out", out,
        ])
        assert code == 0
        outs.append(out)
    for artifact in ("tree.json", "tree.txt", "selection.json", "bootstrap.json"):
        assert (outs[0] / artifact).read_bytes() == (outs[1] / artifact).read_bytes()


def test_predict_round_trip(heterog_csv, tmp_path, capsys):
    base, csv_path, schema_path, data = heterog_csv
    out = tmp_path / "fit"
    code = run_cli([
        "fit", "--data", csv_path, "--schema", schema_path,
        "--estimator", "g",
        "--outcome-spec", "1 + A + lt(x1,0) + exp(x2) + A:gt(x4,0) + cube(x5)",
        "--seed", 3, "--out", out,
    ])
    assert code == 0
    capsys.readouterr()
    code = run_cli(["predict", "--tree", out / "tree.json", "--data", csv_path])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    header = lines[0].split(",")
    assert header[-2:] == ["effect", "terminal_id"]
    assert len(lines) == data.n + 1

    from efftree.tree import tree_from_dict

    tree = tree_from_dict(json.loads((out / "tree.json").read_text()))
    expected = tree.predict(data)
    got = np.array([float(line.split(",")[-2]) for line in lines[1:]])
    assert got == pytest.approx(expected)


def test_predict_schema_mismatch(heterog_csv, tmp_path, capsys):
    base, csv_path, schema_path, data = heterog_csv
    out = tmp_path / "fit"
    run_cli([
        "fit", "--data", csv_path, "--schema", schema_path,
        "--estimator", "g", "--outcome-spec", "1 + A", "--seed", 3, "--out", out,
    ])
    capsys.readouterr()
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n", encoding="utf-8")
    code = run_cli(["predict", "--tree", out / "tree.json", "--data", bad])
    assert code == 3


def test_simulate_single_replicate(capsys):
    code = run_cli(["simulate", "--setting", "heterog", "--algo", "g",
                    "--reps", 1, "--seed", 5, "--n", 500, "--threads", 1])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["results"]["replications"] == 1
    assert "mean_fit_seconds" not in payload["results"]
    assert 0.0 <= payload["results"]["correct_tree_prop"] <= 1.0


def test_simulate_rejects_unknown_setting():
    with pytest.raises(SystemExit) as exc:
        run_cli(["simulate", "--setting", "weird", "--algo", "g", "--reps", 1])
    assert exc.value.code == 2


def test_simulate_rejects_bad_algo(capsys):
    code = run_cli(["simulate", "--setting", "heterog", "--algo", "zzz", "--reps", 1])
    assert code == 2


def test_predict_memory_stays_below_twice_input(heterog_csv, tmp_path, capsys):
    import tracemalloc

    base, csv_path, schema_path, _ = heterog_csv
    out = tmp_path / "fit"
    run_cli([
        "fit", "--data", csv_path, "--schema", schema_path,
        "--estimator", "g", "--outcome-spec", "1 + A + gt(x4,0) + A:gt(x4,0)",
        "--seed", 3, "--out", out,
    ])
    big_data, _ = generate(SimSetting("heterogeneous", n=60_000, seed=99))
    big_csv = tmp_path / "big.csv"
    write_csv(big_data, big_csv)
    input_bytes = big_csv.stat().st_size
    capsys.readouterr()
    tracemalloc.start()
    code = run_cli(["predict", "--tree", out / "tree.json", "--data", big_csv])
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    capsys.readouterr()
    assert code == 0
    assert peak < 2 * input_bytes, f"peak {peak} vs input {input_bytes}"


def test_simulate_byte_identical_json_single_thread():
    cmd = [sys.executable, "-m", "efftree.cli", "simulate", "--setting", "heterog",
           "--algo", "dr", "--reps", "2", "--seed", "21", "--n", "400", "--threads", "1"]
    a = subprocess.run(cmd, capture_output=True, check=True)
    b = subprocess.run(cmd, capture_output=True, check=True)
    assert a.stdout == b.stdout
    assert len(a.stdout) > 0
