import json
from importlib import resources

import jsonschema
import numpy as np
import pytest

from bifactor_alm.alm import extract_structure
from bifactor_alm.cli import (
    AsymmetricMatrix,
    MissingN,
    NonNumericCell,
    NotPositiveDefinite,
    ingest,
    main,
    matrix_from_json,
    read_hierarchy,
    read_structure,
)
from bifactor_alm.model import FIG_A1_TREE, hierarchy_constraint_pairs
from bifactor_alm.simlab import emc, generate_bifactor_truth, generate_hier_truth


@pytest.fixture(scope="module")
def schema():
    return json.loads(resources.files("bifactor_alm").joinpath("schema.json").read_text())


def validate(obj, schema, name):
    jsonschema.validate(obj, {"$ref": f"#/$defs/{name}", "$defs": schema["$defs"]})


def write_matrix(path, M, header=None):
    lines = [",".join(header)] if header else []
    lines += [",".join(repr(float(v)) for v in row) for row in np.atleast_2d(M)]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


@pytest.fixture(scope="module")
def raw_file(tmp_path_factory):
    truth = generate_bifactor_truth(15, 3, rng_seed=1)
    rng = np.random.default_rng(2)
    X = rng.standard_normal((2000, 15)) @ np.linalg.cholesky(truth.sigma()).T
    path = tmp_path_factory.mktemp("raw") / "data.csv"
    write_matrix(path, X, header=[f"item{j + 1}" for j in range(15)])
    return str(path), truth, X


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


# ---------------------------------------------------------------------------
# ingestion


def test_ingest_raw_with_header(raw_file):
    path, _, X = raw_file
    data = ingest(path, "raw")
    assert data.J == 15 and data.N == 2000
    Xc = X - X.mean(axis=0)
    np.testing.assert_allclose(data.S, Xc.T @ Xc / 2000, rtol=1e-12)


def test_ingest_identity_covariance(tmp_path):
    data = ingest(write_matrix(tmp_path / "c.csv", np.eye(4)), "cov", 100)
    assert data.N == 100 and data.J == 4


def test_ingest_errors(tmp_path):
    with pytest.raises(MissingN):
        ingest(write_matrix(tmp_path / "c.csv", np.eye(3)), "cov")
    with pytest.raises(NotPositiveDefinite):
        ingest(write_matrix(tmp_path / "n.csv", np.diag([1.0, -1.0, 2.0])), "cov", 50)
    with pytest.raises(AsymmetricMatrix):
        ingest(write_matrix(tmp_path / "a.csv", [[1.0, 0.2], [0.5, 1.0]]), "cov", 50)
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2,3\n4,x,6\n7,8,9\n")
    with pytest.raises(NonNumericCell) as info:
        ingest(str(bad), "raw")
    assert (info.value.details["row"], info.value.details["col"]) == (2, 2)


def test_malformed_csv_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2,3,4\n4,5,oops,7\n")
    code, _, err = run(["fit", "--input", str(bad), "--groups", "1"], capsys)
    assert code == 2
    payload = json.loads(err)
    assert payload["error"] == "NonNumericCell" and payload["row"] == 2 and payload["col"] == 3


def test_cov_without_n_exit_code(tmp_path, capsys, schema):
    path = write_matrix(tmp_path / "c.csv", np.eye(5))
    code, _, err = run(["fit", "--input", path, "--kind", "cov", "--groups", "2"], capsys)
    assert code == 2
    validate(json.loads(err), schema, "error")


def test_hierarchy_file(tmp_path):
    path = tmp_path / "tree.txt"
    path.write_text("# three layers\n1 0\n2 1\n3 1\n4 2\n5 2\n6 3\n7 3\n")
    tree = read_hierarchy(str(path))
    assert tree == FIG_A1_TREE
    assert hierarchy_constraint_pairs(tree).pairs == hierarchy_constraint_pairs(FIG_A1_TREE).pairs


def test_structure_file(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("item,group\n1,1\n2,1\n3,2\n")
    np.testing.assert_array_equal(read_structure(str(path), 4), [1, 1, 2, 0])


# ---------------------------------------------------------------------------
# subcommands


def test_fit_recovers_structure_and_round_trips(raw_file, tmp_path, capsys, schema):
    path, truth, _ = raw_file
    out = tmp_path / "fit.json"
    argv = ["fit", "--input", path, "--groups", "3", "--starts", "8", "--seed", "4", "--jobs", "1", "--out", str(out)]
    code, _, _ = run(argv, capsys)
    assert code == 0
    result = json.loads(out.read_text())
    validate(result, schema, "fit")
    assert emc(np.array(result["structure"]), truth.labels) == 1
    Lambda = matrix_from_json(result["lambda"])
    np.testing.assert_array_equal(extract_structure(Lambda, result["delta2"]), result["structure"])
    flags = result["manifest"]["flags"]
    assert flags["groups"] == 3 and flags["starts"] == 8 and flags["seed"] == 4
    assert result["manifest"]["config"]["n_starts"] == 8


def test_fit_is_reproducible(raw_file, tmp_path, capsys):
    path, _, _ = raw_file
    outs = []
    for name in ("a.json", "b.json"):
        target = tmp_path / name
        run(["fit", "--input", path, "--groups", "3", "--starts", "3", "--seed", "1", "--jobs", "1", "--out", str(target)], capsys)
        outs.append(json.loads(target.read_text()))
    a, b = outs
    assert a["loss"] == b["loss"]
    assert a["lambda"] == b["lambda"]


def test_fit_single_group(raw_file, capsys, schema):
    path, _, _ = raw_file
    code, out, _ = run(["fit", "--input", path, "--groups", "1", "--starts", "2", "--jobs", "1"], capsys)
    assert code == 0
    result = json.loads(out)
    validate(result, schema, "fit")
    assert set(result["structure"]) <= {0, 1}


def test_fit_with_hierarchy(tmp_path, capsys, schema):
    truth = generate_hier_truth(16, rng_seed=0, disjoint=True)
    cov = write_matrix(tmp_path / "cov.csv", truth.sigma())
    tree = tmp_path / "tree.txt"
    tree.write_text("1 0\n2 1\n3 1\n4 2\n5 2\n6 3\n7 3\n")
    argv = ["fit", "--input", cov, "--kind", "cov", "--n", "1000", "--hierarchy", str(tree), "--starts", "3", "--jobs", "1"]
    code, out, _ = run(argv, capsys)
    assert code == 0
    result = json.loads(out)
    validate(result, schema, "fit")
    assert result["structure"] is None and result["bic"] is None


def test_select_g(raw_file, capsys, schema):
    path, _, _ = raw_file
    code, out, _ = run(["select-g", "--input", path, "--gmin", "2", "--gmax", "4", "--starts", "8", "--jobs", "1"], capsys)
    assert code == 0
    result = json.loads(out)
    validate(result, schema, "sweep")
    assert result["chosen"] == 3 and result["candidates"] == [2, 3, 4]


def test_select_g_single_candidate(raw_file, capsys):
    path, _, _ = raw_file
    code, out, _ = run(["select-g", "--input", path, "--gmin", "3", "--gmax", "3", "--starts", "2", "--jobs", "1"], capsys)
    assert code == 0 and json.loads(out)["chosen"] == 3


def test_select_g_all_fail_exit_code(raw_file, capsys, schema):
    path, _, _ = raw_file
    argv = ["select-g", "--input", path, "--gmin", "2", "--gmax", "3", "--starts", "1", "--tmax", "1",
            "--delta1", "1e-12", "--delta2", "1e-12", "--jobs", "1"]
    code, _, err = run(argv, capsys)
    assert code == 3
    validate(json.loads(err), schema, "error")


def test_simulate_json_and_csv(tmp_path, capsys, schema):
    base = ["simulate", "--study", "study1", "--j", "6", "--g", "2", "--n", "200", "--reps", "2", "--starts", "2", "--seed", "5", "--jobs", "1"]
    code, out, _ = run(base, capsys)
    assert code == 0
    report = json.loads(out)
    validate(report, schema, "study")
    assert len(report["rows"]) == 2
    code, out, _ = run(base + ["--out-format", "csv"], capsys)
    lines = out.strip().splitlines()
    assert lines[0].startswith("rep,failed") and len(lines) == 4 and lines[-1].startswith("mean")


def test_simulate_zero_reps(capsys, schema):
    code, out, _ = run(["simulate", "--study", "study1", "--j", "6", "--g", "2", "--n", "100", "--reps", "0"], capsys)
    assert code == 0
    report = json.loads(out)
    validate(report, schema, "study")
    assert report["rows"] == []


def test_simulate_invalid_spec(capsys):
    code, _, err = run(["simulate", "--study", "nope", "--j", "6", "--g", "2", "--n", "100", "--reps", "1"], capsys)
    assert code == 2 and json.loads(err)["error"] == "InvalidSpec"


def test_check_id(tmp_path, capsys, schema):
    truth = generate_bifactor_truth(15, 3, rng_seed=0)
    lam = write_matrix(tmp_path / "lam.csv", truth.Lambda_star)
    struct = tmp_path / "s.csv"
    struct.write_text("".join(f"{j + 1},{g}\n" for j, g in enumerate(truth.labels)))
    code, out, _ = run(["check-id", "--lambda", lam, "--structure", str(struct)], capsys)
    assert code == 0
    report = json.loads(out)
    validate(report, schema, "identifiability")
    assert report["condition3"] is True
    assert report["Q_sets"][0] == [1, 4, 7, 10, 13]


def test_check_id_two_item_group(tmp_path, capsys):
    L = np.array([[0.5, 0.6, 0, 0], [0.4, 0.7, 0, 0], [0.6, -0.5, 0, 0],
                  [0.5, 0, 0.8, 0], [0.3, 0, 0.4, 0], [0.7, 0, 0.6, 0],
                  [0.5, 0, 0, 0.9], [0.2, 0, 0, 0.3]])
    labels = [1, 1, 1, 2, 2, 2, 3, 3]
    lam = write_matrix(tmp_path / "lam.csv", L)
    struct = tmp_path / "s.csv"
    struct.write_text("".join(f"{j + 1},{g}\n" for j, g in enumerate(labels)))
    code, out, _ = run(["check-id", "--lambda", lam, "--structure", str(struct)], capsys)
    assert code == 0 and json.loads(out)["condition3"] is False


def test_check_id_mismatch_exit_code(tmp_path, capsys):
    lam = write_matrix(tmp_path / "lam.csv", [[0.5, 0.6, 0.2], [0.4, 0.0, 0.7], [0.3, 0.5, 0.0]])
    struct = tmp_path / "s.csv"
    struct.write_text("1,1\n2,2\n3,1\n")
    code, _, err = run(["check-id", "--lambda", lam, "--structure", str(struct)], capsys)
    assert code == 2 and json.loads(err)["error"] == "StructureMismatch"
