"""CSV ingestion, the command-line surface, and its exit-code contract."""

import json
import subprocess
import sys

import numpy as np
import pytest

import glmm_means.cli as cli
from glmm_means import (
    ColumnMapping,
    Family,
    FitConfig,
    InputError,
    ModelSpec,
    fit,
    generate_dataset,
    logistic_design,
    read_dataset,
)

MAPPING = ColumnMapping(covariates=("x", "u", "t"), group_by=("u", "t"))


def write_dataset_csv(path, dataset):
    """Full-precision CSV for round-trip tests (column layout of read_dataset)."""
    lines = ["subject_id,y,x,u,t"]
    for subject in dataset.subjects:
        for row in range(subject.n_obs):
            x = subject.X[row]
            cells = [repr(float(v)) for v in (subject.y[row], x[1], x[2], x[3])]
            lines.append(",".join([subject.subject_id, *cells]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@pytest.fixture()
def small_csv(tmp_path):
    design = logistic_design(arm_sizes=(30, 26, 30, 24), replications=1, seed=6)
    dataset = generate_dataset(design, seed=8)
    path = tmp_path / "data.csv"
    write_dataset_csv(path, dataset)
    return path, dataset


# ---- read_dataset -------------------------------------------------------------


def test_two_row_toy_roundtrip(tmp_path):
    p = tmp_path / "toy.csv"
    p.write_text("subject_id,y,x,u,t\na,1,0.5,1,0\na,0,0.5,1,1\n", encoding="utf-8")
    ds = read_dataset(str(p), MAPPING)
    assert ds.n_subjects == 1
    assert ds.n_obs == 2
    assert ds.p == 4  # intercept prepended
    np.testing.assert_array_equal(ds.X[:, 0], 1.0)
    assert ds.group_labels == ("u=1,t=0", "u=1,t=1")


def test_missing_column_is_an_input_error(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("subject_id,y,x\na,1,0.5\n", encoding="utf-8")
    with pytest.raises(InputError, match="missing column"):
        read_dataset(str(p), MAPPING)


def test_non_numeric_cell_names_row_and_column(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("subject_id,y,x,u,t\na,1,0.5,1,0\nb,NA,0.1,0,1\n", encoding="utf-8")
    with pytest.raises(InputError, match=r"row 3, column 'y'"):
        read_dataset(str(p), MAPPING)


def test_empty_file_is_an_input_error(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("", encoding="utf-8")
    with pytest.raises(InputError, match="empty"):
        read_dataset(str(p), MAPPING)


def test_header_only_file_is_an_input_error(tmp_path):
    p = tmp_path / "header.csv"
    p.write_text("subject_id,y,x,u,t\n", encoding="utf-8")
    with pytest.raises(InputError, match="no data rows"):
        read_dataset(str(p), MAPPING)


def test_missing_file_is_an_input_error(tmp_path):
    with pytest.raises(InputError, match="cannot open"):
        read_dataset(str(tmp_path / "nope.csv"), MAPPING)


def test_csv_roundtrip_reproduces_the_fit(small_csv):
    path, dataset = small_csv
    ds2 = read_dataset(str(path), MAPPING)
    spec = ModelSpec(family=Family.LOGISTIC, p=4)
    f1 = fit(dataset, spec, FitConfig())
    f2 = fit(ds2, spec, FitConfig())
    assert np.array_equal(f1.params.beta, f2.params.beta)
    assert f1.params.sigma2 == f2.params.sigma2
    assert f1.loglik == f2.loglik


# ---- CLI commands -------------------------------------------------------------


def run_cli(args, capsys):
    code = cli.main(args)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


BASE = ["--family", "logistic", "--covariates", "x,u,t", "--group-by", "u,t"]


def test_cli_fit_json(small_csv, capsys, tmp_path):
    path, _ = small_csv
    out = tmp_path / "fit.json"
    code, _, err = run_cli(
        ["fit", "--input", str(path), *BASE, "--format", "json", "--out", str(out)], capsys
    )
    assert code == 0, err
    payload = json.loads(out.read_text())
    assert payload["converged"] is True
    names = [p["name"] for p in payload["params"]]
    assert names == ["beta_intercept", "beta_x", "beta_u", "beta_t", "sigma2"]


def test_cli_fit_json_is_full_precision(small_csv, capsys, tmp_path):
    path, dataset = small_csv
    out = tmp_path / "fit.json"
    code, _, _ = run_cli(
        ["fit", "--input", str(path), *BASE, "--format", "json", "--out", str(out)], capsys
    )
    assert code == 0
    payload = json.loads(out.read_text())
    fitted = fit(dataset, ModelSpec(family=Family.LOGISTIC, p=4), FitConfig())
    est = [p["estimate"] for p in payload["params"]]
    np.testing.assert_array_equal(est[:4], fitted.params.beta)
    assert est[4] == fitted.params.sigma2


def test_cli_means_column_contract(small_csv, capsys):
    path, _ = small_csv
    code, out, err = run_cli(["means", "--input", str(path), *BASE], capsys)
    assert code == 0, err
    header = out.splitlines()[0].split(",")
    assert header[:9] == [
        "group", "n", "Ybar", "mu_star", "mu_star_se",
        "lambda_hat", "lambda_se", "mu_hat", "mu_se",
    ]
    pairs = header[9:]
    assert len(pairs) % 2 == 0
    for lo, hi in zip(pairs[::2], pairs[1::2]):
        assert lo.endswith("_lo") and hi.endswith("_hi")
        assert lo[:-3] == hi[:-3]
    assert len(out.splitlines()) == 5  # header + 4 groups


def test_cli_means_negbin_includes_lognormal_interval(tmp_path, capsys):
    from glmm_means import negbin_design

    design = negbin_design(arm_sizes=(24, 20, 24, 18), replications=1, seed=4)
    dataset = generate_dataset(design, seed=2)
    path = tmp_path / "nb.csv"
    write_dataset_csv(path, dataset)
    code, out, err = run_cli(
        ["means", "--input", str(path), "--family", "negbin",
         "--covariates", "x,u,t", "--group-by", "u,t"],
        capsys,
    )
    assert code == 0, err
    header = out.splitlines()[0].split(",")
    assert "mu_lognormal_lo" in header and "mu_lognormal_hi" in header


def test_cli_validate_rank_deficiency(tmp_path, capsys):
    p = tmp_path / "rank.csv"
    rows = ["subject_id,y,x,u,t"]
    rng = np.random.default_rng(0)
    for i in range(12):
        x = rng.uniform(0, 1)
        rows.append(f"s{i},{i % 2},{x},{2*x},0")  # u = 2x: collinear with x
    p.write_text("\n".join(rows) + "\n", encoding="utf-8")
    code, out, err = run_cli(["validate", "--input", str(p), *BASE], capsys)
    assert code == 1
    payload = json.loads(out)
    assert payload["valid"] is False
    assert any(v["code"] == "rank" for v in payload["violations"])


def test_cli_validate_clean(small_csv, capsys):
    path, _ = small_csv
    code, out, _ = run_cli(["validate", "--input", str(path), *BASE], capsys)
    assert code == 0
    assert json.loads(out)["valid"] is True


def test_cli_missing_file_exits_3(capsys):
    code, _, err = run_cli(["fit", "--input", "/nonexistent.csv", *BASE], capsys)
    assert code == 3
    assert json.loads(err)["error"]["code"] == "io"


def test_cli_usage_error_exits_1(capsys):
    code, _, err = run_cli(["fit", "--family", "logistic"], capsys)  # no --input
    assert code == 1
    assert json.loads(err)["error"]["code"] == "usage"


def test_cli_nonconvergence_exits_2(small_csv, capsys, monkeypatch):
    path, _ = small_csv

    def fake_fit(dataset, spec, config):
        real = fit(dataset, spec, config)
        object.__setattr__(real, "converged", False)
        return real

    monkeypatch.setattr(cli, "fit", fake_fit)
    code, _, err = run_cli(["fit", "--input", str(path), *BASE], capsys)
    assert code == 2
    assert json.loads(err)["error"]["code"] == "non_convergence"


def test_cli_simulate_single_replication(capsys):
    code, out, err = run_cli(
        ["simulate", "--family", "logistic", "--reps", "1", "--seed", "5", "--format", "csv"],
        capsys,
    )
    assert code == 0, err
    lines = out.strip().splitlines()
    assert lines[0].startswith("kind,T1,T2,U,t")
    assert len(lines) == 9  # header + 4 marginal + 4 conditional rows


def test_cli_config_file_defaults(small_csv, capsys, tmp_path):
    path, _ = small_csv
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"format": "json", "covariates": "x,u,t", "group_by": "u,t"}))
    code, out, _ = run_cli(
        ["fit", "--input", str(path), "--family", "logistic", "--config", str(cfg)], capsys
    )
    assert code == 0
    assert json.loads(out)["converged"] is True


def test_cli_flags_override_config(small_csv, capsys, tmp_path):
    path, _ = small_csv
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"format": "json"}))
    code, out, _ = run_cli(
        ["fit", "--input", str(path), *BASE, "--config", str(cfg), "--format", "csv"], capsys
    )
    assert code == 0
    assert out.splitlines()[0] == "name,estimate,se"


def test_csv_cells_use_six_significant_digits():
    from glmm_means.io import _csv_cell

    assert _csv_cell(0.123456789) == "0.123457"
    assert _csv_cell(1234567.89) == "1.23457e+06"
    assert _csv_cell(None) == ""
    assert _csv_cell(True) == "true"
    assert _csv_cell(7) == "7"


def test_module_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "glmm_means", "simulate", "--family", "logistic",
         "--reps", "1", "--seed", "3"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.startswith("kind,")
