import csv

import numpy as np
import pytest

from drcalib.cli import main


def run_cli(*args):
    return main([str(a) for a in args])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_input_csv(path, x, y_cells):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "y"])
        for row, cell in zip(x, y_cells):
            w.writerow([repr(float(row[0])), repr(float(row[1])), cell])


@pytest.fixture
def mar_csv(tmp_path):
    rng = np.random.default_rng(31)
    n = 250
    x = np.column_stack([rng.uniform(0, 2, n), rng.standard_normal(n)])
    from scipy.special import expit

    d = rng.binomial(1, expit(-0.2 + 0.5 * x[:, 0] + 0.5 * x[:, 1]))
    y = 1 + x[:, 0] + x[:, 1] + rng.standard_normal(n)
    cells = [repr(float(v)) if di == 1 else "" for v, di in zip(y, d)]
    path = tmp_path / "input.csv"
    write_input_csv(path, x, cells)
    return path


class TestSimulateCommand:
    def test_smoke_files_and_schema(self, tmp_path):
        out = tmp_path / "sim"
        code = run_cli(
            "simulate", "--om", "OM1", "--pm", "PM1", "--n", "120", "--reps", "3",
            "--seed", "5", "--roster", "CC,GLM,APS", "--out", out,
        )
        assert code == 0
        reps = read_csv(out / "replications.csv")
        assert len(reps) == 9  # reps x roster
        assert list(reps[0].keys()) == ["rep", "estimator", "estimate", "converged"]
        summary = read_csv(out / "summary.csv")
        assert list(summary[0].keys()) == ["estimator", "bias", "variance", "rmse", "n_converged", "truth"]
        assert len(summary) == 3
        meta = (out / "metadata.txt").read_text()
        assert "seed=5" in meta and "command=simulate" in meta

    def test_reps_one_row_count(self, tmp_path):
        out = tmp_path / "sim1"
        assert run_cli(
            "simulate", "--n", "120", "--reps", "1", "--seed", "2",
            "--roster", "CC,GLM,HM,Tan,APS", "--out", out,
        ) == 0
        assert len(read_csv(out / "replications.csv")) == 5

    def test_byte_identical_across_runs_and_threads(self, tmp_path):
        args = ["simulate", "--n", "150", "--reps", "6", "--seed", "11",
                "--roster", "CC,GLM,APS,APSg0.5"]
        outs = []
        for name, threads in (("a", "1"), ("b", "1"), ("c", "2")):
            out = tmp_path / name
            assert run_cli(*args, "--threads", threads, "--out", out) == 0
            outs.append((out / "replications.csv").read_bytes() + (out / "summary.csv").read_bytes())
        assert outs[0] == outs[1] == outs[2]

    def test_bad_roster_exits_2(self, tmp_path):
        assert run_cli("simulate", "--roster", "NOPE", "--out", tmp_path / "x") == 2

    def test_config_file_flags_win(self, tmp_path):
        cfg = tmp_path / "cfg"
        cfg.write_text("n=120\nreps=2\nroster=CC\nseed=9\n")
        out = tmp_path / "sim2"
        assert run_cli("simulate", "--config", cfg, "--reps", "3", "--out", out) == 0
        assert len(read_csv(out / "replications.csv")) == 3  # 3 reps x CC only
        assert "n=120" in (out / "metadata.txt").read_text()


class TestEstimateCommand:
    def test_fully_observed_every_estimator_is_mean(self, tmp_path):
        rng = np.random.default_rng(17)
        n = 60
        x = np.column_stack([rng.uniform(0, 2, n), rng.standard_normal(n)])
        y = rng.standard_normal(n) + 3.0
        path = tmp_path / "full.csv"
        write_input_csv(path, x, [repr(float(v)) for v in y])
        out = tmp_path / "est"
        code = run_cli(
            "estimate", "--input", path, "--outcome", "y",
            "--roster", "CC,GLM,HM,Tan,APS,APSg0.5", "--out", out,
        )
        assert code == 0
        rows = read_csv(out / "estimates.csv")
        for row in rows:
            assert float(row["estimate"]) == pytest.approx(float(y.mean()))

    def test_mar_input_estimates_and_cis(self, mar_csv, tmp_path):
        out = tmp_path / "est2"
        code = run_cli(
            "estimate", "--input", mar_csv, "--outcome", "y",
            "--roster", "CC,APS,APSg0.4", "--out", out,
        )
        assert code == 0
        rows = {r["estimator"]: r for r in read_csv(out / "estimates.csv")}
        assert rows["APS"]["variance"] != ""
        assert float(rows["APS"]["ci_lo"]) < float(rows["APS"]["estimate"]) < float(rows["APS"]["ci_hi"])
        assert rows["APSg0.4"]["gamma_used"] == "0.4"
        assert rows["CC"]["variance"] == ""

    def test_missing_covariate_cell_exit_2(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1", "x2", "y"])
            w.writerow(["0.5", "1.0", "2.0"])
            w.writerow(["0.7", "", "1.0"])
        assert run_cli("estimate", "--input", path, "--outcome", "y", "--out", tmp_path / "o") == 2
        err = capsys.readouterr().err
        assert "row 3" in err and "x2" in err

    def test_missing_outcome_column_exit_2(self, mar_csv, tmp_path):
        assert run_cli(
            "estimate", "--input", mar_csv, "--outcome", "zzz", "--out", tmp_path / "o"
        ) == 2

    def test_unreadable_input_exit_3(self, tmp_path):
        assert run_cli(
            "estimate", "--input", tmp_path / "nope.csv", "--outcome", "y", "--out", tmp_path / "o"
        ) == 3

    def test_solver_failure_exit_4(self, tmp_path):
        # Three respondents cannot support a 3-column basis robust fit.
        path = tmp_path / "tiny.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1", "x2", "y"])
            rows = [
                ["0.1", "0.4", "1.0"], ["0.9", "-1.2", "2.0"], ["1.7", "0.3", "0.5"],
                ["0.5", "1.0", ""], ["1.2", "-0.3", ""], ["0.3", "0.8", ""],
                ["1.9", "0.1", ""], ["0.8", "-0.8", ""],
            ]
            w.writerows(rows)
        assert run_cli(
            "estimate", "--input", path, "--outcome", "y",
            "--roster", "APSg0.5", "--out", tmp_path / "o",
        ) == 4

    def test_ps_columns_restriction(self, mar_csv, tmp_path):
        out = tmp_path / "psr"
        assert run_cli(
            "estimate", "--input", mar_csv, "--outcome", "y",
            "--ps-columns", "x1", "--roster", "GLM", "--out", out,
        ) == 0
        assert run_cli(
            "estimate", "--input", mar_csv, "--outcome", "y",
            "--ps-columns", "bogus", "--roster", "GLM", "--out", tmp_path / "psr2",
        ) == 2

    def test_na_literal_treated_missing(self, tmp_path):
        rng = np.random.default_rng(8)
        n = 80
        x = np.column_stack([rng.uniform(0, 2, n), rng.standard_normal(n)])
        y = 1 + x[:, 0] + rng.standard_normal(n)
        cells = [repr(float(v)) if i % 3 else "NA" for i, v in enumerate(y)]
        path = tmp_path / "na.csv"
        write_input_csv(path, x, cells)
        out = tmp_path / "est3"
        assert run_cli("estimate", "--input", path, "--outcome", "y", "--roster", "CC", "--out", out) == 0
        got = float(read_csv(out / "estimates.csv")[0]["estimate"])
        kept = [float(c) for c in cells if c != "NA"]
        assert got == pytest.approx(float(np.mean(kept)))


class TestPm3Workflow:
    def test_pm3_missingness_apsg_cv_recovers_full_mean(self, tmp_path):
        # Synthetic table with known full-data mean, artificial PM3
        # missingness, gamma chosen by CV: the robust estimate must land
        # within 2 standard errors of the full-data mean.
        from drcalib.simulate import apply_pm34

        rng = np.random.default_rng(61)
        n = 1200
        base = rng.standard_normal((n, 3))
        x = np.column_stack([600 + 80 * base[:, 0], 50 - 20 * base[:, 1], 20 + 10 * base[:, 2]])
        y = 0.8 * x[:, 0] + 0.5 * x[:, 1] + 10 * rng.standard_normal(n)
        delta = apply_pm34(x, "PM3", seed=62)
        path = tmp_path / "pm3.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1", "x2", "x3", "y"])
            for row, yi, di in zip(x, y, delta):
                w.writerow([repr(float(v)) for v in row] + [repr(float(yi)) if di else "NA"])
        out = tmp_path / "est_pm3"
        code = run_cli(
            "estimate", "--input", path, "--outcome", "y", "--roster", "APSg",
            "--cv-grid", "0.1,0.3,0.5,0.7,1.0", "--folds", "5", "--seed", "63",
            "--out", out,
        )
        assert code == 0
        row = read_csv(out / "estimates.csv")[0]
        est, var = float(row["estimate"]), float(row["variance"])
        assert float(row["gamma_used"]) in (0.1, 0.3, 0.5, 0.7, 1.0)
        assert abs(est - y.mean()) <= 2 * np.sqrt(var)


class TestCvGammaCommand:
    def test_single_grid_value(self, mar_csv, tmp_path, capsys):
        out = tmp_path / "cv"
        code = run_cli(
            "cv-gamma", "--input", mar_csv, "--outcome", "y",
            "--grid", "0.5", "--folds", "3", "--seed", "2", "--out", out,
        )
        assert code == 0
        rows = read_csv(out / "mspe.csv")
        assert len(rows) == 1 and rows[0]["gamma"] == "0.5"
        assert "selected_gamma=0.5" in (out / "metadata.txt").read_text()
        assert "selected_gamma=0.5" in capsys.readouterr().out

    def test_profile_rows_match_grid(self, mar_csv, tmp_path):
        out = tmp_path / "cv2"
        assert run_cli(
            "cv-gamma", "--input", mar_csv, "--outcome", "y",
            "--grid", "0.2,0.5,0.8", "--folds", "3", "--out", out,
        ) == 0
        rows = read_csv(out / "mspe.csv")
        assert [r["gamma"] for r in rows] == ["0.2", "0.5", "0.8"]
        assert all(float(r["mspe"]) > 0 for r in rows)
