"""End-to-end tests of the command-line surface via click's test runner."""

import json
import math

import pytest
from click.testing import CliRunner

from nqs import NqsParams, RunConfig
from nqs.allocator import ConstraintSet, GridSpec, constrained_search, nqs_model
from nqs.chinchilla import ChinParams, chin_loss
from nqs.cli import main, parse_flops
from nqs.core import nqs_loss
from nqs.data import ScalingDataset, ScalingRecord, load_dataset
from nqs.fitting import FitConfig, fit_nqs
from nqs.report import load_params, load_report
from nqs.simulator import DatasetDesign, generate_synthetic_dataset

THETA = NqsParams(p=1.3, P=20.0, q=1.1, Q=0.8, r=1.2, R=4.0, e_irr=1.2)
PHI = ChinParams(p=1.4, P=7.39, q=1.2, Q=20.1, e_irr=1.7)
FIT_FLAGS = ["--inits", "6", "--iters", "120", "--seed", "0"]


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def iso_csv(tmp_path_factory):
    design = DatasetDesign(kind="isoflops", levels=3, models_per_level=6, train_levels=3)
    ds = generate_synthetic_dataset(THETA, design)
    path = tmp_path_factory.mktemp("data") / "iso.csv"
    ds.save_csv(str(path))
    return str(path)


@pytest.fixture(scope="module")
def chin_csv(tmp_path_factory):
    records = []
    for n in (1e5, 1e6, 1e7, 1e8):
        for d in (1e8, 1e9, 1e10):
            records.append(ScalingRecord(
                n_params=int(n), batch=1, steps=int(d), seq_len=1,
                loss=chin_loss(PHI, n, d),
            ))
    path = tmp_path_factory.mktemp("data") / "chin.csv"
    ScalingDataset(tuple(records)).save_csv(str(path))
    return str(path)


@pytest.fixture(scope="module")
def fit_report(runner, iso_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("rep") / "fit.json"
    res = runner.invoke(main, ["fit", "--data", iso_csv, "--out", str(out)] + FIT_FLAGS)
    assert res.exit_code == 0, res.output
    return str(out)


def test_version(runner):
    res = runner.invoke(main, ["--version"])
    assert res.exit_code == 0
    assert "nqs" in res.output


class TestParseFlops:
    def test_petaflop_suffix(self):
        assert parse_flops("2.36PF") == 2.36e15
        assert parse_flops(" 5pf ") == 5e15

    def test_plain_number(self):
        assert parse_flops("1e13") == 1e13
        assert parse_flops("42") == 42.0

    def test_garbage_rejected(self):
        with pytest.raises(ValueError):
            parse_flops("fast")


class TestFit:
    def test_writes_versioned_report(self, runner, iso_csv, fit_report):
        doc = load_report(fit_report)
        assert doc["kind"] == "nqs_fit"
        assert doc["version"] == 1
        assert doc["config"]["n_inits"] == 6
        assert set(doc["theta"]) == set(NqsParams.FIELDS)

    def test_matches_in_process_fit(self, iso_csv, fit_report):
        rep = fit_nqs(load_dataset(iso_csv), FitConfig(n_inits=6, n_iters=120, seed=0))
        doc = load_report(fit_report)
        assert doc["theta"] == {k: getattr(rep.theta, k) for k in NqsParams.FIELDS}
        assert doc["objective"] == rep.objective

    def test_deterministic_byte_identical(self, runner, iso_csv, tmp_path):
        paths = [str(tmp_path / f"r{i}.json") for i in range(2)]
        for p in paths:
            res = runner.invoke(main, ["fit", "--data", iso_csv, "--out", p] + FIT_FLAGS)
            assert res.exit_code == 0, res.output
        a, b = (open(p, "rb").read() for p in paths)
        assert a == b

    def test_config_file_fills_unset_flags(self, runner, iso_csv, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n_inits": 4, "lr": 0.02}))
        out = tmp_path / "r.json"
        res = runner.invoke(main, [
            "fit", "--data", iso_csv, "--out", str(out), "--config", str(cfg),
            "--iters", "60",
        ])
        assert res.exit_code == 0, res.output
        doc = load_report(str(out))
        assert doc["config"]["n_inits"] == 4
        assert doc["config"]["lr"] == 0.02

    def test_explicit_flag_beats_config_file(self, runner, iso_csv, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n_inits": 4}))
        out = tmp_path / "r.json"
        res = runner.invoke(main, [
            "fit", "--data", iso_csv, "--out", str(out), "--config", str(cfg),
            "--inits", "12", "--iters", "60",
        ])
        assert res.exit_code == 0, res.output
        assert load_report(str(out))["config"]["n_inits"] == 12

    def test_unknown_config_field_rejected(self, runner, iso_csv, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"bogus": 1}))
        res = runner.invoke(main, [
            "fit", "--data", iso_csv, "--out", str(tmp_path / "r.json"),
            "--config", str(cfg),
        ])
        assert res.exit_code == 1
        assert "error: unknown config field 'bogus'" in res.stderr

    def test_s_selection_records_grid_curve(self, runner, iso_csv, tmp_path):
        out = tmp_path / "r.json"
        res = runner.invoke(main, [
            "fit", "--data", iso_csv, "--out", str(out),
            "--small-batch-data", iso_csv, "--s-grid", "0.01,0.02",
        ] + FIT_FLAGS)
        assert res.exit_code == 0, res.output
        doc = load_report(str(out))
        assert doc["selected_s"] in (0.01, 0.02)
        assert [s for s, _ in doc["s_curve"]] == [0.01, 0.02]

    def test_bad_dataset_gives_one_error_line(self, runner, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("n_params,batch,steps\n100,4,10\n")
        res = runner.invoke(main, ["fit", "--data", str(bad), "--out", str(tmp_path / "r.json")])
        assert res.exit_code == 1
        lines = [l for l in res.stderr.splitlines() if l]
        assert len(lines) == 1
        assert lines[0].startswith("error: dataset is missing required column")


class TestPredict:
    def test_round_trip_is_bit_exact(self, runner, iso_csv, fit_report):
        rec = load_dataset(iso_csv)[0]
        params = load_params(fit_report)
        res = runner.invoke(main, [
            "predict", "--report", fit_report, "--n", str(rec.n_params),
            "--batch", str(rec.batch), "--steps", str(rec.steps),
            "--seq-len", str(rec.seq_len),
        ])
        assert res.exit_code == 0, res.output
        assert float(res.output.strip()) == nqs_loss(params, rec.run)

    def test_use_s_needs_selected_s(self, runner, fit_report):
        res = runner.invoke(main, [
            "predict", "--report", fit_report, "--n", "100", "--batch", "4",
            "--steps", "10", "--use-s",
        ])
        assert res.exit_code == 1
        assert "selected s" in res.stderr


class TestAllocate:
    GRID_FLAGS = [
        "--n-lo", "100", "--n-hi", "10000", "--b-lo", "1", "--b-hi", "16",
        "--k-lo", "10", "--k-hi", "1000", "--points-per-decade", "4",
    ]

    def test_matches_library_search(self, runner, fit_report):
        res = runner.invoke(main, [
            "allocate", "--report", fit_report, "--compute-max", "1e9",
            "--memory-max", "1e6",
        ] + self.GRID_FLAGS)
        assert res.exit_code == 0, res.output
        header, row = [l.split(",") for l in res.output.strip().splitlines()]
        assert header == ["n_params", "batch", "steps", "seq_len", "loss", "n_feasible"]
        want = constrained_search(
            nqs_model(load_params(fit_report)),
            ConstraintSet(compute_max=1e9, memory_max=1e6),
            GridSpec((100, 10000), (1, 16), (10, 1000), points_per_decade=4),
        )
        assert [int(row[0]), int(row[1]), int(row[2])] == [
            want.config.n_params, want.config.batch, want.config.steps]
        assert float(row[4]) == want.loss
        assert int(row[5]) == want.n_feasible

    def test_infeasible_names_binding_constraint(self, runner, fit_report):
        res = runner.invoke(main, [
            "allocate", "--report", fit_report, "--compute-max", "1",
        ] + self.GRID_FLAGS)
        assert res.exit_code == 1
        assert res.stderr.startswith("error: no feasible grid point")
        assert "compute" in res.stderr

    def test_petaflop_budget_accepted(self, runner, fit_report, tmp_path):
        out = tmp_path / "alloc.csv"
        res = runner.invoke(main, [
            "allocate", "--report", fit_report, "--compute-max", "1e-9PF",
            "--out", str(out),
        ] + self.GRID_FLAGS)
        assert res.exit_code == 0, res.output
        assert out.read_text().count("\n") == 2


class TestIsoflop:
    def test_rows_sorted_and_match_direct_losses(self, runner, fit_report):
        res = runner.invoke(main, [
            "isoflop", "--report", fit_report, "--compute", "1e10",
            "--n-lo", "1e3", "--n-hi", "1e5", "--points-per-decade", "4",
            "--batch-rule", "fixed:8",
        ])
        assert res.exit_code == 0, res.output
        params = load_params(fit_report)
        lines = res.output.strip().splitlines()
        assert lines[0] == "n_params,batch,steps,loss"
        sizes = []
        for line in lines[1:]:
            n, b, k, loss = line.split(",")
            sizes.append(int(n))
            run = RunConfig(int(n), int(b), int(k), 1)
            assert float(loss) == nqs_loss(params, run)
            assert int(b) == 8
        assert sizes == sorted(sizes)

    def test_skipped_sizes_noted_on_stderr(self, runner, fit_report):
        res = runner.invoke(main, [
            "isoflop", "--report", fit_report, "--compute", "1e8",
            "--n-lo", "1e3", "--n-hi", "1e9", "--points-per-decade", "1",
            "--batch-rule", "fixed:64",
        ])
        assert res.exit_code == 0, res.output
        assert "skipped (no steps fit the budget)" in res.stderr
        assert "note: n_params=1000000000" in res.stderr


class TestSimulate:
    ARGS = ["--n", "6", "--batch", "2", "--steps", "16", "--trials", "200", "--seed", "3"]

    def test_deterministic_output(self, runner, fit_report):
        outs = []
        for _ in range(2):
            res = runner.invoke(main, ["simulate", "--report", fit_report] + self.ARGS)
            assert res.exit_code == 0, res.output
            outs.append(res.output)
        assert outs[0] == outs[1]
        header, row = [l.split(",") for l in outs[0].strip().splitlines()]
        assert header == ["loss_mean", "loss_stderr", "norm_mean", "norm_stderr", "trials"]
        assert int(row[4]) == 200
        assert float(row[0]) > 0

    def test_norm_feedback_path(self, runner, fit_report):
        res = runner.invoke(main, [
            "simulate", "--report", fit_report, "--s", "0.25",
        ] + self.ARGS)
        assert res.exit_code == 0, res.output


class TestGenerate:
    def test_isoflops_levels_span_4_pow_8(self, runner, tmp_path):
        out = tmp_path / "gen.csv"
        res = runner.invoke(main, [
            "generate", "--out", str(out), "--design", "isoflops",
            "--theta", "1.3,20,1.1,0.8,1.2,4,1.2", "--levels", "9",
        ])
        assert res.exit_code == 0, res.output
        ds = load_dataset(str(out))
        by_level = {}
        for rec in ds:
            level = next(int(t.split(":")[1]) for t in rec.tags if t.startswith("level:"))
            by_level.setdefault(level, []).append(rec.compute)
        assert sorted(by_level) == list(range(9))
        for level, computes in by_level.items():
            target = 1e13 * 4.0**level
            assert all(abs(c / target - 1.0) < 0.05 for c in computes)

    def test_deterministic_files(self, runner, tmp_path):
        paths = [tmp_path / f"g{i}.csv" for i in range(2)]
        for p in paths:
            res = runner.invoke(main, [
                "generate", "--out", str(p), "--design", "both",
                "--theta", "1.3,20,1.1,0.8,1.2,4,1.2", "--levels", "3",
                "--noise-sd", "0.05", "--seed", "7",
            ])
            assert res.exit_code == 0, res.output
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_theta_and_report_are_exclusive(self, runner, fit_report, tmp_path):
        res = runner.invoke(main, [
            "generate", "--out", str(tmp_path / "g.csv"),
            "--theta", "1.3,20,1.1,0.8,1.2,4,1.2", "--report", fit_report,
        ])
        assert res.exit_code == 1
        assert "exactly one of --theta or --report" in res.stderr

    def test_malformed_theta(self, runner, tmp_path):
        res = runner.invoke(main, [
            "generate", "--out", str(tmp_path / "g.csv"), "--theta", "1.3,20",
        ])
        assert res.exit_code == 1
        assert "7 comma-separated values" in res.stderr


class TestChinchillaCommand:
    def test_fit_and_optimal_split(self, runner, chin_csv, tmp_path):
        out = tmp_path / "chin.json"
        res = runner.invoke(main, [
            "baseline-chinchilla", "--data", chin_csv, "--out", str(out),
            "--inits", "40", "--iters", "300", "--optimal-for", "1PF",
        ])
        assert res.exit_code == 0, res.output
        doc = load_report(str(out))
        assert doc["kind"] == "chinchilla_fit"
        assert doc["optimal"]["compute"] == 1e15
        n_opt, d_opt = doc["optimal"]["n_params"], doc["optimal"]["tokens"]
        assert abs(6.0 * n_opt * d_opt / 1e15 - 1.0) < 1e-6

    def test_predict_from_chin_report(self, runner, chin_csv, tmp_path):
        out = tmp_path / "chin.json"
        res = runner.invoke(main, [
            "baseline-chinchilla", "--data", chin_csv, "--out", str(out),
            "--inits", "40", "--iters", "300",
        ])
        assert res.exit_code == 0, res.output
        params = load_params(str(out))
        res = runner.invoke(main, [
            "predict", "--report", str(out), "--n", "1000000", "--batch", "32",
            "--steps", "1000", "--seq-len", "128",
        ])
        assert res.exit_code == 0, res.output
        want = chin_loss(params, 1_000_000, 32 * 1000 * 128)
        assert float(res.output.strip()) == want

    def test_use_s_rejected_for_baseline(self, runner, chin_csv, tmp_path):
        out = tmp_path / "chin.json"
        runner.invoke(main, [
            "baseline-chinchilla", "--data", chin_csv, "--out", str(out),
            "--inits", "10", "--iters", "50",
        ])
        res = runner.invoke(main, [
            "predict", "--report", str(out), "--n", "100", "--batch", "1",
            "--steps", "10", "--use-s",
        ])
        assert res.exit_code == 1
        assert "main model" in res.stderr


class TestBootstrap:
    def test_interval_table(self, runner, iso_csv, tmp_path):
        queries = tmp_path / "q.csv"
        queries.write_text(
            "n_params,batch,steps,seq_len\n"
            "50000,64,1000,512\n200000,64,2000,512\n"
        )
        res = runner.invoke(main, [
            "bootstrap", "--data", iso_csv, "--queries", str(queries),
            "--trials", "3", "--inits", "8", "--iters", "150", "--seed", "1",
        ])
        assert res.exit_code == 0, res.output
        lines = res.output.strip().splitlines()
        assert lines[0] == "n_params,batch,steps,seq_len,lo,hi"
        assert len(lines) == 3
        for line in lines[1:]:
            lo, hi = (float(x) for x in line.split(",")[4:])
            assert math.isnan(lo) or lo <= hi

    def test_queries_missing_column(self, runner, iso_csv, tmp_path):
        queries = tmp_path / "q.csv"
        queries.write_text("n_params,batch\n100,4\n")
        res = runner.invoke(main, [
            "bootstrap", "--data", iso_csv, "--queries", str(queries),
        ])
        assert res.exit_code == 1
        assert "missing columns: steps" in res.stderr
