import numpy as np
import pytest

from uplrec import cli
from uplrec import experiment as exp
from uplrec.datasets import load_dataset
from uplrec.factor_model import load_checkpoint

from conftest import write_synthetic_triplets


@pytest.fixture(scope="module")
def triplet_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("rawdata")
    write_synthetic_triplets(root, seed=7)
    return root


def small_config_text(dataset, out, methods="bpr", runs=2, seed=11):
    return (
        f"dataset = {dataset}\n"
        "format = triplets\n"
        f"methods = {methods}\n"
        f"runs = {runs}\n"
        f"seed = {seed}\n"
        "d_grid = 8\n"
        "lambda_grid = 1e-5\n"
        "clip_grid = 0\n"
        "max_epochs = 12\n"
        "patience = 3\n"
        "batch_size = 64\n"
        f"out = {out}\n"
    )


class TestConfigParsing:
    def test_round_trip_defaults(self, tmp_path, triplet_files):
        cfg_path = tmp_path / "exp.cfg"
        cfg_path.write_text(small_config_text(triplet_files, tmp_path / "out"))
        config = exp.parse_config_file(cfg_path)
        assert config.methods == ("bpr",)
        assert config.runs == 2
        assert config.d_grid == (8,)
        assert config.ks == (3, 5, 8)  # default preserved

    def test_unknown_key_rejected(self, tmp_path):
        cfg_path = tmp_path / "exp.cfg"
        cfg_path.write_text("dataset = x\nnot_a_key = 3\n")
        with pytest.raises(ValueError, match="not_a_key"):
            exp.parse_config_file(cfg_path)

    def test_malformed_line_rejected(self, tmp_path):
        cfg_path = tmp_path / "exp.cfg"
        cfg_path.write_text("dataset\n")
        with pytest.raises(ValueError, match="key=value"):
            exp.parse_config_file(cfg_path)

    def test_comments_and_overrides(self, tmp_path, triplet_files):
        cfg_path = tmp_path / "exp.cfg"
        cfg_path.write_text("# comment\n" + small_config_text(triplet_files, "o"))
        config = exp.parse_config_file(cfg_path, overrides={"runs": "5"})
        assert config.runs == 5

    def test_hash_depends_on_values(self, triplet_files, tmp_path):
        cfg_path = tmp_path / "exp.cfg"
        cfg_path.write_text(small_config_text(triplet_files, "o", runs=2))
        a = exp.parse_config_file(cfg_path).hash()
        cfg_path.write_text(small_config_text(triplet_files, "o", runs=3))
        b = exp.parse_config_file(cfg_path).hash()
        assert a != b

    def test_invalid_method_token(self, tmp_path):
        cfg_path = tmp_path / "exp.cfg"
        cfg_path.write_text("methods = bpr,expomf\n")
        with pytest.raises(ValueError, match="expomf"):
            exp.parse_config_file(cfg_path)


class TestPrepareCli:
    def test_prepare_writes_splits(self, triplet_files, tmp_path):
        out = tmp_path / "prepared"
        rc = cli.main([
            "prepare", "--dataset", str(triplet_files), "--format", "triplets",
            "--seed", "3", "--out", str(out),
        ])
        assert rc == 0
        train = load_dataset(out / "train")
        val = load_dataset(out / "validation")
        test = load_dataset(out / "test")
        assert len(val) == int(0.1 * (len(train) + len(val)))
        assert train.epsilon == 0.1 and test.epsilon == 0.0
        assert (out / "user_map.tsv").exists()

    def test_prepare_deterministic(self, triplet_files, tmp_path):
        out1, out2 = tmp_path / "p1", tmp_path / "p2"
        for out in (out1, out2):
            cli.main(["prepare", "--dataset", str(triplet_files), "--format",
                      "triplets", "--seed", "3", "--out", str(out)])
        for sub in ("train", "validation", "test"):
            a = (out1 / sub / "exposed.tsv").read_bytes()
            b = (out2 / sub / "exposed.tsv").read_bytes()
            assert a == b


class TestTrainCli:
    def test_single_run_outputs(self, triplet_files, tmp_path):
        prep = tmp_path / "prep"
        cli.main(["prepare", "--dataset", str(triplet_files), "--format",
                  "triplets", "--seed", "3", "--out", str(prep)])
        out = tmp_path / "run"
        rc = cli.main([
            "train", "--data", str(prep), "--method", "upl", "--d", "8",
            "--lam", "1e-5", "--max-epochs", "6", "--seed", "1",
            "--out", str(out),
        ])
        assert rc == 0
        model, seed = load_checkpoint(out / "model.ckpt")
        assert seed == 1 and model.d == 8
        lines = (out / "metrics.tsv").read_text().strip().splitlines()
        assert lines[0] == "method\trun\tcohort\tmetric\tk\tvalue"
        assert len(lines) > 1
        assert (out / "train.log").read_text().startswith("epoch=0\t")


@pytest.fixture(scope="module")
def experiment_out(triplet_files, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("exp")
    cfg_path = tmp / "exp.cfg"
    out = tmp / "out"
    cfg_path.write_text(small_config_text(triplet_files, out,
                                          methods="bpr,ubpr_nclip", runs=2))
    rc = cli.main(["experiment", "--config", str(cfg_path)])
    assert rc == 0
    return out


class TestExperimentRun:
    def test_per_run_cardinality(self, experiment_out):
        rows = exp.read_per_run(experiment_out / "per_run_metrics.tsv")
        bpr_rows = [r for r in rows if r[0] == "bpr"]
        cohorts = {r[2] for r in bpr_rows}
        # 2 runs x |cohorts| x 3 metrics x 3 Ks
        assert len(bpr_rows) == 2 * len(cohorts) * 3 * 3
        assert {r[1] for r in bpr_rows} == {0, 1}

    def test_aggregate_means_match_per_run_rows(self, experiment_out):
        rows = exp.read_per_run(experiment_out / "per_run_metrics.tsv")
        means = {}
        for method, run, cohort, metric, k, value in rows:
            means.setdefault((method, cohort, metric, k), []).append(value)
        agg_lines = (experiment_out / "aggregate.tsv").read_text().strip().splitlines()
        checked = 0
        for line in agg_lines:
            if line.startswith("#") or line.startswith("method\t"):
                continue
            method, cohort, metric, k, mean, std, n = line.split("\t")
            key = (method, cohort, metric, int(k))
            assert float(mean) == pytest.approx(np.mean(means[key]), abs=1e-15)
            assert int(n) == len(means[key])
            checked += 1
        assert checked == len(means)

    def test_significance_table_has_pairs(self, experiment_out):
        lines = (experiment_out / "significance.tsv").read_text().strip().splitlines()
        body = [l for l in lines if not l.startswith(("#", "cohort\t"))]
        assert body
        for line in body:
            cohort, metric, k, method, best, p = line.split("\t")
            assert method != best
            assert 0.0 <= float(p) <= 1.0

    def test_grid_and_logs_present(self, experiment_out):
        assert (experiment_out / "grid_search.tsv").exists()
        assert (experiment_out / "logs" / "bpr_run000.log").exists()
        assert (experiment_out / "propensities" / "theta_click.tsv").exists()

    def test_report_reaggregation_idempotent(self, experiment_out):
        before = (experiment_out / "aggregate.tsv").read_bytes()
        tables_before = (experiment_out / "tables.md").read_bytes()
        rc = cli.main(["report", "--out", str(experiment_out)])
        assert rc == 0
        assert (experiment_out / "aggregate.tsv").read_bytes() == before
        assert (experiment_out / "tables.md").read_bytes() == tables_before


class TestExperimentFailureIsolation:
    def test_failing_method_recorded_others_continue(self, triplet_files, tmp_path,
                                                     monkeypatch):
        cfg_path = tmp_path / "exp.cfg"
        out = tmp_path / "out"
        cfg_path.write_text(small_config_text(triplet_files, out,
                                              methods="bpr,upl", runs=1))
        config = exp.parse_config_file(cfg_path)

        real = exp.train_method

        def flaky(token, *args, **kwargs):
            if token == "upl":
                raise RuntimeError("synthetic failure")
            return real(token, *args, **kwargs)

        monkeypatch.setattr(exp, "train_method", flaky)
        exp.run_experiment(config)
        failures = (out / "failures.tsv").read_text()
        assert "upl\tRuntimeError" in failures
        rows = exp.read_per_run(out / "per_run_metrics.tsv")
        assert {r[0] for r in rows} == {"bpr"}


class TestVerifyCli:
    def test_bundled_suite_passes(self, capsys):
        rc = cli.main(["verify", "--samples", "10000"])
        out = capsys.readouterr().out
        assert rc == 0
        assert out.count("PASS") == 5
        assert "FAIL" not in out

    def test_world_file_exact(self, tmp_path, capsys):
        from uplrec.oracle import random_world, write_world_spec
        path = tmp_path / "w.txt"
        write_world_spec(random_world(1, 4, seed=3), path)
        rc = cli.main(["verify", "--world", str(path), "--exact-only"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "ideal risk" in out and "upl" in out

    def test_world_too_large_for_exact(self, tmp_path):
        from uplrec.errors import EnumerationBoundError
        from uplrec.oracle import random_world, write_world_spec
        path = tmp_path / "w.txt"
        write_world_spec(random_world(1, 11, seed=3), path)
        with pytest.raises(EnumerationBoundError):
            cli.main(["verify", "--world", str(path), "--exact-only"])

    def test_zero_samples_is_argument_error(self):
        assert cli.main(["verify", "--samples", "0"]) == 2


class TestGridFile:
    def test_grid_file_overrides(self, triplet_files, tmp_path):
        cfg_path = tmp_path / "exp.cfg"
        out = tmp_path / "out"
        cfg_path.write_text(small_config_text(triplet_files, out, runs=1))
        grid_path = tmp_path / "grid.cfg"
        grid_path.write_text("d_grid = 4,6\nlambda_grid = 1e-4\nclip_grid = 0\n")
        rc = cli.main(["experiment", "--config", str(cfg_path),
                       "--grid-file", str(grid_path)])
        assert rc == 0
        grid_lines = (out / "grid_search.tsv").read_text().strip().splitlines()
        body = [l for l in grid_lines if not l.startswith(("#", "method\t"))]
        assert len(body) == 2  # two d values x one lambda
        assert {l.split("\t")[1] for l in body} == {"4", "6"}
