import csv
import json
from datetime import datetime, timedelta, timezone

import pytest
from conftest import jira_issue

from storypoint.cli import main
from storypoint.corpus import (
    IssueRecord,
    dataset_stats,
    load_bundled_corpus,
    read_corpus,
    write_corpus,
)


def run(*argv):
    return main([str(a) for a in argv])


def make_corpus(path, n=10, bad_points=0):
    t0 = datetime(2021, 1, 1, tzinfo=timezone.utc)
    records = [
        IssueRecord(project="P", issue_key=f"P-{i}", created_at=t0 + timedelta(days=i),
                    title=f"issue number {i} with words", description="some text",
                    story_points=float(1 + i % 5))
        for i in range(n)
    ]
    for i in range(bad_points):
        records.append(
            IssueRecord(project="P", issue_key=f"P-bad{i}", created_at=t0,
                        title="broken", story_points=0.0)
        )
    write_corpus(records, path)
    return records


@pytest.fixture
def prepared(tmp_path):
    corpus_path = tmp_path / "corpus.jsonl"
    write_corpus(load_bundled_corpus(), corpus_path)
    out = tmp_path / "out"
    assert run("prepare", "--in", corpus_path, "--out-dir", out,
               "--min-project-size", 0) == 0
    return out


class TestPrepare:
    def test_split_manifest_six_two_two(self, tmp_path, capsys):
        corpus_path = tmp_path / "ten.jsonl"
        make_corpus(corpus_path, n=10)
        assert run("prepare", "--in", corpus_path, "--out-dir", tmp_path / "o",
                   "--min-project-size", 0) == 0
        report = json.loads((tmp_path / "o" / "stats.json").read_text())
        assert report["split"] == {"train": 6, "valid": 2, "test": 2}
        assert len(read_corpus(tmp_path / "o" / "train.jsonl")) == 6

    def test_removed_issue_reported(self, tmp_path):
        corpus_path = tmp_path / "bad.jsonl"
        make_corpus(corpus_path, n=10, bad_points=1)
        assert run("prepare", "--in", corpus_path, "--out-dir", tmp_path / "o",
                   "--min-project-size", 0) == 0
        report = json.loads((tmp_path / "o" / "stats.json").read_text())
        assert report["removed"] == 1
        assert report["removed_fraction"] == pytest.approx(1 / 11, abs=1e-6)

    def test_stats_block_matches_dataset_stats(self, tmp_path):
        corpus_path = tmp_path / "c.jsonl"
        records = make_corpus(corpus_path, n=12)
        assert run("prepare", "--in", corpus_path, "--out-dir", tmp_path / "o",
                   "--min-project-size", 0) == 0
        report = json.loads((tmp_path / "o" / "stats.json").read_text())
        assert report["story_points"] == dataset_stats(records)

    def test_vocab_is_reusable(self, prepared):
        from storypoint.corpus import load_vocabulary

        vocab = load_vocabulary(prepared / "vocab.txt")
        assert "easy" in vocab.index


class TestIngestCli:
    def test_missing_base_url_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run("ingest", "--jql", "x", "--sp-field", "f", "--out", "o.jsonl")
        assert exc.value.code == 2

    def test_mock_server_seventy_records(self, mock_jira, tmp_path):
        mock_jira.script["issues"] = [jira_issue(f"ME-{i}") for i in range(70)]
        out = tmp_path / "fetched.jsonl"
        url = f"http://127.0.0.1:{mock_jira.server_address[1]}"
        assert run("ingest", "--base-url", url, "--jql", "project = ME",
                   "--sp-field", "customfield_10002", "--out", out,
                   "--rate-limit", 1e6) == 0
        assert len(read_corpus(out)) == 70

    def test_max_issues_cap(self, mock_jira, tmp_path):
        mock_jira.script["issues"] = [jira_issue(f"ME-{i}") for i in range(30)]
        out = tmp_path / "capped.jsonl"
        url = f"http://127.0.0.1:{mock_jira.server_address[1]}"
        assert run("ingest", "--base-url", url, "--jql", "q",
                   "--sp-field", "customfield_10002", "--out", out,
                   "--max-issues", 10, "--rate-limit", 1e6) == 0
        assert len(read_corpus(out)) <= 10

    def test_auth_error_exits_1(self, mock_jira, tmp_path, capsys):
        mock_jira.script["status"] = 403
        url = f"http://127.0.0.1:{mock_jira.server_address[1]}"
        assert run("ingest", "--base-url", url, "--jql", "q",
                   "--sp-field", "f", "--out", tmp_path / "x.jsonl",
                   "--rate-limit", 1e6) == 1
        assert "auth/query error" in capsys.readouterr().err


class TestTrainCli:
    def test_train_twice_identical_artifacts(self, prepared, tmp_path):
        dirs = [tmp_path / "run1", tmp_path / "run2"]
        for d in dirs:
            assert run("train", "--split-dir", prepared, "--out-dir", d,
                       "--dim", 8, "--depth", 2, "--epochs", 5,
                       "--batch-size", 16, "--seed", 7) == 0
        assert (dirs[0] / "model.ckpt").read_bytes() == (dirs[1] / "model.ckpt").read_bytes()
        assert (dirs[0] / "train_log.csv").read_text() == (dirs[1] / "train_log.csv").read_text()

    def test_estimate_roundtrip(self, prepared, tmp_path):
        model_dir = tmp_path / "model"
        assert run("train", "--split-dir", prepared, "--out-dir", model_dir,
                   "--dim", 8, "--depth", 2, "--epochs", 5, "--batch-size", 16) == 0
        out = tmp_path / "est.csv"
        assert run("estimate", "--checkpoint", model_dir / "model.ckpt",
                   "--vocab", prepared / "vocab.txt",
                   "--in", prepared / "test.jsonl", "--out", out) == 0
        with out.open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 13
        assert all(float(r["estimate"]) >= 0 for r in rows)

    def test_pretrain_then_train_handoff(self, prepared, tmp_path):
        pre_dir = tmp_path / "pre"
        assert run("pretrain", "--corpus", prepared / "train.jsonl",
                   "--vocab", prepared / "vocab.txt", "--out-dir", pre_dir,
                   "--dim", 8, "--depth", 2, "--epochs", 3,
                   "--batch-size", 16, "--nce-samples", 5) == 0
        log = (pre_dir / "pretrain_log.csv").read_text().splitlines()
        assert log[0] == "epoch,train_loss,valid_perplexity,best_perplexity"
        assert len(log) == 4
        model_dir = tmp_path / "model"
        assert run("train", "--split-dir", prepared, "--out-dir", model_dir,
                   "--dim", 8, "--depth", 2, "--epochs", 2, "--batch-size", 16,
                   "--pretrained", pre_dir / "pretrain.ckpt") == 0

    def test_pretrained_dim_mismatch_fails(self, prepared, tmp_path, capsys):
        pre_dir = tmp_path / "pre"
        assert run("pretrain", "--corpus", prepared / "train.jsonl",
                   "--vocab", prepared / "vocab.txt", "--out-dir", pre_dir,
                   "--dim", 6, "--depth", 2, "--epochs", 1,
                   "--batch-size", 16, "--nce-samples", 5) == 0
        assert run("train", "--split-dir", prepared, "--out-dir", tmp_path / "m",
                   "--dim", 8, "--depth", 2, "--epochs", 1,
                   "--pretrained", pre_dir / "pretrain.ckpt") == 1
        assert "error" in capsys.readouterr().err


class TestBaselineCli:
    def test_unknown_model_exits_2(self, prepared, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("baseline", "--model", "oracle", "--split-dir", prepared,
                "--in", prepared / "test.jsonl", "--out", tmp_path / "x.csv")
        assert exc.value.code == 2

    def test_mean_then_evaluate_row(self, prepared, tmp_path, capsys):
        est = tmp_path / "mean.csv"
        assert run("baseline", "--model", "mean", "--split-dir", prepared,
                   "--in", prepared / "test.jsonl", "--out", est) == 0
        assert run("evaluate", "--split-dir", prepared,
                   "--estimates", f"mean={est}") == 0
        table = capsys.readouterr().out
        assert "mean" in table and "MAE" in table and "SA" in table

    def test_random_uses_seed(self, prepared, tmp_path):
        outs = []
        for name in ("a.csv", "b.csv"):
            out = tmp_path / name
            assert run("baseline", "--model", "random", "--split-dir", prepared,
                       "--in", prepared / "test.jsonl", "--out", out,
                       "--seed", 5) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_feature_models_need_features(self, prepared, tmp_path, capsys):
        assert run("baseline", "--model", "cart", "--split-dir", prepared,
                   "--in", prepared / "test.jsonl", "--out", tmp_path / "x.csv") == 1
        assert "--features" in capsys.readouterr().err

    def test_lstm_rf_needs_checkpoint(self, prepared, tmp_path, capsys):
        assert run("baseline", "--model", "lstm-rf", "--split-dir", prepared,
                   "--in", prepared / "test.jsonl", "--out", tmp_path / "x.csv") == 1
        assert "--checkpoint" in capsys.readouterr().err

    def test_feature_baseline_pipeline(self, prepared, tmp_path):
        features = tmp_path / "features.csv"
        with features.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["issue_key", "issue_type", "n_subtasks", "assignee_tested"])
            for name in ("train", "valid", "test"):
                for r in read_corpus(prepared / f"{name}.jsonl"):
                    easy = r.story_points == 1.0
                    writer.writerow([r.issue_key, "Task" if easy else "Epic",
                                     0 if easy else 4, ""])
        for model in ("cbr", "cart", "ols", "lasso"):
            out = tmp_path / f"{model}.csv"
            assert run("baseline", "--model", model, "--split-dir", prepared,
                       "--in", prepared / "test.jsonl", "--out", out,
                       "--features", features) == 0
            with out.open() as fh:
                assert len(list(csv.DictReader(fh))) == 13


class TestEvaluateCli:
    def test_pairwise_and_csv_output(self, prepared, tmp_path, capsys):
        est_mean = tmp_path / "mean.csv"
        est_median = tmp_path / "median.csv"
        run("baseline", "--model", "mean", "--split-dir", prepared,
            "--in", prepared / "test.jsonl", "--out", est_mean)
        run("baseline", "--model", "median", "--split-dir", prepared,
            "--in", prepared / "test.jsonl", "--out", est_median)
        report = tmp_path / "report.csv"
        assert run("evaluate", "--split-dir", prepared,
                   "--estimates", f"mean={est_mean}", f"median={est_median}",
                   "--pairs", "mean:median", "--out", report) == 0
        out = capsys.readouterr().out
        assert "mean vs median: p=" in out
        with report.open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["model", "mae", "sa", "mre", "pred", "n"]
        assert len(rows) == 4  # header, two models, one pair

    def test_incomplete_estimates_fail(self, prepared, tmp_path, capsys):
        bad = tmp_path / "partial.csv"
        bad.write_text("issue_key,estimate\nSYN-52,3.0\n")
        assert run("evaluate", "--split-dir", prepared,
                   "--estimates", f"bad={bad}") == 1
        assert "lacks estimates" in capsys.readouterr().err


class TestCrossProjectCli:
    def test_writes_errors_and_estimates(self, tmp_path):
        records = load_bundled_corpus()
        for name, chunk in (("a", records[:32]), ("b", records[32:])):
            corpus_path = tmp_path / f"{name}.jsonl"
            write_corpus(chunk, corpus_path)
            assert run("prepare", "--in", corpus_path, "--out-dir", tmp_path / name,
                       "--min-project-size", 0) == 0
        out = tmp_path / "cross"
        assert run("cross-project", "--source-dir", tmp_path / "a",
                   "--target-dir", tmp_path / "b", "--out-dir", out,
                   "--dim", 8, "--depth", 2, "--epochs", 5, "--batch-size", 16) == 0
        with (out / "abs_errors.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 7  # 32-issue split leaves 7 test issues
        assert all(float(r["abs_error"]) >= 0 for r in rows)


class TestClusterWordsCli:
    def test_cluster_file_shape(self, prepared, tmp_path):
        pre_dir = tmp_path / "pre"
        assert run("pretrain", "--corpus", prepared / "train.jsonl",
                   "--vocab", prepared / "vocab.txt", "--out-dir", pre_dir,
                   "--dim", 8, "--depth", 2, "--epochs", 1,
                   "--batch-size", 16, "--nce-samples", 5) == 0
        out = tmp_path / "clusters.txt"
        assert run("cluster-words", "--checkpoint", pre_dir / "pretrain.ckpt",
                   "--vocab", prepared / "vocab.txt", "--top", 15, "--k", 3,
                   "--out", out) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 15
        clusters = {int(line.split("\t")[1]) for line in lines}
        assert clusters <= {0, 1, 2}


class TestTestSetIsolation:
    def test_train_and_baseline_never_open_test_manifest(self, prepared, tmp_path):
        hidden = prepared / "test.jsonl"
        stash = hidden.read_bytes()
        hidden.unlink()
        try:
            assert run("train", "--split-dir", prepared, "--out-dir", tmp_path / "m",
                       "--dim", 6, "--depth", 2, "--epochs", 2, "--batch-size", 16) == 0
            assert run("baseline", "--model", "mean", "--split-dir", prepared,
                       "--in", prepared / "valid.jsonl",
                       "--out", tmp_path / "v.csv") == 0
        finally:
            hidden.write_bytes(stash)


class TestFullPipelineSmoke:
    def test_bundled_corpus_end_to_end_under_five_minutes(self, tmp_path):
        import time

        start = time.monotonic()
        corpus_path = tmp_path / "corpus.jsonl"
        write_corpus(load_bundled_corpus(), corpus_path)
        split = tmp_path / "split"
        out = tmp_path / "artifacts"
        assert run("prepare", "--in", corpus_path, "--out-dir", split,
                   "--min-project-size", 0) == 0
        assert run("pretrain", "--corpus", split / "train.jsonl",
                   "--vocab", split / "vocab.txt", "--out-dir", out,
                   "--dim", 10, "--depth", 2, "--epochs", 5, "--batch-size", 16,
                   "--nce-samples", 5) == 0
        assert run("train", "--split-dir", split, "--out-dir", out,
                   "--dim", 10, "--depth", 2, "--epochs", 60, "--batch-size", 16,
                   "--patience", 60, "--pretrained", out / "pretrain.ckpt") == 0
        assert run("estimate", "--checkpoint", out / "model.ckpt",
                   "--vocab", split / "vocab.txt", "--in", split / "test.jsonl",
                   "--out", out / "net.csv") == 0
        for model in ("mean", "median", "random"):
            assert run("baseline", "--model", model, "--split-dir", split,
                       "--in", split / "test.jsonl",
                       "--out", out / f"{model}.csv") == 0
        assert run("baseline", "--model", "lstm-rf", "--split-dir", split,
                   "--in", split / "test.jsonl", "--out", out / "lstmrf.csv",
                   "--checkpoint", out / "pretrain.ckpt") == 0
        assert run("baseline", "--model", "bow-rf", "--split-dir", split,
                   "--in", split / "test.jsonl", "--out", out / "bowrf.csv") == 0
        assert run("evaluate", "--split-dir", split, "--estimates",
                   f"net={out / 'net.csv'}", f"mean={out / 'mean.csv'}",
                   f"median={out / 'median.csv'}", f"random={out / 'random.csv'}",
                   f"lstm-rf={out / 'lstmrf.csv'}", f"bow-rf={out / 'bowrf.csv'}",
                   "--pairs", "net:mean,net:median,net:random",
                   "--out", out / "report.csv") == 0
        assert run("cluster-words", "--checkpoint", out / "pretrain.ckpt",
                   "--vocab", split / "vocab.txt", "--top", 20, "--k", 4,
                   "--out", out / "clusters.txt") == 0
        assert time.monotonic() - start < 300


class TestConfigFile:
    def test_config_supplies_defaults_and_flags_override(self, prepared, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"dim": 6, "depth": 2, "epochs": 2,
                                      "batch-size": 16, "seed": 3}))
        d1 = tmp_path / "from-config"
        assert run("--config", config, "train", "--split-dir", prepared,
                   "--out-dir", d1) == 0
        from storypoint.model import load_checkpoint

        assert load_checkpoint(d1 / "model.ckpt").config.embedding_dim == 6
        d2 = tmp_path / "flag-wins"
        assert run("--config", config, "train", "--split-dir", prepared,
                   "--out-dir", d2, "--dim", 7) == 0
        assert load_checkpoint(d2 / "model.ckpt").config.embedding_dim == 7

    def test_bad_config_file_exits_2(self, tmp_path):
        config = tmp_path / "broken.json"
        config.write_text("{not json")
        with pytest.raises(SystemExit) as exc:
            run("--config", config, "prepare", "--in", "x", "--out-dir", "y")
        assert exc.value.code == 2
