import json

import pytest
from click.testing import CliRunner

from memorykt.cli import cli

TINY_FLAGS = ["--embed-dim", "4", "--hidden-dim", "6", "--latent-dim", "3",
              "--forget-embed-dim", "3", "--epochs", "2", "--batch-size", "8", "--window", "10"]


def invoke(*args):
    result = CliRunner().invoke(cli, [str(a) for a in args], catch_exceptions=False)
    return result


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert invoke("synth", "--students", 30, "--concepts", 5, "--steps", 15, "--seed", 1,
                  "--out", out).exit_code == 0
    return out


@pytest.fixture(scope="module")
def run_dir(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    r = invoke("train", corpus / "interactions.csv", "--out", out, "--folds", 2, "--seed", 3,
               *TINY_FLAGS)
    assert r.exit_code == 0, r.output
    return out


class TestIngest:
    def test_manifest(self, corpus, tmp_path):
        r = invoke("ingest", corpus / "interactions.csv", "--out", tmp_path)
        assert r.exit_code == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["raw_students"] == 30 and manifest["num_concepts"] == 5

    def test_malformed_names_line(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("student_id,concept_id,correct,timestamp\na,0,1,5\na,0,yes,6\n")
        r = invoke("ingest", bad, "--out", tmp_path / "o")
        assert r.exit_code != 0
        assert "line 3" in r.output


class TestForgetScore:
    def test_outputs(self, corpus, tmp_path):
        r = invoke("forget-score", corpus / "interactions.csv", "--out", tmp_path,
                   "--ground-truth", corpus / "ground_truth.csv")
        assert r.exit_code == 0
        lines = (tmp_path / "forget_scores.csv").read_text().splitlines()
        assert lines[0] == "student_id,final_score,level" and len(lines) == 31
        assert all(1 <= int(l.split(",")[2]) <= 10 for l in lines[1:])
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert -1 <= summary["pearson_tau_score"] <= 1
        assert (tmp_path / "forget_scores.png").stat().st_size > 0


class TestTrain:
    def test_fold_artifacts(self, run_dir):
        for i in range(2):
            fold = run_dir / f"fold_{i}"
            for name in ("params.npz", "forgetting.json", "report.json", "epochs.csv",
                         "curves.png"):
                assert (fold / name).exists(), name
        summary = json.loads((run_dir / "summary.json").read_text())
        assert len(summary["folds"]) == 2
        assert len((run_dir / "summary.csv").read_text().splitlines()) == 3

    def test_evaluate_matches_report(self, run_dir, tmp_path):
        r = invoke("evaluate", "--run", run_dir, "--fold", 1, "--split", "valid", "--out", tmp_path)
        assert r.exit_code == 0
        got = json.loads((tmp_path / "metrics_valid_fold1.json").read_text())["folds"][0]["auc"]
        report = json.loads((run_dir / "fold_1" / "report.json").read_text())
        assert got == pytest.approx(report["best_auc"], abs=1e-6)

    def test_evaluate_test_split(self, run_dir, tmp_path):
        assert invoke("evaluate", "--run", run_dir, "--out", tmp_path).exit_code == 0
        rows = (tmp_path / "metrics_test.csv").read_text().splitlines()
        assert rows[0] == "fold,auc,acc,n_predictions" and len(rows) == 3

    def test_case_study(self, run_dir, tmp_path):
        r = invoke("case-study", "--run", run_dir, "--students", 5, "--out", tmp_path)
        assert r.exit_code == 0, r.output
        for name in ("case_study.csv", "correlations.json", "case_study.png"):
            assert (tmp_path / name).exists()

    def test_single_split(self, corpus, tmp_path):
        r = invoke("train", corpus / "interactions.csv", "--out", tmp_path, "--folds", 1,
                   *TINY_FLAGS[:-4], "--epochs", 1)
        assert r.exit_code == 0
        assert (tmp_path / "fold_0" / "params.npz").exists()
        assert not (tmp_path / "fold_1").exists()

    def test_bad_folds(self, corpus, tmp_path):
        r = CliRunner().invoke(cli, ["train", str(corpus / "interactions.csv"), "--out",
                                     str(tmp_path), "--folds", "0"])
        assert r.exit_code != 0

    def test_config_file(self, corpus, tmp_path):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text("folds: 1\nepochs: 1\nembed_dim: 4\nhidden_dim: 6\nlatent_dim: 3\n"
                       "forget_embed_dim: 3\nwindow: 10\n")
        r = invoke("--config", cfg, "train", corpus / "interactions.csv", "--out", tmp_path / "o")
        assert r.exit_code == 0
        run = json.loads((tmp_path / "o" / "run.json").read_text())
        assert run["folds"] == 1 and run["model"]["embed_dim"] == 4


class TestGradcheck:
    def test_passes(self, tmp_path):
        r = invoke("gradcheck", "--out", tmp_path)
        assert r.exit_code == 0
        assert r.output.strip().splitlines()[-1].startswith("PASS all")
        assert json.loads((tmp_path / "gradcheck.json").read_text())["passed"]


class TestReproducible:
    def test_train_twice(self, corpus, tmp_path):
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            invoke("train", corpus / "interactions.csv", "--out", out, "--folds", 2, "--seed", 9,
                   *TINY_FLAGS)
            invoke("evaluate", "--run", out)
            outputs.append([(out / f).read_bytes() for f in
                            ("summary.json", "summary.csv", "metrics_test.json",
                             "fold_0/epochs.csv", "fold_1/report.json", "fold_0/params.npz")])
        assert outputs[0] == outputs[1]
