import json

import pytest

from chronos.cli import main
from chronos.scorer_net import count_flops, ChronosConfig
from chronos.trajectory_store import load_jsonl
from chronos.voter import NO_ANSWER


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def synth_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "pool.jsonl"
    config = tmp_path_factory.mktemp("cfg") / "synth.json"
    config.write_text(
        json.dumps(
            {
                "synth": {
                    "n_questions": 12,
                    "pool_size": 10,
                    "correct_fraction": 0.5,
                    "length_range": [16, 28],
                    "sigma": 0.1,
                    "amplitude": 0.4,
                    "extent": 8,
                    "seed": 21,
                }
            }
        )
    )
    assert run("synth", "--output", str(path), "--config", str(config)) == 0
    return path


@pytest.fixture(scope="module")
def train_args(tmp_path_factory, synth_file):
    ckpt = tmp_path_factory.mktemp("model") / "model.chrs"
    cfg = tmp_path_factory.mktemp("traincfg") / "train.json"
    cfg.write_text(
        json.dumps(
            {
                "l_tail": 16,
                "n_proj": 2,
                "n_conv": 2,
                "kernel_lengths": [3, 5],
                "n_blk": 1,
                "max_epochs": 6,
                "patience": 6,
                "batch_size": 32,
                "learning_rate": 0.003,
                "ensemble_size": 1,
                "k_stat": 4,
            }
        )
    )
    argv = ("train", "--input", str(synth_file), "--output", str(ckpt), "--config", str(cfg), "--seed", "0")
    assert run(*argv) == 0
    return argv, ckpt


class TestValidate:
    def test_clean_file(self, synth_file):
        assert run("validate", "--input", str(synth_file)) == 0

    def test_bad_record(self, tmp_path, capsys):
        path = tmp_path / "bad.jsonl"
        path.write_text(
            json.dumps({"format_version": 1, "k_stat": 2}) + "\n"
            + json.dumps({"question_id": "q", "trajectory_id": "t", "answer": "1", "steps": [[0.5, -0.1]]}) + "\n"
        )
        assert run("validate", "--input", str(path)) == 1
        assert "positive log-probability" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert run("validate", "--input", str(tmp_path / "nope.jsonl")) == 2


class TestTrainCommand:
    def test_rerun_is_byte_identical(self, tmp_path, train_args):
        argv, ckpt = train_args
        first = ckpt.read_bytes()
        metrics_first = ckpt.with_suffix(ckpt.suffix + ".metrics.jsonl").read_bytes()
        assert run(*argv) == 0
        assert ckpt.read_bytes() == first
        assert ckpt.with_suffix(ckpt.suffix + ".metrics.jsonl").read_bytes() == metrics_first

    def test_metrics_log_schema(self, train_args):
        _, ckpt = train_args
        rows = [json.loads(l) for l in ckpt.with_suffix(ckpt.suffix + ".metrics.jsonl").read_text().splitlines()]
        epoch_rows = [r for r in rows if "epoch" in r]
        assert epoch_rows
        assert all({"epoch", "train_loss", "val_auc"} <= set(r) for r in epoch_rows)

    def test_unknown_config_key_rejected(self, tmp_path, synth_file):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"learning_rte": 0.1}))
        code = run("train", "--input", str(synth_file), "--output", str(tmp_path / "m.chrs"), "--config", str(cfg))
        assert code == 2

    def test_grid_default_trains_all_18_configs(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CHRONOS_THREADS", "2")  # exercises the parallel path
        data = tmp_path / "pool.jsonl"
        cfg = tmp_path / "cfg.json"
        cfg.write_text(
            json.dumps(
                {
                    "synth": {
                        "n_questions": 10, "pool_size": 4, "correct_fraction": 0.5,
                        "length_range": [24, 48], "sigma": 0.1, "amplitude": 0.4,
                        "extent": 12, "seed": 1,
                    },
                    # l_tail must cover the longest grid kernel (160)
                    "l_tail": 192, "max_epochs": 1, "patience": 0, "batch_size": 64,
                    "ensemble_size": 1, "k_stat": 4, "seed": 0,
                }
            )
        )
        assert run("synth", "--output", str(data), "--config", str(cfg)) == 0
        ckpt = tmp_path / "m.chrs"
        assert run("train", "--input", str(data), "--output", str(ckpt), "--config", str(cfg), "--grid", "default") == 0
        rows = [json.loads(l) for l in ckpt.with_suffix(ckpt.suffix + ".metrics.jsonl").read_text().splitlines()]
        configs = {json.dumps(r["config"], sort_keys=True) for r in rows if "config" in r}
        assert len(configs) == 18

    def test_eval_defaults_match_documented_values(self):
        from chronos.cli import DEFAULTS

        assert DEFAULTS["k"] == 128
        assert DEFAULTS["repeats"] == 16
        assert DEFAULTS["eta"] == 0.1
        assert DEFAULTS["l_tail"] == 2048
        assert DEFAULTS["n_blk"] == 3
        assert DEFAULTS["k_stat"] == 20


class TestScoreCommand:
    def test_score_vote_eval_pipeline(self, tmp_path, synth_file, train_args):
        _, ckpt = train_args
        scored = tmp_path / "scored.jsonl"
        assert run("score", "--input", str(synth_file), "--checkpoint", str(ckpt), "--output", str(scored)) == 0

        input_rows = load_jsonl(synth_file)
        lines = scored.read_text().splitlines()
        assert len(lines) - 1 == len(input_rows)
        recs = [json.loads(l) for l in lines[1:]]
        assert all(0.0 < r["score"] < 1.0 for r in recs)

        rescored = tmp_path / "rescored.jsonl"
        assert run("score", "--input", str(scored), "--checkpoint", str(ckpt), "--output", str(rescored)) == 0
        assert rescored.read_text() == scored.read_text()  # idempotent

        votes = tmp_path / "votes.jsonl"
        assert run("vote", "--input", str(scored), "--output", str(votes), "--eta", "0.2") == 0
        vote_rows = [json.loads(l) for l in votes.read_text().splitlines()]
        assert len(vote_rows) == 12
        assert all({"question_id", "winner", "eta", "retained_ids", "weights"} == set(r) for r in vote_rows)

        report_path = tmp_path / "report.json"
        argv = (
            "eval", "--input", str(scored), "--output", str(report_path),
            "--k", "8", "--repeats", "4", "--eta", "0.25", "--seed", "7",
            "--per-question-csv", str(tmp_path / "pq.csv"),
            "--histogram-csv", str(tmp_path / "hist.csv"),
        )
        assert run(*argv) == 0
        report = json.loads(report_path.read_text())
        assert report["k"] == 8 and report["repeats"] == 4
        assert set(report["methods"]) == {"maj", "chronos"}
        first = report_path.read_bytes()
        assert run(*argv) == 0
        assert report_path.read_bytes() == first  # deterministic rerun

        hist_lines = (tmp_path / "hist.csv").read_text().splitlines()
        assert hist_lines[0] == "bin_lo,bin_hi,class,count"
        assert len(hist_lines) == 1 + 2 * 20

    def test_k_mismatch_rejected(self, tmp_path, train_args):
        _, ckpt = train_args
        thin = tmp_path / "thin.jsonl"
        thin.write_text(
            json.dumps({"format_version": 1, "k_stat": 1}) + "\n"
            + json.dumps({"question_id": "q", "trajectory_id": "t", "answer": "1", "steps": [[-0.5]]}) + "\n"
        )
        assert run("score", "--input", str(thin), "--checkpoint", str(ckpt), "--output", str(tmp_path / "o.jsonl")) == 1


class TestVoteEquivalence:
    def test_eta_one_constant_scores_matches_plurality(self, tmp_path):
        path = tmp_path / "scored.jsonl"
        rows = [json.dumps({"format_version": 1, "k_stat": 1})]
        answers = ["7", "7", "3", "5", "3", "3"]
        for i, a in enumerate(answers):
            rows.append(
                json.dumps(
                    {
                        "question_id": "q0",
                        "trajectory_id": f"t{i}",
                        "answer": a,
                        "steps": [[-1.0]],
                        "score": 0.5,
                    }
                )
            )
        path.write_text("\n".join(rows) + "\n")
        votes = tmp_path / "v.jsonl"
        assert run("vote", "--input", str(path), "--output", str(votes), "--eta", "1.0") == 0
        row = json.loads(votes.read_text().splitlines()[0])
        assert row["winner"] == "3"  # plurality answer


class TestFlops:
    def test_prints_default_count(self, capsys):
        assert run("flops", "--batch", "30") == 0
        printed = int(capsys.readouterr().out.strip())
        assert printed == count_flops(ChronosConfig(), 30)
        assert 1e9 <= printed <= 1e10

    def test_flag_overrides_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"l_tail": 1024}))
        assert run("flops", "--batch", "1", "--config", str(cfg), "--ltail", "512") == 0
        printed = int(capsys.readouterr().out.strip())
        assert printed == count_flops(ChronosConfig(l_tail=512), 1)
