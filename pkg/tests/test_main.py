"""Tests for the zeros command line."""
import csv
import json

import pytest

from src import main as cli
from src import verify
from src.config import get_settings
from src.converters import read_metrics
from src.errors import ConfigError
from src.main import EXIT_FAILED, EXIT_OK, EXIT_USAGE, load_train_config, main
from src.schemas import BENCH_COLUMNS

TINY = """
name = "tiny"
task = "memorize"
steps = 4
batch_size = 4
eval_every = 2
eval_batches = 1
lr = 0.01
seed = 3

[task_params]
vocab_size = 8
seq_len = 6
mapping_seed = 1

[model]
vocab_size = 8
d_model = 16
n_heads = 2
n_layers = 1
max_seq_len = 6
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


class TestConfigLoading:
    """Tests for TOML run configs."""

    def test_loads(self, tiny_config):
        """A valid file parses into a TrainConfig."""
        cfg = load_train_config(tiny_config)
        assert cfg.name == "tiny" and cfg.model.d_model == 16

    def test_cli_seed_wins(self, tiny_config):
        """--seed overrides the file's seed."""
        assert load_train_config(tiny_config, cli_seed=9).seed == 9

    def test_missing(self, tmp_path):
        """A missing file is a config error."""
        with pytest.raises(ConfigError):
            load_train_config(tmp_path / "nope.toml")

    def test_bad_toml(self, tmp_path):
        """Broken TOML is a config error."""
        path = tmp_path / "bad.toml"
        path.write_text("task = [")
        with pytest.raises(ConfigError):
            load_train_config(path)

    def test_invalid_values(self, tmp_path):
        """Validation failures surface as config errors."""
        path = tmp_path / "bad.toml"
        path.write_text(TINY.replace("n_heads = 2", "n_heads = 3"))
        with pytest.raises(ConfigError):
            load_train_config(path)


class TestCommands:
    """Tests for the subcommands and exit codes."""

    def test_train_missing_config(self, tmp_path):
        """train exits 2 when the config is absent."""
        assert main(["train", "--config", str(tmp_path / "absent.toml")]) == EXIT_USAGE

    def test_verify_with_fault(self, monkeypatch, capsys):
        """An injected fault makes verify exit 1."""
        monkeypatch.setattr(verify, "INVARIANTS", [("zero_sum_rows", verify.check_zero_sum_rows)])
        assert main(["verify", "--fault", "skip_eps"]) == EXIT_FAILED
        assert "0/1 invariants passed" in capsys.readouterr().out

    def test_verify_passes(self, monkeypatch, capsys):
        """Holding invariants exit 0."""
        monkeypatch.setattr(verify, "INVARIANTS", [("softmax_rows", verify.check_softmax_rows)])
        assert main(["verify"]) == EXIT_OK

    def test_train_then_eval(self, tiny_config, tmp_path, capsys):
        """A trained checkpoint evaluates to a JSON report."""
        run_dir = tmp_path / "run"
        assert main(["train", "--config", str(tiny_config), "--run-dir", str(run_dir)]) == EXIT_OK
        assert (run_dir / "final.zsck").is_file()
        capsys.readouterr()
        assert main(["eval", "--config", str(tiny_config), "--ckpt", str(run_dir / "final.zsck")]) == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert report["task"] == "memorize" and 0.0 <= report["accuracy"] <= 1.0

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        """Training 4 steps, then resuming to 8, lands where 8 straight steps do."""
        full = TINY.replace("steps = 4", "steps = 8").replace("eval_every = 2", "eval_every = 4")
        full = full.replace("eval_batches = 1", "eval_batches = 2").replace("seed = 3", "seed = 3\nwarmup_frac = 0.0")
        half = full.replace("steps = 8", "steps = 4")
        (tmp_path / "full.toml").write_text(full)
        (tmp_path / "half.toml").write_text(half)
        straight, split = tmp_path / "straight", tmp_path / "split"
        assert main(["train", "--config", str(tmp_path / "full.toml"), "--run-dir", str(straight)]) == EXIT_OK
        assert main(["train", "--config", str(tmp_path / "half.toml"), "--run-dir", str(split)]) == EXIT_OK
        argv = ["train", "--config", str(tmp_path / "full.toml"), "--run-dir", str(split)]
        assert main(argv + ["--resume", str(split / "final.zsck")]) == EXIT_OK
        a, b = read_metrics(straight / "metrics.jsonl"), read_metrics(split / "metrics.jsonl")
        assert [r.step for r in a] == [r.step for r in b] == [4, 8]
        assert b[-1].train_loss == pytest.approx(a[-1].train_loss, rel=1e-3)
        assert abs(b[-1].eval_accuracy - a[-1].eval_accuracy) <= 0.02

    def test_eval_mismatched_checkpoint(self, tiny_config, tmp_path):
        """A checkpoint from another architecture exits 2."""
        other = tmp_path / "other.toml"
        other.write_text(TINY.replace("d_model = 16", "d_model = 32"))
        run_dir = tmp_path / "run"
        assert main(["train", "--config", str(other), "--run-dir", str(run_dir)]) == EXIT_OK
        assert main(["eval", "--config", str(tiny_config), "--ckpt", str(run_dir / "final.zsck")]) == EXIT_USAGE

    def test_eval_missing_checkpoint(self, tiny_config, tmp_path):
        """A missing checkpoint exits 2."""
        assert main(["eval", "--config", str(tiny_config), "--ckpt", str(tmp_path / "none.zsck")]) == EXIT_USAGE

    def test_bench_csv(self, tmp_path):
        """bench writes one CSV row per mechanism and length."""
        out = tmp_path / "bench.csv"
        argv = ["bench", "--mechanisms", "zeros,linattn", "--seq-lens", "8,16", "--d-model", "16", "--n-heads", "2"]
        assert main(argv + ["--reps", "5", "--out", str(out)]) == EXIT_OK
        rows = list(csv.reader(out.open()))
        assert tuple(rows[0]) == BENCH_COLUMNS
        assert [r[0] for r in rows[1:]] == ["zeros", "zeros", "linattn_elu", "linattn_elu"]

    def test_bench_seed_from_environment(self, monkeypatch, tmp_path):
        """ZEROS_SEED reaches the bench unless --seed is given."""
        seeds = []
        monkeypatch.setattr(cli, "run_bench", lambda *args, seed, **kwargs: seeds.append(seed) or [])
        monkeypatch.setenv("ZEROS_SEED", "7")
        get_settings.cache_clear()
        try:
            argv = ["bench", "--seq-lens", "8", "--out", str(tmp_path / "b.csv")]
            assert main(argv) == EXIT_OK
            assert main(argv + ["--seed", "2"]) == EXIT_OK
        finally:
            get_settings.cache_clear()
        assert seeds == [7, 2]

    def test_bench_too_few_reps(self):
        """reps below five exits 2."""
        assert main(["bench", "--seq-lens", "8", "--d-model", "16", "--n-heads", "2", "--reps", "3"]) == EXIT_USAGE

    def test_bad_subcommand(self):
        """argparse rejects unknown commands."""
        with pytest.raises(SystemExit):
            main(["serve"])
