"""Tests for the MQAR sweep script."""
import json

from scripts.mqar_sweep import MECHANISMS, SEEDS, run_sweep

TINY_MQAR = """
task = "mqar"
steps = 2
batch_size = 2
eval_every = 2
eval_batches = 1

[task_params]
vocab_size = 32
n_kv_pairs = 4
seq_len = 16
n_queries = 4

[model]
vocab_size = 32
d_model = 16
n_heads = 2
n_layers = 1
max_seq_len = 16
"""


class TestRunSweep:
    """Tests for the sweep summary."""

    def test_summary_shape(self, tmp_path):
        """Every mechanism gets one accuracy per seed and a median."""
        config = tmp_path / "mqar.toml"
        config.write_text(TINY_MQAR)
        summary = run_sweep(config, tmp_path / "out", steps=2)
        assert set(summary["accuracy"]) == set(MECHANISMS)
        assert all(len(acc) == len(SEEDS) for acc in summary["accuracy"].values())
        assert isinstance(summary["passed"], bool)
        json.dumps(summary)
        assert (tmp_path / "out" / "mqar-zeros-s0" / "final.zsck").is_file()
