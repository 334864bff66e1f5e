import numpy as np
import pytest

from experiment import parse_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_markov_payload():
    """Small enough for a handful of tape steps per test."""
    return {
        "task": {"kind": "markov", "num_states": 4, "p_stay": 0.5, "num_sources": 3, "obs_dim": 4, "noise": 0.5,
                 "length": 24, "seed": 3},
        "model": {"encoder": {"strides": [2], "widths": [2], "channels": [6]}, "d_c": 5, "max_horizon": 2},
        "training": {"steps": 4, "batch_size": 4, "sequences_per_source": 2, "learning_rate": 0.001,
                     "log_every": 2, "seed": 11},
        "contrastive": {"num_negatives": 4},
        "probe": {"train_sequences": 6, "val_sequences": 3, "test_sequences": 3, "supervised_steps": 2,
                  "hidden_steps": 5, "hidden_width": 8},
        "eval": {"sequences": 4, "batches": 3},
    }


@pytest.fixture
def tiny_markov(tiny_markov_payload, tmp_path):
    return parse_config({**tiny_markov_payload, "out_dir": str(tmp_path / "run")})
