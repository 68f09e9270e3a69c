import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from experiment_config import ExperimentConfig  # noqa: E402
from mlp_model import Batch, MlpModel  # noqa: E402
from rng_stream import RngStream  # noqa: E402


@pytest.fixture
def stream():
    return RngStream(seed=1234, stream_id=7)


@pytest.fixture
def tiny_model():
    """2 → 4 → 3 tanh MLP (가중치 12 + 8, 편향 4 + 3)."""
    return MlpModel.initialize([2, 4, 3], "tanh", RngStream(5, 1))


@pytest.fixture
def tiny_batch():
    s = RngStream(9, 2)
    inputs = s.standard_normal(16).reshape(8, 2)
    targets = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    return Batch(inputs, targets)


@pytest.fixture
def small_config(tmp_path):
    """몇 초 안에 끝나는 학습 설정."""
    return ExperimentConfig.from_dict({
        "model": {"sizes": [2, 8, 8, 2], "activation": "tanh"},
        "task": {"n_samples": 512, "val_size": 64, "test_size": 64},
        "zo": {"eps": 1e-3, "lr": 0.05, "steps": 40, "batch_size": 16, "seed": 3},
        "mask": {"source": "task", "fraction": 0.1, "score_batches": 4},
        "eval": {"eval_interval": 10},
        "pretrain_steps": 50,
        "out_dir": str(tmp_path / "run"),
    })
