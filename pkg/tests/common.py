"""Constants and helpers shared by the tests."""
import dataclasses
from pathlib import Path

import numpy as np

from mitkd.model import ModelConfig
from mitkd.numerics import Tape, backward

SEEDS = [0, 1, 17]

SMOKE_CONFIG = Path(__file__).parent.parent / "configs" / "smoke.json"

TINY_CONFIG = ModelConfig(
    num_layers=1,
    hidden_size=8,
    num_heads=2,
    ffn_size=16,
    max_seq_len=16,
    dropout_rate=0.0,
)
DROPOUT_CONFIG = dataclasses.replace(TINY_CONFIG, dropout_rate=0.1)
SMALL_CONFIGS = [
    TINY_CONFIG,
    ModelConfig(num_layers=2, hidden_size=12, num_heads=3, ffn_size=24, max_seq_len=16),
    ModelConfig(num_layers=2, hidden_size=16, num_heads=4, ffn_size=32, max_seq_len=16),
]

FD_STEP = 1e-5
FD_TOLERANCE = 1e-4
FD_SAMPLES = 12


def numeric_gradient(loss_fn, tensor, index, step=FD_STEP):
    """Central difference of ``loss_fn()`` with respect to ``tensor.data[index]``."""
    original = tensor.data[index]
    tensor.data[index] = original + step
    upper = loss_fn().item()
    tensor.data[index] = original - step
    lower = loss_fn().item()
    tensor.data[index] = original
    return (upper - lower) / (2.0 * step)


def check_gradients(loss_fn, tensors, seed=0, samples=FD_SAMPLES):
    """Compare tape gradients with central differences on sampled entries."""
    for tensor in tensors:
        tensor.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    rng = np.random.default_rng(seed)
    for tensor in tensors:
        assert tensor.grad is not None, f"no gradient for {tensor!r}"
        flat = rng.choice(tensor.size, size=min(samples, tensor.size), replace=False)
        for position in flat:
            index = np.unravel_index(position, tensor.shape)
            analytic = tensor.grad[index]
            numeric = numeric_gradient(loss_fn, tensor, index)
            scale = max(abs(analytic) + abs(numeric), 1e-4)
            assert abs(analytic - numeric) <= FD_TOLERANCE * scale, (
                f"{tensor!r}{index}: analytic {analytic!r} numeric {numeric!r}"
            )
