"""Small builders shared by the model tests."""

import torch

from discvae.dataset import SequenceBatch
from discvae.model import ModelConfig

TINY = dict(beams=2, n_clusters=2, dim_global=2, dim_local=2, hidden=4, local_hidden=3,
            joystick_features=2, laser_features=2, window=3, n_classes=3)


def tiny_config(**overrides):
    return ModelConfig(**{**TINY, **overrides})


def random_batch(B, T, beams, dtype=torch.float64, seed=0, n_classes=12):
    gen = torch.Generator().manual_seed(seed)
    joystick = torch.randn(B, T, 2, generator=gen, dtype=dtype)
    laser = torch.randn(B, T, beams, generator=gen, dtype=dtype)
    labels = torch.randint(0, n_classes, (B,), generator=gen)
    zeros = torch.zeros(B, dtype=torch.long)
    return SequenceBatch(joystick, laser, labels, labels // 2, labels % 2, labels // 2, torch.arange(B), zeros)


def jitter_biases(model, scale=0.3, seed=0):
    """Move a freshly initialised model off the ReLU kinks.

    Zero biases and zero initial states put many pre-activations at exactly
    0, where finite differences are meaningless.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias") or "bias_" in name or "log_var" in name:
                p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
