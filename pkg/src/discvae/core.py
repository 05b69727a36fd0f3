"""Distribution primitives and network building blocks shared by every model."""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


def _check_same_shape(a, b, what):
    if a.shape[-1] != b.shape[-1]:
        raise ContractError(f"{what}: dimension mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


@dataclass(frozen=True)
class DiagGaussian:
    """Diagonal Gaussian; ``log_var`` is clamped to [-10, 10] on construction."""

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ContractError(
                f"mean/log_var shape mismatch {tuple(self.mean.shape)} vs {tuple(self.log_var.shape)}")
        object.__setattr__(self, "log_var", self.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX))

    @classmethod
    def from_params(cls, params):
        """Split the last axis of a head output into (mean, log_var)."""
        mean, log_var = params.chunk(2, dim=-1)
        return cls(mean, log_var)

    @property
    def dim(self):
        return self.mean.shape[-1]

    @property
    def std(self):
        return torch.exp(0.5 * self.log_var)


@dataclass(frozen=True)
class CategoricalPosterior:
    logits: torch.Tensor

    def __post_init__(self):
        if self.logits.shape[-1] < 1:
            raise ContractError("categorical needs K >= 1")

    @property
    def K(self):
        return self.logits.shape[-1]

    @property
    def probs(self):
        return F.softmax(self.logits, dim=-1)

    @property
    def log_probs(self):
        return F.log_softmax(self.logits, dim=-1)


@dataclass(frozen=True)
class RelaxedSample:
    probs: torch.Tensor
    temperature: float


def reparam_sample(g: DiagGaussian, eps: torch.Tensor) -> torch.Tensor:
    _check_same_shape(g.mean, eps, "reparam_sample")
    return g.mean + torch.exp(0.5 * g.log_var) * eps


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """KL(q || p) summed over the last axis."""
    _check_same_shape(q.mean, p.mean, "kl_diag_gaussians")
    var_ratio = torch.exp(q.log_var - p.log_var)
    mahal = (q.mean - p.mean) ** 2 * torch.exp(-p.log_var)
    return 0.5 * (var_ratio + mahal - 1.0 - (q.log_var - p.log_var)).sum(-1)


def gumbel_softmax_sample(c: CategoricalPosterior, temperature: float, u: torch.Tensor) -> RelaxedSample:
    if not temperature > 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    _check_same_shape(c.logits, u, "gumbel_softmax_sample")
    if not bool(((u > 0) & (u < 1)).all()):
        raise ContractError("uniform noise must lie strictly inside (0, 1)")
    gumbel = -torch.log(-torch.log(u))
    return RelaxedSample(F.softmax((c.logits + gumbel) / temperature, dim=-1), temperature)


def categorical_entropy(c: CategoricalPosterior) -> torch.Tensor:
    return -(c.probs * c.log_probs).sum(-1)


def kl_to_uniform(c: CategoricalPosterior) -> torch.Tensor:
    """KL(q(y) || Uniform(K)), the term the entropy bonus replaces."""
    return (c.probs * (c.log_probs + math.log(c.K))).sum(-1)


def gaussian_log_likelihood(x: torch.Tensor, mean: torch.Tensor, var=1.0) -> torch.Tensor:
    """Log density of x under N(mean, diag(var)), summed over the last axis.

    ``var`` is a scalar or a per-feature tensor broadcastable against x.
    """
    _check_same_shape(x, mean, "gaussian_log_likelihood")
    var = torch.as_tensor(var, dtype=x.dtype)
    return (-0.5 * torch.log(2 * math.pi * var) - (x - mean) ** 2 / (2 * var)).sum(-1)


def one_hot(index, K, dtype=torch.float32):
    return F.one_hot(torch.as_tensor(index), K).to(dtype)


class DenseBlock(nn.Module):
    """Single-hidden-layer ReLU perceptron."""

    def __init__(self, input_dim, hidden_dim, output_dim):
        super().__init__()
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.net = nn.Sequential(
            nn.Linear(input_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, output_dim),
        )

    def forward(self, x):
        return self.net(x)


class GaussianHead(DenseBlock):
    def __init__(self, input_dim, hidden_dim, latent_dim):
        super().__init__(input_dim, hidden_dim, 2 * latent_dim)

    def forward(self, x):
        return DiagGaussian.from_params(self.net(x))


def init_parameters(module: nn.Module):
    """Fan-in uniform dense weights, orthogonal recurrent weights, zero biases."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.LSTM, nn.LSTMCell)):
            for name, w in m.named_parameters():
                if "bias" in name:
                    nn.init.zeros_(w)
                elif "weight_hh" in name:
                    for gate in w.data.chunk(4, dim=0):
                        nn.init.orthogonal_(gate)
                else:
                    bound = 1.0 / math.sqrt(w.shape[1])
                    nn.init.uniform_(w, -bound, bound)
