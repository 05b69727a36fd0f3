"""Disentangled sequence clustering VAE.

A bidirectional LSTM summarises the whole window into a global code ``z_G``
drawn from a K-component Gaussian mixture indexed by a relaxed categorical
``y``; a forward LSTM carries per-step local codes ``z_L`` in VRNN fashion.
Joystick commands and range scans are decoded by separate fixed-variance
Gaussian heads.
"""

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn

from .core import (
    CategoricalPosterior,
    ContractError,
    DenseBlock,
    DiagGaussian,
    GaussianHead,
    categorical_entropy,
    gaussian_log_likelihood,
    gumbel_softmax_sample,
    init_parameters,
    kl_diag_gaussians,
    kl_to_uniform,
    one_hot,
    reparam_sample,
)


@dataclass
class ModelConfig:
    beams: int = 72
    n_clusters: int = 13
    dim_global: int = 16
    dim_local: int = 16
    hidden: int = 512
    local_hidden: int = 128
    joystick_features: int = 8
    laser_features: int = 128
    joystick_dim: int = 2
    n_classes: int = 12
    window: int = 20
    joystick_var: float = 1.0
    laser_var: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ContractError(f"{f.name} must be positive, got {getattr(self, f.name)}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    @property
    def input_features(self):
        return self.joystick_features + self.laser_features


@dataclass
class ElboNoise:
    """Every random draw one ELBO evaluation consumes.

    Drawn in a fixed order (global, local, categorical) so models that skip
    the categorical draw still see identical Gaussian noise.
    """

    eps_global: torch.Tensor | None
    eps_local: torch.Tensor
    u: torch.Tensor | None


def uniform_open(shape, generator, dtype=torch.float32):
    u = torch.rand(shape, generator=generator, dtype=dtype)
    tiny = torch.finfo(dtype).tiny
    return u.clamp(tiny, 1.0 - torch.finfo(dtype).eps)


@dataclass
class Rollout:
    joystick: torch.Tensor  # (B, n, 2)
    laser: torch.Tensor  # (B, n, beams)
    cluster: torch.Tensor  # (B,)
    q_y: CategoricalPosterior
    z_global: torch.Tensor  # (B, n, dim_global), one row repeated per step
    z_local: torch.Tensor  # (B, n, dim_local)


@dataclass
class LatentTrace:
    q_y: CategoricalPosterior | None
    y_sample: torch.Tensor
    q_zG: DiagGaussian
    p_zG: DiagGaussian
    z_G: torch.Tensor
    q_zL: list
    p_zL: list
    z_L: list
    h_states: list


class ModalityEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.joystick_encoder = DenseBlock(config.joystick_dim, config.hidden, config.joystick_features)
        self.laser_encoder = DenseBlock(config.beams, config.hidden, config.laser_features)

    def forward(self, joystick, laser):
        return torch.cat([self.joystick_encoder(joystick), self.laser_encoder(laser)], dim=-1)


class DiSCVAE(nn.Module):
    kind = "discvae"

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        K = c.n_clusters
        dx = c.input_features
        self.encoder = ModalityEncoder(c)
        self.bi_cell_fwd = nn.LSTM(dx, c.hidden, batch_first=True)
        self.bi_cell_bwd = nn.LSTM(dx, c.hidden, batch_first=True)
        self.local_cell = nn.LSTMCell(dx + c.dim_local, c.local_hidden)
        self._build_cluster_heads()
        self.q_zG_head = GaussianHead(c.hidden + K, c.hidden, c.dim_global)
        self.q_zL_head = GaussianHead(dx + c.local_hidden, c.hidden, c.dim_local)
        self.p_zL_head = GaussianHead(c.local_hidden, c.hidden, c.dim_local)
        dec_in = c.dim_global + c.dim_local + c.local_hidden
        self.joystick_decoder = DenseBlock(dec_in, c.hidden, c.joystick_dim)
        self.laser_decoder = DenseBlock(dec_in, c.hidden, c.beams)
        init_parameters(self)

    def _build_cluster_heads(self):
        c = self.config
        self.q_y_head = DenseBlock(c.hidden, c.hidden, c.n_clusters)
        # mixture prior table; means spread so components start distinct
        self.p_zG_mean = nn.Parameter(torch.randn(c.n_clusters, c.dim_global))
        self.p_zG_log_var = nn.Parameter(torch.zeros(c.n_clusters, c.dim_global))

    @property
    def n_clusters(self):
        return self.config.n_clusters

    # -- noise -------------------------------------------------------------

    def draw_noise(self, batch_size, steps, generator=None, dtype=torch.float32):
        c = self.config
        eps_global = torch.randn(batch_size, c.dim_global, generator=generator, dtype=dtype)
        eps_local = torch.randn(batch_size, steps, c.dim_local, generator=generator, dtype=dtype)
        u = self._draw_categorical_noise(batch_size, generator, dtype)
        return ElboNoise(eps_global, eps_local, u)

    def _draw_categorical_noise(self, batch_size, generator, dtype):
        return uniform_open((batch_size, self.n_clusters), generator, dtype)

    # -- inference ---------------------------------------------------------

    def encode_inputs(self, joystick, laser):
        return self.encoder(joystick, laser)

    def encode_global(self, x):
        """Sum of the forward state after x_T and the backward state after x_1."""
        if x.dim() != 3 or x.shape[1] < 1:
            raise ContractError("encode_global needs a (B, T>=1, D) sequence")
        _, (h_fwd, _) = self.bi_cell_fwd(x)
        _, (g_bwd, _) = self.bi_cell_bwd(x.flip(1))
        return h_fwd[-1] + g_bwd[-1]

    def infer_y(self, merged):
        return CategoricalPosterior(self.q_y_head(merged))

    def relaxed_y(self, merged, u, temperature):
        q_y = self.infer_y(merged)
        return q_y, gumbel_softmax_sample(q_y, temperature, u).probs

    def infer_global(self, merged, y, eps):
        q = self.q_zG_head(torch.cat([merged, y], dim=-1))
        return q, reparam_sample(q, eps)

    def prior_global(self, y):
        """p(z_G | y); linear in y so relaxed samples interpolate components."""
        return DiagGaussian(y @ self.p_zG_mean, y @ self.p_zG_log_var)

    def initial_state(self, batch_size, like):
        c = self.config
        h = like.new_zeros(batch_size, c.local_hidden)
        return (h, h.clone()), like.new_zeros(batch_size, c.input_features), like.new_zeros(batch_size, c.dim_local)

    def local_prior_step(self, x_prev, state, z_prev):
        h, cell = self.local_cell(torch.cat([x_prev, z_prev], dim=-1), state)
        return (h, cell), self.p_zL_head(h)

    def local_step(self, x_prev, x_t, state, z_prev, eps):
        """Advance the local recurrence on (x_{t-1}, z_{t-1}) and infer z_t."""
        state, p = self.local_prior_step(x_prev, state, z_prev)
        q = self.q_zL_head(torch.cat([x_t, state[0]], dim=-1))
        return state, q, p, reparam_sample(q, eps)

    def decode_step(self, z_G, z_L, h):
        inp = torch.cat([z_G, z_L, h], dim=-1)
        joy = self.joystick_decoder(inp)
        las = self.laser_decoder(inp)
        return (DiagGaussian(joy, torch.full_like(joy, math.log(self.config.joystick_var))),
                DiagGaussian(las, torch.full_like(las, math.log(self.config.laser_var))))

    # -- objective ---------------------------------------------------------

    def trace(self, joystick, laser, noise: ElboNoise, temperature=1.0):
        x = self.encode_inputs(joystick, laser)
        B, T, _ = x.shape
        merged = self.encode_global(x)
        q_y, y = self.relaxed_y(merged, noise.u, temperature)
        q_G, z_G = self.infer_global(merged, y, noise.eps_global)
        p_G = self.prior_global(y)
        state, x_prev, z_prev = self.initial_state(B, x)
        q_L, p_L, z_L, hs = [], [], [], []
        for t in range(T):
            state, q, p, z = self.local_step(x_prev, x[:, t], state, z_prev, noise.eps_local[:, t])
            q_L.append(q)
            p_L.append(p)
            z_L.append(z)
            hs.append(state[0])
            x_prev, z_prev = x[:, t], z
        return LatentTrace(q_y, y, q_G, p_G, z_G, q_L, p_L, z_L, hs)

    def elbo(self, batch, generator=None, temperature=1.0, noise=None, y_term="entropy"):
        """Batch-mean objective and its per-term breakdown.

        ``y_term="kl"`` swaps the entropy bonus for -KL(q(y|x) || uniform).
        """
        joystick, laser = batch.joystick, batch.laser
        if joystick.shape[0] == 0:
            raise ContractError("empty batch")
        if noise is None:
            noise = self.draw_noise(joystick.shape[0], joystick.shape[1], generator, joystick.dtype)
        tr = self.trace(joystick, laser, noise, temperature)
        cfg = self.config
        recon_a = 0.0
        recon_l = 0.0
        kl_local = 0.0
        for t in range(joystick.shape[1]):
            joy, las = self.decode_step(tr.z_G, tr.z_L[t], tr.h_states[t])
            recon_a = recon_a + gaussian_log_likelihood(joystick[:, t], joy.mean, cfg.joystick_var)
            recon_l = recon_l + gaussian_log_likelihood(laser[:, t], las.mean, cfg.laser_var)
            kl_local = kl_local + kl_diag_gaussians(tr.q_zL[t], tr.p_zL[t])
        kl_global = kl_diag_gaussians(tr.q_zG, tr.p_zG)
        per_seq = recon_a + recon_l - kl_local - kl_global
        terms = {
            "recon_a": recon_a.mean(),
            "recon_l": recon_l.mean(),
            "kl_local": kl_local.mean(),
            "kl_global": kl_global.mean(),
        }
        if tr.q_y is not None:
            if y_term == "entropy":
                entropy = categorical_entropy(tr.q_y)
                per_seq = per_seq + entropy
                terms["entropy"] = entropy.mean()
            elif y_term == "kl":
                kl_y = kl_to_uniform(tr.q_y)
                per_seq = per_seq - kl_y
                terms["kl_y"] = kl_y.mean()
            else:
                raise ContractError(f"unknown y_term {y_term!r}")
        return per_seq.mean(), terms

    objective = elbo

    # -- evaluation --------------------------------------------------------

    @torch.no_grad()
    def cluster_posterior(self, joystick, laser):
        return self.infer_y(self.encode_global(self.encode_inputs(joystick, laser)))

    @torch.no_grad()
    def assign_cluster(self, joystick, laser):
        """argmax_k q(y_k | x); torch.argmax keeps the lowest index on ties."""
        return self.cluster_posterior(joystick, laser).logits.argmax(-1)

    def hard_y(self, merged, cluster=None):
        if cluster is None:
            cluster = self.infer_y(merged).logits.argmax(-1)
        return one_hot(cluster, self.n_clusters, merged.dtype)

    @torch.no_grad()
    def latent(self, joystick, laser):
        """Posterior mean of z_G given the hard cluster assignment."""
        merged = self.encode_global(self.encode_inputs(joystick, laser))
        q = self.q_zG_head(torch.cat([merged, self.hard_y(merged)], dim=-1))
        return q.mean

    @torch.no_grad()
    def predict_rollout(self, joystick, laser, n, generator=None, override_cluster=None, mean=False):
        """Autoregressive forecast of n future steps from a (B, t, .) prefix.

        One global code is drawn from the assigned (or overridden) mixture
        component and held fixed; local codes are drawn from the step prior and
        the decoded means re-enter the recurrence. ``mean=True`` replaces every
        draw by its distribution mean.
        """
        if n < 1:
            raise ContractError("rollout horizon must be >= 1")
        if joystick.shape[1] < 1:
            raise ContractError("rollout prefix must contain at least one step")

        def draw(g):
            if mean:
                return g.mean
            return reparam_sample(g, torch.randn(g.mean.shape, generator=generator, dtype=g.mean.dtype))

        x = self.encode_inputs(joystick, laser)
        B, t_pre, _ = x.shape
        merged = self.encode_global(x)
        q_y = self.infer_y(merged)
        if override_cluster is None:
            cluster = q_y.logits.argmax(-1)
        else:
            cluster = torch.as_tensor(override_cluster).expand(B)
        z_G = draw(self.prior_global(self.hard_y(merged, cluster)))

        state, x_prev, z_prev = self.initial_state(B, x)
        for t in range(t_pre):
            state, q, _, _ = self.local_step(x_prev, x[:, t], state, z_prev, torch.zeros_like(z_prev))
            x_prev, z_prev = x[:, t], draw(q)

        joys, lasers, zgs, zls = [], [], [], []
        for _ in range(n):
            state, p = self.local_prior_step(x_prev, state, z_prev)
            z = draw(p)
            joy, las = self.decode_step(z_G, z, state[0])
            joys.append(joy.mean)
            lasers.append(las.mean)
            zgs.append(z_G)
            zls.append(z)
            x_prev = self.encode_inputs(joy.mean, las.mean)
            z_prev = z
        return Rollout(torch.stack(joys, 1), torch.stack(lasers, 1), cluster, q_y,
                       torch.stack(zgs, 1), torch.stack(zls, 1))
