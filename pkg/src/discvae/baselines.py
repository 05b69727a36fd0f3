"""Comparison models: non-clustered disentangled VAE, VRNN and a BiLSTM classifier."""

from dataclasses import replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    CategoricalPosterior,
    ContractError,
    DenseBlock,
    GaussianHead,
    gaussian_log_likelihood,
    init_parameters,
    kl_diag_gaussians,
    reparam_sample,
)
from .model import DiSCVAE, ElboNoise, ModalityEncoder, ModelConfig, Rollout


class DSeqVAE(DiSCVAE):
    """DiSCVAE without the discrete variable: a single N(0, I) global prior."""

    kind = "dseqvae"

    def __init__(self, config: ModelConfig):
        super().__init__(replace(config, n_clusters=1))

    def _build_cluster_heads(self):
        c = self.config
        self.register_buffer("p_zG_mean", torch.zeros(1, c.dim_global))
        self.register_buffer("p_zG_log_var", torch.zeros(1, c.dim_global))

    def _draw_categorical_noise(self, batch_size, generator, dtype):
        return None

    def infer_y(self, merged):
        """Degenerate single-cluster posterior; never sampled during training."""
        return CategoricalPosterior(merged.new_zeros(merged.shape[0], 1))

    def relaxed_y(self, merged, u, temperature):
        return None, merged.new_ones(merged.shape[0], 1)

    def hard_y(self, merged, cluster=None):
        return merged.new_ones(merged.shape[0], 1)


class VRNN(nn.Module):
    """Variational RNN with one latent per step and no global latent."""

    kind = "vrnn"

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        dx = c.input_features
        dz = c.dim_local
        self.encoder = ModalityEncoder(c)
        self.cell = nn.LSTMCell(dx + dz, c.local_hidden)
        self.prior_head = GaussianHead(c.local_hidden, c.hidden, dz)
        self.posterior_head = GaussianHead(dx + c.local_hidden, c.hidden, dz)
        self.joystick_decoder = DenseBlock(dz + c.local_hidden, c.hidden, c.joystick_dim)
        self.laser_decoder = DenseBlock(dz + c.local_hidden, c.hidden, c.beams)
        init_parameters(self)

    def draw_noise(self, batch_size, steps, generator=None, dtype=torch.float32):
        eps = torch.randn(batch_size, steps, self.config.dim_local, generator=generator, dtype=dtype)
        return ElboNoise(None, eps, None)

    def encode_inputs(self, joystick, laser):
        return self.encoder(joystick, laser)

    def step(self, x_prev, state, z_prev):
        h, cell = self.cell(torch.cat([x_prev, z_prev], dim=-1), state)
        return (h, cell), self.prior_head(h)

    def posterior(self, x_t, h):
        return self.posterior_head(torch.cat([x_t, h], dim=-1))

    def decode(self, z, h):
        inp = torch.cat([z, h], dim=-1)
        return self.joystick_decoder(inp), self.laser_decoder(inp)

    def _initial(self, B, like):
        c = self.config
        h = like.new_zeros(B, c.local_hidden)
        return (h, h.clone()), like.new_zeros(B, c.input_features), like.new_zeros(B, c.dim_local)

    def run(self, joystick, laser, eps_local, force_prior=False):
        """Per-step posteriors, priors and samples; ``force_prior`` uses q = p."""
        x = self.encode_inputs(joystick, laser)
        B, T, _ = x.shape
        state, x_prev, z_prev = self._initial(B, x)
        out = []
        for t in range(T):
            state, p = self.step(x_prev, state, z_prev)
            q = p if force_prior else self.posterior(x[:, t], state[0])
            z = reparam_sample(q, eps_local[:, t])
            out.append((state[0], q, p, z))
            x_prev, z_prev = x[:, t], z
        return out

    def elbo(self, batch, generator=None, temperature=1.0, noise=None, force_prior=False):
        joystick, laser = batch.joystick, batch.laser
        if joystick.shape[0] == 0:
            raise ContractError("empty batch")
        if noise is None:
            noise = self.draw_noise(joystick.shape[0], joystick.shape[1], generator, joystick.dtype)
        cfg = self.config
        recon_a = recon_l = kl = 0.0
        for t, (h, q, p, z) in enumerate(self.run(joystick, laser, noise.eps_local, force_prior)):
            joy, las = self.decode(z, h)
            recon_a = recon_a + gaussian_log_likelihood(joystick[:, t], joy, cfg.joystick_var)
            recon_l = recon_l + gaussian_log_likelihood(laser[:, t], las, cfg.laser_var)
            kl = kl + kl_diag_gaussians(q, p)
        per_seq = recon_a + recon_l - kl
        terms = {"recon_a": recon_a.mean(), "recon_l": recon_l.mean(), "kl_local": kl.mean()}
        return per_seq.mean(), terms

    objective = elbo

    @torch.no_grad()
    def latent(self, joystick, laser):
        """Posterior mean of the last step's latent."""
        x = self.encode_inputs(joystick, laser)
        B, T, _ = x.shape
        state, x_prev, z_prev = self._initial(B, x)
        for t in range(T):
            state, _ = self.step(x_prev, state, z_prev)
            q = self.posterior(x[:, t], state[0])
            x_prev, z_prev = x[:, t], q.mean
        return q.mean

    @torch.no_grad()
    def predict_rollout(self, joystick, laser, n, generator=None, override_cluster=None, mean=False):
        if n < 1:
            raise ContractError("rollout horizon must be >= 1")

        def draw(g):
            if mean:
                return g.mean
            return reparam_sample(g, torch.randn(g.mean.shape, generator=generator, dtype=g.mean.dtype))

        x = self.encode_inputs(joystick, laser)
        B, T, _ = x.shape
        state, x_prev, z_prev = self._initial(B, x)
        for t in range(T):
            state, _ = self.step(x_prev, state, z_prev)
            x_prev, z_prev = x[:, t], draw(self.posterior(x[:, t], state[0]))
        joys, lasers, zls = [], [], []
        for _ in range(n):
            state, p = self.step(x_prev, state, z_prev)
            z = draw(p)
            joy, las = self.decode(z, state[0])
            joys.append(joy)
            lasers.append(las)
            zls.append(z)
            x_prev, z_prev = self.encode_inputs(joy, las), z
        return Rollout(torch.stack(joys, 1), torch.stack(lasers, 1), None, None, None, torch.stack(zls, 1))


class BiLSTMClassifier(nn.Module):
    """Supervised bidirectional LSTM over the encoded window."""

    kind = "bilstm"

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        dx = c.input_features
        self.encoder = ModalityEncoder(c)
        self.fwd = nn.LSTM(dx, c.hidden, batch_first=True)
        self.bwd = nn.LSTM(dx, c.hidden, batch_first=True)
        self.head = DenseBlock(c.hidden, c.hidden, c.n_classes)
        init_parameters(self)

    def logits(self, joystick, laser):
        x = self.encoder(joystick, laser)
        _, (h, _) = self.fwd(x)
        _, (g, _) = self.bwd(x.flip(1))
        return self.head(h[-1] + g[-1])

    def classify(self, joystick, laser):
        """Class distribution per window."""
        return F.softmax(self.logits(joystick, laser), dim=-1)

    def objective(self, batch, generator=None, temperature=1.0):
        log_p = F.log_softmax(self.logits(batch.joystick, batch.laser), dim=-1)
        ll = log_p.gather(1, batch.labels.long()[:, None]).squeeze(1)
        acc = (log_p.argmax(-1) == batch.labels).to(log_p.dtype).mean()
        return ll.mean(), {"log_lik": ll.mean(), "accuracy": acc}
