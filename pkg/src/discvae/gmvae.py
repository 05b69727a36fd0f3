"""Static Gaussian-mixture VAE with a relaxed categorical cluster variable."""

from dataclasses import dataclass

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
    reparam_sample,
)
from .model import uniform_open


@dataclass
class GmvaeNoise:
    eps: torch.Tensor
    u: torch.Tensor


class GMVAE(nn.Module):
    """p(y) = Uniform(K), p(z|y) = N(table[y]), p(x|z) = N(decoder(z), diag(dec_var)).

    ``dec_var`` is a scalar or a per-feature vector of length ``input_dim``.
    """

    kind = "gmvae"

    def __init__(self, input_dim, n_clusters=13, dim_z=16, hidden=512, dec_var=1.0):
        super().__init__()
        self.input_dim = input_dim
        self.n_clusters = n_clusters
        self.dim_z = dim_z
        self.register_buffer("dec_var", torch.broadcast_to(torch.as_tensor(dec_var, dtype=torch.float32),
                                                           (input_dim,)).clone(), persistent=False)
        self.encoder_y = DenseBlock(input_dim, hidden, n_clusters)
        self.encoder_z = GaussianHead(input_dim + n_clusters, hidden, dim_z)
        self.prior_mean = nn.Parameter(torch.randn(n_clusters, dim_z))
        self.prior_log_var = nn.Parameter(torch.zeros(n_clusters, dim_z))
        self.decoder_x = DenseBlock(dim_z, hidden, input_dim)
        init_parameters(self)

    @staticmethod
    def features(batch):
        """Flatten a sequence batch into static vectors; tensors pass through."""
        if isinstance(batch, torch.Tensor):
            return batch
        x = torch.cat([batch.joystick, batch.laser], dim=-1)
        return x.reshape(x.shape[0], -1)

    def draw_noise(self, batch_size, generator=None, dtype=torch.float32):
        eps = torch.randn(batch_size, self.dim_z, generator=generator, dtype=dtype)
        return GmvaeNoise(eps, uniform_open((batch_size, self.n_clusters), generator, dtype))

    def prior(self, y):
        return DiagGaussian(y @ self.prior_mean, y @ self.prior_log_var)

    def infer(self, x, generator=None, temperature=1.0, noise=None):
        """q(y|x), a relaxed y, q(z|x,y) and a reparameterised z."""
        if x.shape[-1] != self.input_dim:
            raise ContractError(f"expected input dim {self.input_dim}, got {x.shape[-1]}")
        if noise is None:
            noise = self.draw_noise(x.shape[0], generator, x.dtype)
        q_y = CategoricalPosterior(self.encoder_y(x))
        y = gumbel_softmax_sample(q_y, temperature, noise.u)
        q_z = self.encoder_z(torch.cat([x, y.probs], dim=-1))
        return q_y, y, q_z, reparam_sample(q_z, noise.eps)

    @torch.no_grad()
    def generate(self, y, generator=None):
        y = torch.as_tensor(y, dtype=self.prior_mean.dtype)
        if y.dim() == 1:
            y = y[None]
        if y.shape[-1] != self.n_clusters or not bool(((y == 0) | (y == 1)).all() and (y.sum(-1) == 1).all()):
            raise ContractError("generate needs one-hot cluster vectors")
        p = self.prior(y)
        z = reparam_sample(p, torch.randn(p.mean.shape, generator=generator, dtype=y.dtype))
        mean = self.decoder_x(z)
        return mean + self.dec_var.to(y.dtype).sqrt() * torch.randn(mean.shape, generator=generator, dtype=y.dtype)

    def elbo(self, batch, generator=None, temperature=1.0, noise=None, y_term="entropy"):
        x = self.features(batch)
        if x.shape[0] == 0:
            raise ContractError("empty batch")
        q_y, y, q_z, z = self.infer(x, generator, temperature, noise)
        recon = gaussian_log_likelihood(x, self.decoder_x(z), self.dec_var.to(x.dtype))
        kl_z = kl_diag_gaussians(q_z, self.prior(y.probs))
        per = recon - kl_z
        terms = {"recon": recon.mean(), "kl_global": kl_z.mean()}
        if y_term == "entropy":
            h = categorical_entropy(q_y)
            per = per + h
            terms["entropy"] = h.mean()
        elif y_term == "kl":
            kl_y = kl_to_uniform(q_y)
            per = per - kl_y
            terms["kl_y"] = kl_y.mean()
        else:
            raise ContractError(f"unknown y_term {y_term!r}")
        return per.mean(), terms

    objective = elbo

    def _static(self, joystick, laser=None):
        if laser is None:
            return self.features(joystick)
        x = torch.cat([joystick, laser], dim=-1)
        return x.reshape(x.shape[0], -1)

    @torch.no_grad()
    def assign_cluster(self, joystick, laser=None):
        return self.encoder_y(self._static(joystick, laser)).argmax(-1)

    @torch.no_grad()
    def latent(self, joystick, laser=None):
        """Posterior mean of z under the hard cluster assignment."""
        x = self._static(joystick, laser)
        y = torch.nn.functional.one_hot(self.encoder_y(x).argmax(-1), self.n_clusters).to(x.dtype)
        return self.encoder_z(torch.cat([x, y], dim=-1)).mean
