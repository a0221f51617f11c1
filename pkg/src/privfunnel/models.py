"""The parameterized networks of the training architectures.

Encoder (Gaussian posterior over the latent), utility decoder, sensitive
classifier, FiLM-conditioned generator, prior-distribution generator, and
sigmoid discriminators, plus the stochastic sampling primitives
(reparameterization, latent perturbation noise, prior sampling).

Two data modes share one interface: image inputs are flattened on entry,
so every network is an MLP over vectors. Latent samples are plain torch
tensors throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .infotheory import LATENT_NOISE_VARIANCE, GaussianDiag


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_widths: Sequence[int]
    output_dim: int
    dropout_rate: float = 0.0
    activation: str = "elu"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input and output dims must be >= 1")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError("all hidden widths must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


_ACTIVATIONS = {"elu": nn.ELU, "relu": nn.ReLU, "tanh": nn.Tanh}


def _activation(name: str) -> nn.Module:
    try:
        return _ACTIVATIONS[name]()
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


def _hidden_stack(spec: NetworkSpec) -> tuple[nn.ModuleList, int]:
    layers = nn.ModuleList()
    width = spec.input_dim
    for w in spec.hidden_widths:
        layers.append(nn.Linear(width, w))
        width = w
    return layers, width


class _Mlp(nn.Module):
    """Hidden stack with activation + dropout, then a linear output head."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.hidden, width = _hidden_stack(spec)
        self.act = _activation(spec.activation)
        self.dropout = nn.Dropout(spec.dropout_rate)
        self.out = nn.Linear(width, spec.output_dim)

    def forward(self, x):
        h = x
        for layer in self.hidden:
            h = self.dropout(self.act(layer(h)))
        return self.out(h)


def _flatten(x: torch.Tensor, expected_dim: int) -> torch.Tensor:
    if x.ndim > 2:
        x = x.reshape(x.shape[0], -1)
    elif x.ndim == 1:
        x = x.unsqueeze(0)
    if x.shape[1] != expected_dim:
        raise ValueError(f"expected {expected_dim} input features, got {x.shape[1]}")
    return x


class Encoder(nn.Module):
    """f_phi: maps x to a diagonal-Gaussian posterior over the latent."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.hidden, width = _hidden_stack(spec)
        self.act = _activation(spec.activation)
        self.dropout = nn.Dropout(spec.dropout_rate)
        self.mean_head = nn.Linear(width, spec.output_dim)
        self.logvar_head = nn.Linear(width, spec.output_dim)

    def forward(self, x) -> GaussianDiag:
        h = _flatten(x, self.spec.input_dim)
        for layer in self.hidden:
            h = self.dropout(self.act(layer(h)))
        logvar = self.logvar_head(h).clamp(-12.0, 12.0)
        return GaussianDiag(mean=self.mean_head(h), variance=torch.exp(logvar))


def encode(enc: Encoder, x) -> GaussianDiag:
    return enc(torch.as_tensor(x, dtype=torch.float32))


def reparameterize(g: GaussianDiag, eps: torch.Tensor) -> torch.Tensor:
    """z = mean + sqrt(variance) * eps, elementwise."""
    if tuple(eps.shape) != tuple(g.mean.shape):
        raise ValueError(
            f"eps shape {tuple(eps.shape)} != gaussian shape {tuple(g.mean.shape)}"
        )
    return g.mean + torch.sqrt(g.variance) * eps


def inject_latent_noise(
    z: torch.Tensor, enabled: bool, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Perturb the latent with N(0, 1/(2*pi*e) I) noise when enabled."""
    if not enabled:
        return z
    noise = torch.randn(z.shape, generator=generator, dtype=z.dtype)
    return z + math.sqrt(LATENT_NOISE_VARIANCE) * noise


class UtilityDecoder(nn.Module):
    """g_theta: latent to reconstruction (pixel logits or embedding vector)."""

    def __init__(self, spec: NetworkSpec, mode: str = "embedding"):
        super().__init__()
        if mode not in ("image", "embedding"):
            raise ValueError(f"unknown decoder mode {mode!r}")
        self.mode = mode
        self.net = _Mlp(spec)
        self.spec = spec

    def forward(self, z):
        return self.net(_flatten(z, self.spec.input_dim))


def decode_utility(dec: UtilityDecoder, z) -> torch.Tensor:
    return dec(z)


class SensitiveClassifier(nn.Module):
    """g_xi: latent to a pmf over the sensitive attribute."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.net = _Mlp(spec)
        self.spec = spec

    def forward(self, z) -> torch.Tensor:
        return torch.softmax(self.net(_flatten(z, self.spec.input_dim)), dim=-1)


def classify_sensitive(cls: SensitiveClassifier, z) -> torch.Tensor:
    return cls(z)


def _check_onehot(s_onehot: torch.Tensor, n_classes: int) -> torch.Tensor:
    if s_onehot.ndim == 1:
        s_onehot = s_onehot.unsqueeze(0)
    if s_onehot.shape[-1] != n_classes:
        raise ValueError(f"one-hot width {s_onehot.shape[-1]} != |S| = {n_classes}")
    binary = ((s_onehot == 0) | (s_onehot == 1)).all()
    if not binary or not torch.all(s_onehot.sum(dim=-1) == 1):
        raise ValueError("rows must be valid one-hot vectors")
    return s_onehot


class FiLMGenerator(nn.Module):
    """g_phi': conditional generator whose hidden activations are scaled
    and shifted per layer by gamma(s), beta(s) heads driven by one-hot S.

    The modulation heads start at the identity (gamma = 1, beta = 0), so
    a freshly built generator reproduces an unmodulated decoder with the
    same backbone weights.
    """

    def __init__(self, spec: NetworkSpec, n_classes: int, mode: str = "embedding"):
        super().__init__()
        if mode not in ("image", "embedding"):
            raise ValueError(f"unknown generator mode {mode!r}")
        self.mode = mode
        self.spec = spec
        self.n_classes = n_classes
        self.hidden, width = _hidden_stack(spec)
        self.act = _activation(spec.activation)
        self.dropout = nn.Dropout(spec.dropout_rate)
        self.out = nn.Linear(width, spec.output_dim)
        self.gamma_heads = nn.ModuleList()
        self.beta_heads = nn.ModuleList()
        for w in spec.hidden_widths:
            gamma = nn.Linear(n_classes, w)
            nn.init.zeros_(gamma.weight)
            nn.init.ones_(gamma.bias)
            beta = nn.Linear(n_classes, w)
            nn.init.zeros_(beta.weight)
            nn.init.zeros_(beta.bias)
            self.gamma_heads.append(gamma)
            self.beta_heads.append(beta)

    def forward(self, z, s_onehot):
        s_onehot = _check_onehot(torch.as_tensor(s_onehot, dtype=torch.float32),
                                 self.n_classes)
        h = _flatten(z, self.spec.input_dim)
        for layer, gamma_head, beta_head in zip(
            self.hidden, self.gamma_heads, self.beta_heads
        ):
            h = gamma_head(s_onehot) * layer(h) + beta_head(s_onehot)
            h = self.dropout(self.act(h))
        return self.out(h)


def film_generate(gen: FiLMGenerator, z, s_onehot) -> torch.Tensor:
    return gen(z, s_onehot)


class PriorGenerator(nn.Module):
    """g_psi: maps standard-normal noise to a diagonal-Gaussian prior."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.hidden, width = _hidden_stack(spec)
        self.act = _activation(spec.activation)
        self.mean_head = nn.Linear(width, spec.output_dim)
        self.logvar_head = nn.Linear(width, spec.output_dim)

    def forward(self, noise) -> GaussianDiag:
        h = _flatten(noise, self.spec.input_dim)
        for layer in self.hidden:
            h = self.act(layer(h))
        logvar = self.logvar_head(h).clamp(-12.0, 12.0)
        return GaussianDiag(mean=self.mean_head(h), variance=torch.exp(logvar))


def sample_prior(
    pg: Optional[PriorGenerator],
    noise: torch.Tensor,
    eps: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> tuple[GaussianDiag, torch.Tensor]:
    """Draw (prior Gaussian, reparameterized latent) from g_psi.

    ``pg=None`` selects the fixed standard-normal prior: the returned
    Gaussian is N(0, I) and the latent is the noise itself.
    """
    if pg is None:
        shape = noise.shape
        return (
            GaussianDiag(mean=torch.zeros(shape), variance=torch.ones(shape)),
            noise,
        )
    g = pg(noise)
    if eps is None:
        eps = torch.randn(g.mean.shape, generator=generator, dtype=g.mean.dtype)
    return g, reparameterize(g, eps)


class Discriminator(nn.Module):
    """Binary density-ratio critic with a strictly interior sigmoid output."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        if spec.output_dim != 1:
            raise ValueError("discriminators emit a single score")
        self.net = _Mlp(spec)
        self.spec = spec

    def forward(self, x) -> torch.Tensor:
        score = torch.sigmoid(self.net(_flatten(x, self.spec.input_dim)))
        return score.clamp(1e-7, 1.0 - 1e-7).squeeze(-1)


def discriminate(d: Discriminator, x) -> torch.Tensor:
    return d(torch.as_tensor(x, dtype=torch.float32))
