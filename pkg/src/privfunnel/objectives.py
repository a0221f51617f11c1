"""Loss assembly for every step of the two six-step training loops.

All functions are pure and differentiable; they return either a scalar
torch tensor (adversarial losses) or a LossBreakdown whose ``total``
carries the autograd graph while the named parts are detached floats for
logging. Sign convention: every returned total is minimized.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from .infotheory import GaussianDiag

SCORE_EPS = 1e-7
PROB_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    """Named parts of a step-1 objective.

    total = reconstruction + alpha * (kl_prior or 0) + alpha * uncertainty_term,
    where ``uncertainty_term`` is the mean true-label log-probability of
    the sensitive classifier (discriminative model) or the conditional
    generator's distortion (generative model).
    """

    reconstruction: float
    uncertainty_term: float
    alpha: float
    total: torch.Tensor
    kl_prior: Optional[float] = None
    adversarial_terms: dict = field(default_factory=dict)

    def parts_total(self) -> float:
        return (
            self.reconstruction
            + self.alpha * (self.kl_prior or 0.0)
            + self.alpha * self.uncertainty_term
        )


def distortion(x: torch.Tensor, x_hat: torch.Tensor, mode: str) -> torch.Tensor:
    """dis(x, x_hat): per-pixel Bernoulli cross-entropy summed over pixels
    (image mode, x_hat holds logits) or mean squared error (embedding
    mode); averaged over the batch either way."""
    x = x.reshape(x.shape[0], -1)
    x_hat = x_hat.reshape(x_hat.shape[0], -1)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if mode == "bernoulli":
        return F.binary_cross_entropy_with_logits(
            x_hat, x, reduction="none"
        ).sum(dim=1).mean()
    if mode == "mse":
        return ((x - x_hat) ** 2).mean(dim=1).mean()
    raise ValueError(f"unknown distortion mode {mode!r}")


def gaussian_kl(posterior: GaussianDiag, prior: GaussianDiag) -> torch.Tensor:
    """Batched closed-form KL(posterior || prior) between diagonal
    Gaussians, summed over latent dims and averaged over the batch."""
    mp, vp = posterior.mean, posterior.variance
    mq, vq = prior.mean, prior.variance
    per_dim = torch.log(vq / vp) + (vp + (mp - mq) ** 2) / vq - 1.0
    kl = 0.5 * per_dim.sum(dim=-1)
    return kl.mean() if kl.ndim > 0 else kl


def p1_step1_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    s_true: torch.Tensor,
    s_probs: torch.Tensor,
    alpha: float,
    dis_mode: str = "bernoulli",
) -> LossBreakdown:
    """Discriminative step-1 objective, minimized over encoder, utility
    decoder and sensitive classifier:

        dis(x, x_hat) + alpha * mean(log P(s_true | z)).

    Driving the second term down simultaneously improves reconstruction
    likelihood and pushes the classifier's confidence on the true
    sensitive label toward zero.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    recon = distortion(x, x_hat, dis_mode).double()
    picked = s_probs.gather(1, s_true.view(-1, 1)).squeeze(1)
    if bool((picked < PROB_FLOOR).any()):
        warnings.warn(
            "classifier probability at the true label fell below 1e-12; clamped",
            RuntimeWarning,
        )
    log_term = torch.log(picked.clamp_min(PROB_FLOOR)).mean().double()
    # scalars are combined in float64 so the breakdown reconstructs total exactly
    total = recon + alpha * log_term
    return LossBreakdown(
        reconstruction=float(recon.detach()),
        uncertainty_term=float(log_term.detach()),
        alpha=float(alpha),
        total=total,
    )


def p2_step1_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    x_tilde: torch.Tensor,
    posterior: GaussianDiag,
    prior: GaussianDiag,
    alpha: float,
    dis_mode: str = "bernoulli",
) -> LossBreakdown:
    """Generative step-1 objective, minimized over encoder, utility
    decoder and conditional (uncertainty) generator:

        dis(x, x_hat) + alpha * KL(posterior || prior) + alpha * dis(x, x_tilde).
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    recon = distortion(x, x_hat, dis_mode).double()
    kl = gaussian_kl(posterior, prior).double()
    cond = distortion(x, x_tilde, dis_mode).double()
    total = recon + alpha * kl + alpha * cond
    return LossBreakdown(
        reconstruction=float(recon.detach()),
        uncertainty_term=float(cond.detach()),
        alpha=float(alpha),
        total=total,
        kl_prior=float(kl.detach()),
    )


def _clamp_scores(scores: torch.Tensor) -> torch.Tensor:
    scores = torch.as_tensor(scores, dtype=torch.float32) if not torch.is_tensor(scores) else scores
    return scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)


def discriminator_loss(real_scores, fake_scores) -> torch.Tensor:
    """mean(-log D(real)) + mean(-log(1 - D(fake))), minimized by the
    discriminator; used verbatim for the latent, utility-output and
    sensitive-space discriminators."""
    real = _clamp_scores(real_scores)
    fake = _clamp_scores(fake_scores)
    return (-torch.log(real)).mean() + (-torch.log(1.0 - fake)).mean()


def generator_adversarial_loss(fake_scores) -> torch.Tensor:
    """Non-saturating generator objective mean(-log D(fake)) for samples
    the generator wants classified as real."""
    fake = _clamp_scores(fake_scores)
    return (-torch.log(fake)).mean()
