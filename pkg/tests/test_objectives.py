import math

import pytest
import torch

from privfunnel.infotheory import GaussianDiag
from privfunnel.objectives import (
    LossBreakdown,
    discriminator_loss,
    distortion,
    gaussian_kl,
    generator_adversarial_loss,
    p1_step1_loss,
    p2_step1_loss,
)


class TestDistortion:
    def test_mse_simple(self):
        x = torch.zeros(2, 4)
        x_hat = torch.ones(2, 4)
        assert distortion(x, x_hat, "mse").item() == pytest.approx(1.0)

    def test_bernoulli_matches_manual(self):
        x = torch.tensor([[1.0, 0.0]])
        logits = torch.tensor([[0.0, 0.0]])
        # -log sigmoid(0) per pixel, summed
        assert distortion(x, logits, "bernoulli").item() == pytest.approx(
            2 * math.log(2), abs=1e-6
        )

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            distortion(torch.zeros(2, 3), torch.zeros(2, 4), "mse")


class TestGaussianKlTorch:
    def test_matches_numpy_oracle(self):
        import numpy as np

        from privfunnel.infotheory import kl_gaussian_diag

        rng = np.random.default_rng(0)
        mp, vp = rng.normal(size=5), np.exp(rng.normal(size=5))
        mq, vq = rng.normal(size=5), np.exp(rng.normal(size=5))
        expected = kl_gaussian_diag(GaussianDiag(mp, vp), GaussianDiag(mq, vq))
        got = gaussian_kl(
            GaussianDiag(torch.tensor(mp), torch.tensor(vp)),
            GaussianDiag(torch.tensor(mq), torch.tensor(vq)),
        )
        assert got.item() == pytest.approx(expected, abs=1e-10)

    def test_batched_mean(self):
        g = GaussianDiag(torch.zeros(4, 3), torch.ones(4, 3))
        std = GaussianDiag(torch.zeros(4, 3), torch.ones(4, 3))
        assert gaussian_kl(g, std).item() == 0.0


class TestP1Step1:
    def test_alpha_zero_is_autoencoder(self):
        x = torch.zeros(3, 2)
        x_hat = torch.ones(3, 2)
        probs = torch.full((3, 2), 0.5)
        lb = p1_step1_loss(x, x_hat, torch.zeros(3, dtype=torch.long), probs, 0.0, "mse")
        assert lb.total.item() == pytest.approx(lb.reconstruction)
        assert lb.kl_prior is None

    def test_perfect_recon_uniform_classifier(self):
        x = torch.rand(4, 3)
        probs = torch.full((4, 5), 0.2)
        lb = p1_step1_loss(x, x.clone(), torch.zeros(4, dtype=torch.long), probs, 2.0, "mse")
        assert lb.total.item() == pytest.approx(2.0 * math.log(0.2), abs=1e-6)
        assert lb.total.item() < 0

    def test_arithmetic_oracle(self):
        # dis = 2.0, p(s_true) = 0.5, alpha = 1 -> 2.0 + ln 0.5
        x = torch.zeros(1, 1)
        x_hat = torch.full((1, 1), math.sqrt(2.0))
        probs = torch.tensor([[0.5, 0.5]])
        lb = p1_step1_loss(x, x_hat, torch.tensor([0]), probs, 1.0, "mse")
        assert lb.total.item() == pytest.approx(2.0 + math.log(0.5), abs=1e-5)
        assert lb.total.item() == pytest.approx(1.30685, abs=1e-4)

    def test_zero_probability_clamped_with_warning(self):
        x = torch.zeros(1, 1)
        probs = torch.tensor([[0.0, 1.0]])
        with pytest.warns(RuntimeWarning):
            lb = p1_step1_loss(x, x, torch.tensor([0]), probs, 1.0, "mse")
        assert math.isfinite(lb.total.item())

    def test_rejects_negative_alpha(self):
        x = torch.zeros(1, 1)
        with pytest.raises(ValueError):
            p1_step1_loss(x, x, torch.tensor([0]), torch.tensor([[1.0]]), -1.0, "mse")


class TestP2Step1:
    def _std(self, n=2, d=3):
        return GaussianDiag(torch.zeros(n, d), torch.ones(n, d))

    def test_alpha_zero_reconstruction_only(self):
        x = torch.zeros(2, 3)
        x_hat = torch.ones(2, 3)
        lb = p2_step1_loss(x, x_hat, x_hat, self._std(), self._std(), 0.0, "mse")
        assert lb.total.item() == pytest.approx(1.0)

    def test_perfect_everything_is_zero(self):
        x = torch.rand(2, 3)
        lb = p2_step1_loss(x, x, x, self._std(), self._std(), 5.0, "mse")
        assert lb.total.item() == pytest.approx(0.0, abs=1e-7)

    def test_arithmetic_oracle(self):
        # dis(x,x_hat)=1, KL=0.5, dis(x,x_tilde)=2, alpha=10 -> 26
        x = torch.zeros(1, 1)
        x_hat = torch.ones(1, 1)
        x_tilde = torch.full((1, 1), math.sqrt(2.0))
        posterior = GaussianDiag(torch.ones(1, 1), torch.ones(1, 1))
        prior = GaussianDiag(torch.zeros(1, 1), torch.ones(1, 1))
        lb = p2_step1_loss(x, x_hat, x_tilde, posterior, prior, 10.0, "mse")
        assert lb.kl_prior == pytest.approx(0.5, abs=1e-6)
        assert lb.total.item() == pytest.approx(26.0, abs=1e-4)

    def test_monotone_in_alpha(self):
        x = torch.zeros(2, 3)
        x_hat = torch.ones(2, 3)
        posterior = GaussianDiag(torch.ones(2, 4), torch.ones(2, 4))
        prior = GaussianDiag(torch.zeros(2, 4), torch.ones(2, 4))
        values = [
            p2_step1_loss(x, x_hat, x_hat, posterior, prior, a, "mse").total.item()
            for a in (0.0, 0.5, 1.0, 2.0, 10.0)
        ]
        assert values == sorted(values)


class TestBreakdownInvariant:
    def test_total_reconstructs_from_parts(self):
        torch.manual_seed(0)
        x = torch.rand(4, 6)
        x_hat = torch.randn(4, 6)
        x_tilde = torch.randn(4, 6)
        posterior = GaussianDiag(torch.randn(4, 3), torch.rand(4, 3) + 0.1)
        prior = GaussianDiag(torch.randn(4, 3), torch.rand(4, 3) + 0.1)
        lb = p2_step1_loss(x, x_hat, x_tilde, posterior, prior, 3.0, "mse")
        assert lb.total.item() == pytest.approx(lb.parts_total(), abs=1e-9)

        probs = torch.softmax(torch.randn(4, 3), dim=1)
        lb1 = p1_step1_loss(x, x_hat, torch.tensor([0, 1, 2, 0]), probs, 0.7, "mse")
        assert lb1.total.item() == pytest.approx(lb1.parts_total(), abs=1e-9)


class TestAdversarialLosses:
    def test_uninformed_discriminator(self):
        half = torch.full((4,), 0.5)
        assert discriminator_loss(half, half).item() == pytest.approx(
            2 * math.log(2), abs=1e-6
        )

    def test_perfect_discrimination_near_zero(self):
        real = torch.full((4,), 1.0 - 1e-7)
        fake = torch.full((4,), 1e-7)
        assert discriminator_loss(real, fake).item() == pytest.approx(0.0, abs=1e-5)

    def test_discriminator_arithmetic_oracle(self):
        real = torch.tensor([0.9, 0.8])
        fake = torch.tensor([0.1, 0.2])
        expected = (  # mean(-ln 0.9, -ln 0.8) + mean(-ln 0.9, -ln 0.8)
            -(math.log(0.9) + math.log(0.8)) / 2
        ) * 2
        got = discriminator_loss(real, fake).item()
        assert got == pytest.approx(expected, abs=1e-6)
        assert got == pytest.approx(0.32850, abs=1e-4)

    def test_discriminator_loss_nonnegative(self):
        torch.manual_seed(1)
        for _ in range(50):
            real = torch.rand(8).clamp(1e-4, 1 - 1e-4)
            fake = torch.rand(8).clamp(1e-4, 1 - 1e-4)
            assert discriminator_loss(real, fake).item() >= 0

    def test_generator_loss_values(self):
        assert generator_adversarial_loss(torch.full((3,), 0.5)).item() == pytest.approx(
            math.log(2), abs=1e-6
        )
        assert generator_adversarial_loss(
            torch.full((3,), 1.0 - 1e-7)
        ).item() == pytest.approx(0.0, abs=1e-5)
        got = generator_adversarial_loss(torch.tensor([0.25, 0.75])).item()
        assert got == pytest.approx(-(math.log(0.25) + math.log(0.75)) / 2, abs=1e-6)
        assert got == pytest.approx(0.83699, abs=1e-4)

    def test_extreme_scores_clamped_finite(self):
        loss = discriminator_loss(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0]))
        assert math.isfinite(loss.item())
        assert math.isfinite(generator_adversarial_loss(torch.tensor([0.0])).item())
