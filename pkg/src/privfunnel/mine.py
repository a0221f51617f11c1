"""Mutual Information Neural Estimation.

A critic network T(x, y) is trained by gradient ascent on the
Donsker-Varadhan lower bound mean(T_joint) - log(mean(exp(T_marginal))),
with the gradient of the log-partition term bias-corrected through an
exponential moving average of exp(T). Marginal batches are formed by
permuting y within the joint batch. The reported estimate is the mean of
the last ``n_window`` per-iteration values, in nats.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .infotheory import dv_value


class EstimatorDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass
class MineConfig:
    dim_x: int
    dim_y: int
    hidden_size: int = 100
    network_type: str = "mlp"
    batch_size: int = 256
    n_iterations: int = 2000
    n_window: int = 200
    n_verbose: int = 0  # 0 silences progress printing
    moving_average_rate: float = 0.01
    learning_rate: float = 1e-3
    lr_decay_gamma: float = 0.98
    lr_decay_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.network_type != "mlp":
            raise ValueError(f"unsupported network_type {self.network_type!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.n_window > self.n_iterations:
            raise ValueError("n_window must not exceed n_iterations")
        if not 0.0 < self.moving_average_rate <= 1.0:
            raise ValueError("moving_average_rate must lie in (0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


class _Critic(nn.Module):
    """Two-hidden-layer MLP on the concatenated (x, y) pair."""

    def __init__(self, dim_x: int, dim_y: int, hidden_size: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim_x + dim_y, hidden_size),
            nn.ELU(),
            nn.Linear(hidden_size, hidden_size),
            nn.ELU(),
            nn.Linear(hidden_size, 1),
        )
        for m in self.net:
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x, y):
        return self.net(torch.cat([x, y], dim=1)).squeeze(-1)


@dataclass
class MineEstimator:
    config: MineConfig
    critic: _Critic
    moving_average_exp_t: float = 1.0
    history: list = field(default_factory=list)

    def batch_values(self, x, y, seed: int = 0):
        """Per-batch DV values over an evaluation set (deterministic)."""
        x, y = _validate_samples(self.config, x, y, minimum=2)
        rng = np.random.default_rng(seed)
        self.critic.eval()
        values = []
        n = x.shape[0]
        bs = self.config.batch_size
        with torch.no_grad():
            for start in range(0, n, bs):
                xb = torch.as_tensor(x[start : start + bs], dtype=torch.float32)
                yb = torch.as_tensor(y[start : start + bs], dtype=torch.float32)
                if xb.shape[0] < 2:
                    continue
                perm = rng.permutation(xb.shape[0])
                t_joint = self.critic(xb, yb).numpy()
                t_marg = self.critic(xb, yb[perm]).numpy()
                values.append(dv_value(t_joint, t_marg))
        return values

    def windowed_estimate(self) -> float:
        window = self.history[-self.config.n_window :]
        return float(np.mean(window))


def _validate_samples(config: MineConfig, x, y, minimum: int):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y must have the same number of rows")
    if x.shape[1] != config.dim_x or y.shape[1] != config.dim_y:
        raise ValueError(
            f"sample dims ({x.shape[1]}, {y.shape[1]}) do not match config "
            f"({config.dim_x}, {config.dim_y})"
        )
    if x.shape[0] < minimum:
        raise ValueError(f"need at least {minimum} paired samples, got {x.shape[0]}")
    return x, y


def train_mine(config: MineConfig, x, y) -> MineEstimator:
    """Fit the critic on paired samples and return the trained estimator."""
    x, y = _validate_samples(config, x, y, minimum=2 * config.batch_size)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    critic = _Critic(config.dim_x, config.dim_y, config.hidden_size)
    est = MineEstimator(config=config, critic=critic)

    optimizer = torch.optim.Adam(critic.parameters(), lr=config.learning_rate)
    scheduler = torch.optim.lr_scheduler.StepLR(
        optimizer, step_size=config.lr_decay_every, gamma=config.lr_decay_gamma
    )

    x_t = torch.as_tensor(x, dtype=torch.float32)
    y_t = torch.as_tensor(y, dtype=torch.float32)
    n = x_t.shape[0]

    critic.train()
    for it in range(config.n_iterations):
        idx = rng.choice(n, size=config.batch_size, replace=False)
        perm = rng.permutation(config.batch_size)
        xb = x_t[idx]
        yb = y_t[idx]
        y_tilde = yb[perm]

        t_joint = critic(xb, yb)
        t_marg = critic(xb, y_tilde)

        mean_t = t_joint.mean()
        mean_exp = torch.exp(t_marg).mean()

        est.moving_average_exp_t = float(
            (1.0 - config.moving_average_rate) * est.moving_average_exp_t
            + config.moving_average_rate * mean_exp.item()
        )

        # Bias-corrected gradient: grad(mean_exp)/ema approximates
        # grad(log E[exp T]) when the moving average tracks E[exp T].
        loss = -(mean_t - mean_exp / est.moving_average_exp_t)
        mi_estimate = (mean_t - torch.log(mean_exp)).item()

        if not np.isfinite(loss.item()) or not np.isfinite(mi_estimate):
            raise EstimatorDiverged(
                f"non-finite loss at iteration {it}: loss={loss.item()!r}, "
                f"mi={mi_estimate!r}, ema={est.moving_average_exp_t!r}"
            )

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        scheduler.step()

        est.history.append(mi_estimate)
        if config.n_verbose and (it + 1) % config.n_verbose == 0:
            window = est.history[-config.n_window :]
            print(f"iter {it + 1}: MI ~ {np.mean(window):.4f} nats")

    critic.eval()
    return est


def estimate_mi(est: MineEstimator, x, y, seed: int = 0) -> float:
    """Average batched DV value of a trained estimator on fresh samples, in nats."""
    values = est.batch_values(x, y, seed=seed)
    if not values:
        raise ValueError("evaluation set too small for a single batch")
    return float(np.mean(values))
