"""Alternating six-step training loops for both funnel models.

Each minibatch iteration runs exactly the steps below, in order:

  1. encoder + utility decoder + uncertainty network on the step-1 loss
  2. latent-space discriminator (encoder samples vs prior samples)
  3. encoder + prior generator adversarially against step 2's critic
  4. utility-output discriminator (real data vs decoded prior samples)
  5. prior generator + decoders adversarially against the output critics
  6. the uncertainty-output discriminator (sensitive-space critic for the
     discriminative model; the data-space critic against conditional
     generations for the generative model)

With ``prior_mode="fixed_standard"`` the prior generator is bypassed:
steps 2-3 become no-ops and prior latents are drawn from N(0, I).

The module also owns bundle persistence: ``metadata.json`` plus one
weight file per network in a little-endian flat-float32 format with a
shape header (see WEIGHTS_MAGIC below), chosen so round trips are
forward-pass exact.
"""

from __future__ import annotations

import datetime
import json
import math
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import torch

from .data import LabeledDataset, onehot
from .infotheory import GaussianDiag
from .models import (
    Discriminator,
    Encoder,
    FiLMGenerator,
    NetworkSpec,
    PriorGenerator,
    SensitiveClassifier,
    UtilityDecoder,
    inject_latent_noise,
    reparameterize,
    sample_prior,
)
from .objectives import (
    discriminator_loss,
    generator_adversarial_loss,
    p1_step1_loss,
    p2_step1_loss,
)

GRAD_CLIP_NORM = 5.0
DEFAULT_LR = 1e-4

WEIGHTS_MAGIC = b"PFWT0001"

METRICS_COLUMNS = (
    "iteration",
    "alpha",
    "step1_total",
    "reconstruction",
    "leakage_term",
    "d_eta",
    "d_omega",
    "d_tau",
)


class TrainingDiverged(RuntimeError):
    """Raised when a step loss becomes non-finite."""

    def __init__(self, step: int, iteration: int, value: float):
        self.step = step
        self.iteration = iteration
        self.value = value
        super().__init__(
            f"non-finite loss {value!r} at step {step} of iteration {iteration}"
        )


@dataclass(frozen=True)
class TrainConfig:
    model: str  # "dispf" or "genpf"
    epochs: int
    batch_size: int = 128
    d_z: int = 16
    alpha_start: float = 0.0
    alpha_end: float = 0.0
    linear_increment: float = 0.0
    learning_rates: dict = field(default_factory=dict)
    prior_mode: str = "learned"  # or "fixed_standard"
    noise_enabled: bool = True
    dropout_rate: float = 0.1
    dis_mode: str = "bernoulli"  # or "mse"
    seed: int = 0
    hidden_widths: tuple = (256, 256)
    analytic_kl_enabled: bool = True

    def __post_init__(self):
        if self.model not in ("dispf", "genpf"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.alpha_start <= self.alpha_end:
            raise ValueError("need 0 <= alpha_start <= alpha_end")
        if self.prior_mode not in ("learned", "fixed_standard"):
            raise ValueError(f"unknown prior_mode {self.prior_mode!r}")
        if self.dis_mode not in ("bernoulli", "mse"):
            raise ValueError(f"unknown dis_mode {self.dis_mode!r}")

    def lr(self, group: str) -> float:
        return float(
            self.learning_rates.get(group, self.learning_rates.get("default", DEFAULT_LR))
        )


@dataclass(frozen=True)
class AlphaSchedule:
    """Linear warm-up for the first third of training, then logistic
    approach to the final value."""

    num_epochs: int
    alpha_start: float
    alpha_end: float
    linear_increment: float = 0.0
    steepness: Optional[float] = None

    def __post_init__(self):
        if self.num_epochs < 0:
            raise ValueError("num_epochs must be >= 0")
        if not 0 <= self.alpha_start <= self.alpha_end:
            raise ValueError("need 0 <= alpha_start <= alpha_end")
        if self.linear_increment < 0:
            raise ValueError("linear_increment must be >= 0")
        if self.steepness is not None and self.steepness <= 0:
            raise ValueError("steepness must be positive")

    @property
    def linear_epochs(self) -> int:
        return self.num_epochs // 3

    def _steepness(self) -> float:
        if self.steepness is not None:
            return self.steepness
        # ensures alpha(num_epochs) lands within 1% of alpha_end
        return 10.0 / max(1, self.num_epochs - self.linear_epochs)

    def alpha_at(self, epoch: int) -> float:
        if not 0 <= epoch <= max(self.num_epochs, 0):
            raise ValueError(f"epoch {epoch} outside [0, {self.num_epochs}]")
        e1 = self.linear_epochs
        linear = min(self.alpha_start + self.linear_increment * min(epoch, e1),
                     self.alpha_end)
        if epoch < e1 or self.num_epochs == 0:
            return linear
        alpha1 = min(self.alpha_start + self.linear_increment * e1, self.alpha_end)
        k = self._steepness()
        logistic = 2.0 / (1.0 + math.exp(-k * (epoch - e1))) - 1.0
        return alpha1 + (self.alpha_end - alpha1) * logistic


def alpha_at(schedule: AlphaSchedule, epoch: int) -> float:
    return schedule.alpha_at(epoch)


@dataclass
class PFNetworks:
    """All trainable networks of one funnel model, keyed by group name."""

    encoder: Encoder
    decoder: UtilityDecoder
    uncertainty: torch.nn.Module  # SensitiveClassifier (P1) or FiLMGenerator (P2)
    prior: Optional[PriorGenerator]
    d_eta: Discriminator
    d_omega: Discriminator
    d_tau: Optional[Discriminator]

    def groups(self) -> dict:
        out = {
            "encoder": self.encoder,
            "decoder": self.decoder,
            "uncertainty": self.uncertainty,
            "d_eta": self.d_eta,
            "d_omega": self.d_omega,
        }
        if self.prior is not None:
            out["prior"] = self.prior
        if self.d_tau is not None:
            out["d_tau"] = self.d_tau
        return out

    def eval(self):
        for net in self.groups().values():
            net.eval()
        return self


def build_networks(cfg: TrainConfig, data_dim: int, n_classes: int, mode: str) -> PFNetworks:
    hidden = tuple(cfg.hidden_widths)
    enc = Encoder(NetworkSpec(data_dim, hidden, cfg.d_z, cfg.dropout_rate))
    dec = UtilityDecoder(
        NetworkSpec(cfg.d_z, hidden, data_dim, cfg.dropout_rate), mode=mode
    )
    if cfg.model == "dispf":
        unc: torch.nn.Module = SensitiveClassifier(
            NetworkSpec(cfg.d_z, hidden, n_classes, cfg.dropout_rate)
        )
        d_tau = Discriminator(NetworkSpec(n_classes, (64,), 1))
    else:
        unc = FiLMGenerator(
            NetworkSpec(cfg.d_z, hidden, data_dim, cfg.dropout_rate),
            n_classes=n_classes,
            mode=mode,
        )
        d_tau = None
    prior = (
        PriorGenerator(NetworkSpec(cfg.d_z, (64,), cfg.d_z))
        if cfg.prior_mode == "learned"
        else None
    )
    d_eta = Discriminator(NetworkSpec(cfg.d_z, (64,), 1))
    d_omega = Discriminator(NetworkSpec(data_dim, hidden[:1], 1))
    return PFNetworks(enc, dec, unc, prior, d_eta, d_omega, d_tau)


@dataclass
class ModuleBundle:
    """Persisted trained networks plus the plug-and-play metadata card."""

    networks: PFNetworks
    metadata: dict
    metrics: list = field(default_factory=list)

    @property
    def model_kind(self) -> str:
        return self.metadata["model_kind"]

    @property
    def data_shape(self) -> tuple:
        return tuple(self.metadata["architecture"]["data_shape"])

    def _prep(self, x) -> torch.Tensor:
        arr = np.asarray(x, dtype=np.float32).reshape(len(x), -1)
        return torch.as_tensor(arr)

    def release(self, x, sample: bool = True, seed: int = 0) -> np.ndarray:
        """The representation handed to downstream consumers: a seeded
        reparameterized draw from the encoder posterior (or its mean)."""
        self.networks.eval()
        with torch.no_grad():
            g = self.networks.encoder(self._prep(x))
            if not sample:
                return g.mean.numpy()
            gen = torch.Generator().manual_seed(seed)
            eps = torch.randn(g.mean.shape, generator=gen)
            return reparameterize(g, eps).numpy()

    def posterior_kl_to_standard(self, x) -> float:
        """Mean KL(posterior || N(0, I)) in nats: the complexity proxy."""
        from .objectives import gaussian_kl

        self.networks.eval()
        with torch.no_grad():
            g = self.networks.encoder(self._prep(x))
            std = GaussianDiag(torch.zeros_like(g.mean), torch.ones_like(g.variance))
            return float(gaussian_kl(g, std))

    def reconstruct(self, x) -> np.ndarray:
        self.networks.eval()
        with torch.no_grad():
            g = self.networks.encoder(self._prep(x))
            out = self.networks.decoder(g.mean)
            if self.networks.decoder.mode == "image":
                out = torch.sigmoid(out)
            return out.numpy().reshape((len(x),) + self.data_shape)

    def generate_conditional(self, n: int, s_label: int, seed: int = 0) -> np.ndarray:
        """Conditional generations from prior latents (generative model)."""
        if self.model_kind != "genpf":
            raise ValueError("conditional generation requires a genpf bundle")
        self.networks.eval()
        arch = self.metadata["architecture"]
        gen = torch.Generator().manual_seed(seed)
        noise = torch.randn(n, arch["d_z"], generator=gen)
        with torch.no_grad():
            _, z = sample_prior(self.networks.prior, noise, eps=torch.randn(
                n, arch["d_z"], generator=gen))
            s = torch.as_tensor(onehot(np.full(n, s_label), arch["n_classes"]))
            out = self.networks.uncertainty(z, s)
            if self.networks.uncertainty.mode == "image":
                out = torch.sigmoid(out)
            return out.numpy().reshape((n,) + self.data_shape)


def _clip_and_step(optimizers: list, params: list) -> None:
    torch.nn.utils.clip_grad_norm_(params, GRAD_CLIP_NORM)
    for opt in optimizers:
        opt.step()


def _check_finite(value: float, step: int, iteration: int) -> float:
    if not math.isfinite(value):
        raise TrainingDiverged(step, iteration, value)
    return value


def _make_metadata(cfg: TrainConfig, ds: LabeledDataset, dataset_name: str,
                   final_alpha: float, mode: str, data_dim: int) -> dict:
    return {
        "dataset_name": dataset_name,
        "sensitive_attribute": ds.sensitive_name,
        "alpha": final_alpha,
        "latent_dim": cfg.d_z,
        "backbone": "mlp",
        "loss_function": cfg.dis_mode,
        "backbone_trained_dataset": "none",
        "model_kind": cfg.model,
        "seed": cfg.seed,
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "architecture": {
            "mode": mode,
            "data_shape": list(ds.features.shape[1:]),
            "data_dim": data_dim,
            "d_z": cfg.d_z,
            "n_classes": ds.n_sensitive_classes,
            "hidden_widths": list(cfg.hidden_widths),
            "dropout_rate": cfg.dropout_rate,
            "prior_mode": cfg.prior_mode,
            "dis_mode": cfg.dis_mode,
            "model": cfg.model,
        },
    }


def _train(cfg: TrainConfig, ds: LabeledDataset, dataset_name: str,
           step_hook: Optional[Callable] = None) -> ModuleBundle:
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    if ds.sensitive is None or len(np.unique(ds.sensitive)) < 1:
        raise ValueError("dataset must carry sensitive labels")

    mode = "image" if ds.is_image else "embedding"
    features = ds.flat_features()
    data_dim = features.shape[1]
    n_classes = ds.n_sensitive_classes

    torch.manual_seed(cfg.seed)
    nets = build_networks(cfg, data_dim, n_classes, mode)
    sample_gen = torch.Generator().manual_seed(cfg.seed + 1)
    batch_rng = np.random.default_rng(cfg.seed + 2)

    groups = nets.groups()
    optimizers = {
        name: torch.optim.Adam(net.parameters(), lr=cfg.lr(name))
        for name, net in groups.items()
    }

    schedule = AlphaSchedule(
        num_epochs=cfg.epochs,
        alpha_start=cfg.alpha_start,
        alpha_end=cfg.alpha_end,
        linear_increment=cfg.linear_increment,
    )

    x_all = torch.as_tensor(features)
    s_all = torch.as_tensor(ds.sensitive)
    s_onehot_all = torch.as_tensor(onehot(ds.sensitive, n_classes))
    n = len(ds)
    m = min(cfg.batch_size, n)
    iters_per_epoch = n // m
    learned_prior = cfg.prior_mode == "learned"
    is_p1 = cfg.model == "dispf"

    def randn(*shape):
        return torch.randn(*shape, generator=sample_gen)

    def encode_sample(x):
        g = nets.encoder(x)
        z = reparameterize(g, randn(*g.mean.shape))
        return g, inject_latent_noise(z, cfg.noise_enabled, sample_gen)

    def prior_sample():
        noise = randn(m, cfg.d_z)
        return sample_prior(nets.prior, noise, eps=randn(m, cfg.d_z))

    def run_step(step_no, names, loss_fn, iteration):
        opts = [optimizers[nm] for nm in names]
        for opt in opts:
            opt.zero_grad()
        loss = loss_fn()
        loss_value = _check_finite(float(loss.detach()), step_no, iteration)
        loss.backward()
        params = [p for nm in names for p in groups[nm].parameters()]
        _clip_and_step(opts, params)
        if step_hook is not None:
            step_hook(step_no, nets)
        return loss_value

    metrics = []
    iteration = 0
    for net in groups.values():
        net.train()

    for epoch in range(cfg.epochs):
        alpha = schedule.alpha_at(epoch)
        order = batch_rng.permutation(n)
        for b in range(iters_per_epoch):
            idx = torch.as_tensor(order[b * m : (b + 1) * m])
            x = x_all[idx]
            s = s_all[idx]
            s_hot = s_onehot_all[idx]
            breakdown = None
            d_eta_val = float("nan")
            d_omega_val = float("nan")
            d_tau_val = float("nan")

            # (1) encoder, utility decoder, uncertainty network
            def step1():
                nonlocal breakdown
                g, z = encode_sample(x)
                x_hat = nets.decoder(z)
                if is_p1:
                    probs = nets.uncertainty(z)
                    breakdown = p1_step1_loss(x, x_hat, s, probs, alpha, cfg.dis_mode)
                else:
                    x_tilde = nets.uncertainty(z, s_hot)
                    if learned_prior:
                        prior_g, _ = prior_sample()
                    else:
                        prior_g = GaussianDiag(
                            torch.zeros_like(g.mean), torch.ones_like(g.variance)
                        )
                    if not cfg.analytic_kl_enabled:
                        prior_g = GaussianDiag(
                            g.mean.detach().clone(), g.variance.detach().clone()
                        )
                    breakdown = p2_step1_loss(
                        x, x_hat, x_tilde, g, prior_g, alpha, cfg.dis_mode
                    )
                return breakdown.total

            step1_names = ["encoder", "decoder", "uncertainty"]
            step1_total = run_step(1, step1_names, step1, iteration)

            if learned_prior:
                # (2) latent-space discriminator
                def step2():
                    with torch.no_grad():
                        _, z_enc = encode_sample(x)
                        _, z_prior = prior_sample()
                    return discriminator_loss(nets.d_eta(z_enc), nets.d_eta(z_prior))

                d_eta_val = run_step(2, ["d_eta"], step2, iteration)

                # (3) encoder and prior generator against the latent critic
                def step3():
                    _, z_enc = encode_sample(x)
                    _, z_prior = prior_sample()
                    return generator_adversarial_loss(
                        nets.d_eta(z_prior)
                    ) + generator_adversarial_loss(1.0 - nets.d_eta(z_enc))

                run_step(3, ["encoder", "prior"], step3, iteration)

            # (4) utility-output discriminator
            def step4():
                with torch.no_grad():
                    _, z_prior = prior_sample()
                    x_fake = nets.decoder(z_prior)
                return discriminator_loss(nets.d_omega(x), nets.d_omega(x_fake))

            d_omega_val = run_step(4, ["d_omega"], step4, iteration)

            # (5) prior generator and decoders against the output critics
            def step5():
                _, z_prior = prior_sample()
                x_fake = nets.decoder(z_prior)
                loss = generator_adversarial_loss(nets.d_omega(x_fake))
                if is_p1:
                    s_fake = nets.uncertainty(z_prior)
                    loss = loss + generator_adversarial_loss(nets.d_tau(s_fake))
                else:
                    x_cond = nets.uncertainty(z_prior, s_hot)
                    loss = loss + generator_adversarial_loss(nets.d_omega(x_cond))
                return loss

            step5_names = ["decoder", "uncertainty"] + (["prior"] if learned_prior else [])
            run_step(5, step5_names, step5, iteration)

            # (6) uncertainty-output discriminator
            if is_p1:
                def step6():
                    with torch.no_grad():
                        _, z_prior = prior_sample()
                        s_fake = nets.uncertainty(z_prior)
                    return discriminator_loss(nets.d_tau(s_hot), nets.d_tau(s_fake))

                d_tau_val = run_step(6, ["d_tau"], step6, iteration)
            else:
                def step6():
                    with torch.no_grad():
                        _, z_prior = prior_sample()
                        x_cond = nets.uncertainty(z_prior, s_hot)
                    return discriminator_loss(nets.d_omega(x), nets.d_omega(x_cond))

                run_step(6, ["d_omega"], step6, iteration)

            metrics.append(
                {
                    "iteration": iteration,
                    "alpha": alpha,
                    "step1_total": step1_total,
                    "reconstruction": breakdown.reconstruction,
                    "leakage_term": step1_total - breakdown.reconstruction,
                    "d_eta": d_eta_val,
                    "d_omega": d_omega_val,
                    "d_tau": d_tau_val,
                }
            )
            iteration += 1

    nets.eval()
    final_alpha = schedule.alpha_at(cfg.epochs) if cfg.epochs > 0 else cfg.alpha_start
    metadata = _make_metadata(cfg, ds, dataset_name, final_alpha, mode, data_dim)
    return ModuleBundle(networks=nets, metadata=metadata, metrics=metrics)


def train_dispf(cfg: TrainConfig, ds: LabeledDataset, dataset_name: str = "synthetic",
                step_hook: Optional[Callable] = None) -> ModuleBundle:
    """Train the discriminative funnel model (release representations)."""
    if cfg.model != "dispf":
        raise ValueError("config model must be 'dispf'")
    return _train(cfg, ds, dataset_name, step_hook)


def train_genpf(cfg: TrainConfig, ds: LabeledDataset, dataset_name: str = "synthetic",
                step_hook: Optional[Callable] = None) -> ModuleBundle:
    """Train the generative funnel model (conditional synthesis)."""
    if cfg.model != "genpf":
        raise ValueError("config model must be 'genpf'")
    return _train(cfg, ds, dataset_name, step_hook)


def write_metrics_csv(metrics: list, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for row in metrics:
            fh.write(
                ",".join(
                    format(row[c], ".10g") if c != "iteration" else str(row[c])
                    for c in METRICS_COLUMNS
                )
                + "\n"
            )


def _write_tensors(path, named_tensors) -> None:
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(named_tensors)))
        for name, tensor in named_tensors:
            data = tensor.detach().cpu().to(torch.float32).numpy()
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f4").tobytes())


def _read_tensors(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(WEIGHTS_MAGIC) + 4 or raw[: len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weight file (bad magic)")
    offset = len(WEIGHTS_MAGIC)
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    tensors = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            numel = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=numel, offset=offset)
            offset += numel * 4
            tensors[name] = torch.from_numpy(arr.copy().reshape(shape))
    except (struct.error, UnicodeDecodeError) as exc:
        raise ValueError(f"{path}: corrupt weight file ({exc})") from exc
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes in weight file")
    return tensors


def save_bundle(bundle: ModuleBundle, dir_path) -> None:
    """Write metadata.json (canonical key order) and one weight file per
    network into ``dir_path``."""
    os.makedirs(dir_path, exist_ok=True)
    meta_path = os.path.join(dir_path, "metadata.json")
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(bundle.metadata, fh, sort_keys=True, indent=2)
        fh.write("\n")
    for name, net in bundle.networks.groups().items():
        _write_tensors(
            os.path.join(dir_path, f"{name}.weights"),
            list(net.state_dict().items()),
        )


def load_bundle(dir_path) -> ModuleBundle:
    meta_path = os.path.join(dir_path, "metadata.json")
    if not os.path.exists(meta_path):
        raise FileNotFoundError(f"bundle is missing metadata.json in {dir_path}")
    with open(meta_path, "r", encoding="utf-8") as fh:
        metadata = json.load(fh)
    arch = metadata["architecture"]
    cfg = TrainConfig(
        model=arch["model"],
        epochs=0,
        d_z=arch["d_z"],
        prior_mode=arch["prior_mode"],
        dropout_rate=arch["dropout_rate"],
        dis_mode=arch["dis_mode"],
        hidden_widths=tuple(arch["hidden_widths"]),
    )
    nets = build_networks(cfg, arch["data_dim"], arch["n_classes"], arch["mode"])
    for name, net in nets.groups().items():
        path = os.path.join(dir_path, f"{name}.weights")
        if not os.path.exists(path):
            raise FileNotFoundError(f"bundle is missing weight file {name}.weights")
        tensors = _read_tensors(path)
        net.load_state_dict(tensors)
    nets.eval()
    return ModuleBundle(networks=nets, metadata=metadata)
