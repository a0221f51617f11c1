import hashlib
import json

import numpy as np
import pytest
import torch

from privfunnel.data import ColoredDigitConfig, LabeledDataset, generate_colored_digits
from privfunnel.training import (
    AlphaSchedule,
    ModuleBundle,
    TrainConfig,
    TrainingDiverged,
    alpha_at,
    load_bundle,
    save_bundle,
    train_dispf,
    train_genpf,
    write_metrics_csv,
)


@pytest.fixture(scope="module")
def digits():
    return generate_colored_digits(ColoredDigitConfig(n=512, seed=0))


def tiny_cfg(**overrides):
    base = dict(
        model="dispf",
        epochs=1,
        batch_size=64,
        d_z=8,
        alpha_start=0.5,
        alpha_end=0.5,
        hidden_widths=(32,),
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestAlphaSchedule:
    def test_endpoints(self):
        s = AlphaSchedule(num_epochs=30, alpha_start=0.0, alpha_end=10.0,
                          linear_increment=0.2)
        assert alpha_at(s, 0) == 0.0
        assert abs(alpha_at(s, 30) - 10.0) <= 0.01 * 10.0

    def test_monotone_non_decreasing(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            epochs = int(rng.integers(3, 60))
            start = float(rng.uniform(0, 2))
            end = start + float(rng.uniform(0.5, 10))
            inc = float(rng.uniform(0, 1))
            s = AlphaSchedule(epochs, start, end, inc)
            values = [alpha_at(s, e) for e in range(epochs + 1)]
            assert values[0] == start
            assert abs(values[-1] - end) <= 0.01 * end
            assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))

    def test_linear_phase_uses_increment(self):
        s = AlphaSchedule(num_epochs=30, alpha_start=1.0, alpha_end=10.0,
                          linear_increment=0.5)
        assert alpha_at(s, 4) == pytest.approx(3.0)

    def test_linear_phase_capped_at_alpha_end(self):
        s = AlphaSchedule(num_epochs=30, alpha_start=0.0, alpha_end=2.0,
                          linear_increment=5.0)
        assert alpha_at(s, 9) == pytest.approx(2.0)

    def test_epoch_out_of_range(self):
        s = AlphaSchedule(num_epochs=5, alpha_start=0.0, alpha_end=1.0)
        with pytest.raises(ValueError):
            alpha_at(s, 6)
        with pytest.raises(ValueError):
            alpha_at(s, -1)

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            AlphaSchedule(num_epochs=5, alpha_start=2.0, alpha_end=1.0)
        with pytest.raises(ValueError):
            AlphaSchedule(num_epochs=5, alpha_start=0.0, alpha_end=1.0,
                          linear_increment=-0.1)


class TestConfigValidation:
    def test_unknown_model(self):
        with pytest.raises(ValueError):
            tiny_cfg(model="vae")

    def test_alpha_ordering(self):
        with pytest.raises(ValueError):
            tiny_cfg(alpha_start=2.0, alpha_end=1.0)

    def test_learning_rate_lookup(self):
        cfg = tiny_cfg(learning_rates={"encoder": 3e-4, "default": 1e-3})
        assert cfg.lr("encoder") == 3e-4
        assert cfg.lr("decoder") == 1e-3
        assert tiny_cfg().lr("decoder") == 1e-4


class TestStepSequence:
    def test_six_steps_in_order(self, digits):
        steps = []
        train_dispf(tiny_cfg(), digits, step_hook=lambda s, n: steps.append(s))
        iters = len(steps) // 6
        assert steps == [1, 2, 3, 4, 5, 6] * iters
        assert iters == len(digits) // 64

    def test_fixed_prior_skips_latent_gan(self, digits):
        steps = []
        train_dispf(
            tiny_cfg(prior_mode="fixed_standard"),
            digits,
            step_hook=lambda s, n: steps.append(s),
        )
        iters = len(steps) // 4
        assert steps == [1, 4, 5, 6] * iters

    def test_genpf_sequence(self, digits):
        steps = []
        train_genpf(
            tiny_cfg(model="genpf"), digits, step_hook=lambda s, n: steps.append(s)
        )
        assert steps[:6] == [1, 2, 3, 4, 5, 6]

    def test_untouched_groups_unchanged_per_step(self, digits):
        # hash every group after each step; a step may only change the
        # groups it names
        allowed = {
            1: {"encoder", "decoder", "uncertainty"},
            2: {"d_eta"},
            3: {"encoder", "prior"},
            4: {"d_omega"},
            5: {"decoder", "uncertainty", "prior"},
            6: {"d_tau"},
        }

        def group_hashes(nets):
            out = {}
            for name, net in nets.groups().items():
                h = hashlib.sha256()
                for p in net.parameters():
                    h.update(p.detach().numpy().tobytes())
                out[name] = h.hexdigest()
            return out

        snapshots = []
        train_dispf(
            tiny_cfg(epochs=1, batch_size=256),
            digits,
            step_hook=lambda s, n: snapshots.append((s, group_hashes(n))),
        )
        prev = None
        for step, hashes in snapshots:
            if prev is not None:
                changed = {k for k in hashes if hashes[k] != prev[k]}
                assert changed <= allowed[step], (step, changed)
            prev = hashes


class TestTrainingContracts:
    def test_zero_epochs_initial_bundle(self, digits):
        bundle = train_dispf(tiny_cfg(epochs=0), digits)
        assert bundle.metrics == []
        assert bundle.metadata["model_kind"] == "dispf"
        assert bundle.metadata["alpha"] == 0.5

    def test_determinism_same_seed(self, digits):
        cfg = tiny_cfg(epochs=1)
        a = train_dispf(cfg, digits)
        b = train_dispf(cfg, digits)
        assert a.metrics == b.metrics
        for (na, pa), (nb, pb) in zip(
            a.networks.groups().items(), b.networks.groups().items()
        ):
            assert na == nb
            for ta, tb in zip(pa.state_dict().values(), pb.state_dict().values()):
                assert torch.equal(ta, tb)

    def test_different_seed_differs(self, digits):
        a = train_dispf(tiny_cfg(epochs=1, seed=0), digits)
        b = train_dispf(tiny_cfg(epochs=1, seed=1), digits)
        assert a.metrics != b.metrics

    def test_metadata_alpha_is_final_schedule_value(self, digits):
        cfg = tiny_cfg(epochs=6, alpha_start=0.0, alpha_end=4.0)
        bundle = train_dispf(cfg, digits)
        assert bundle.metadata["alpha"] == pytest.approx(4.0, rel=0.01)

    def test_autoencoder_limit_reconstruction_decreases(self):
        # alpha = 0, fixed standard prior: step 1 is a plain autoencoder
        ds = generate_colored_digits(ColoredDigitConfig(n=1280, seed=3))
        cfg = TrainConfig(
            model="dispf",
            epochs=10,
            batch_size=128,
            d_z=8,
            alpha_start=0.0,
            alpha_end=0.0,
            prior_mode="fixed_standard",
            hidden_widths=(64,),
            learning_rates={"default": 1e-3},
            seed=0,
        )
        bundle = train_dispf(cfg, ds)
        assert len(bundle.metrics) == 100
        first = np.mean([r["reconstruction"] for r in bundle.metrics[:10]])
        last = np.mean([r["reconstruction"] for r in bundle.metrics[-10:]])
        assert last < first

    def test_empty_dataset_rejected(self):
        ds = LabeledDataset(
            features=np.zeros((0, 4), dtype=np.float32),
            sensitive=np.zeros(0, dtype=np.int64),
        )
        with pytest.raises(ValueError):
            train_dispf(tiny_cfg(), ds)

    def test_model_kind_mismatch_rejected(self, digits):
        with pytest.raises(ValueError):
            train_genpf(tiny_cfg(model="dispf"), digits)
        with pytest.raises(ValueError):
            train_dispf(tiny_cfg(model="genpf"), digits)

    def test_divergence_reports_step_and_iteration(self, digits):
        cfg = tiny_cfg(epochs=1, learning_rates={"default": 1e18})
        with pytest.raises(TrainingDiverged) as err:
            train_dispf(cfg, digits)
        assert 1 <= err.value.step <= 6
        assert err.value.iteration >= 0

    def test_embedding_mode_runs(self):
        rng = np.random.default_rng(5)
        ds = LabeledDataset(
            features=rng.normal(size=(256, 12)).astype(np.float32),
            sensitive=rng.integers(0, 2, size=256),
        )
        cfg = tiny_cfg(epochs=1, dis_mode="mse", d_z=4)
        bundle = train_dispf(cfg, ds)
        assert bundle.metadata["architecture"]["mode"] == "embedding"
        z = bundle.release(ds.features[:10])
        assert z.shape == (10, 4)


class TestMetricsCsv:
    def test_header_and_rows(self, digits, tmp_path):
        bundle = train_dispf(tiny_cfg(epochs=1), digits)
        path = tmp_path / "metrics.csv"
        write_metrics_csv(bundle.metrics, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == (
            "iteration,alpha,step1_total,reconstruction,leakage_term,"
            "d_eta,d_omega,d_tau"
        )
        assert len(lines) == 1 + len(bundle.metrics)

    def test_zero_epoch_empty_body(self, digits, tmp_path):
        bundle = train_dispf(tiny_cfg(epochs=0), digits)
        path = tmp_path / "metrics.csv"
        write_metrics_csv(bundle.metrics, path)
        assert len(path.read_text().strip().split("\n")) == 1

    def test_byte_identical_across_runs(self, digits, tmp_path):
        cfg = tiny_cfg(epochs=1)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_metrics_csv(train_dispf(cfg, digits).metrics, p1)
        write_metrics_csv(train_dispf(cfg, digits).metrics, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestBundlePersistence:
    def test_round_trip_forward_exact(self, digits, tmp_path):
        bundle = train_dispf(tiny_cfg(epochs=1), digits)
        save_bundle(bundle, tmp_path / "b")
        loaded = load_bundle(tmp_path / "b")
        probe = digits.features[:8]
        np.testing.assert_array_equal(
            bundle.release(probe, sample=False), loaded.release(probe, sample=False)
        )
        np.testing.assert_array_equal(bundle.reconstruct(probe), loaded.reconstruct(probe))

    def test_genpf_round_trip(self, digits, tmp_path):
        bundle = train_genpf(tiny_cfg(model="genpf", epochs=1), digits)
        save_bundle(bundle, tmp_path / "g")
        loaded = load_bundle(tmp_path / "g")
        a = bundle.generate_conditional(4, s_label=0, seed=1)
        b = loaded.generate_conditional(4, s_label=0, seed=1)
        np.testing.assert_array_equal(a, b)

    def test_missing_metadata_named(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(FileNotFoundError, match="metadata.json"):
            load_bundle(tmp_path / "empty")

    def test_missing_weight_file_named(self, digits, tmp_path):
        bundle = train_dispf(tiny_cfg(epochs=0), digits)
        save_bundle(bundle, tmp_path / "b")
        (tmp_path / "b" / "encoder.weights").unlink()
        with pytest.raises(FileNotFoundError, match="encoder.weights"):
            load_bundle(tmp_path / "b")

    def test_corrupt_weight_file(self, digits, tmp_path):
        bundle = train_dispf(tiny_cfg(epochs=0), digits)
        save_bundle(bundle, tmp_path / "b")
        path = tmp_path / "b" / "encoder.weights"
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(ValueError, match="magic"):
            load_bundle(tmp_path / "b")

    def test_metadata_canonical_and_complete(self, digits, tmp_path):
        bundle = train_dispf(tiny_cfg(epochs=0), digits)
        save_bundle(bundle, tmp_path / "b")
        text = (tmp_path / "b" / "metadata.json").read_text()
        meta = json.loads(text)
        for key in (
            "dataset_name",
            "sensitive_attribute",
            "alpha",
            "latent_dim",
            "backbone",
            "loss_function",
            "backbone_trained_dataset",
            "model_kind",
            "seed",
            "created_at",
        ):
            assert key in meta and meta[key] != ""
        assert json.dumps(meta, sort_keys=True, indent=2) + "\n" == text
