"""The measurement layer for trained funnel bundles.

Leakage is always measured with estimators that share nothing with the
training-time networks: a deterministic regularized multinomial linear
probe (the proxy adversary), a plug-in classifier MI lower bound, the
neural DV estimator, and cosine-similarity verification metrics. The
alpha sweep ties these together into the obfuscation-utility trade-off
report.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .data import LabeledDataset, onehot, split
from .mine import MineConfig, train_mine
from .training import ModuleBundle, TrainConfig, train_dispf, train_genpf

TRADEOFF_COLUMNS = ("alpha", "utility", "leakage_bits", "adversary_acc")


@dataclass(frozen=True)
class TradeoffPoint:
    """One row of the obfuscation-utility curve."""

    alpha: float
    utility_metric: float
    leakage_mi_bits: float
    adversary_acc: float
    model_kind: str
    complexity_nats: float = float("nan")

    def __post_init__(self):
        if not 0.0 <= self.adversary_acc <= 1.0:
            raise ValueError("adversary accuracy must lie in [0, 1]")


@dataclass(frozen=True)
class VerificationResult:
    threshold: float
    fmr: float
    tmr: float
    acc: float
    n_genuine: int
    n_imposter: int

    def __post_init__(self):
        for name in ("fmr", "tmr", "acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.n_genuine <= 0 or self.n_imposter <= 0:
            raise ValueError("pair counts must be positive")


def label_entropy(labels, base: float = 2.0) -> float:
    """Plug-in entropy of the empirical label distribution."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("labels must be non-empty")
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    h = float(-np.sum(p * np.log(p)))
    return h / math.log(2) if base == 2 else h


class LinearProbe:
    """Deterministic L2-regularized multinomial logistic regression,
    fitted with full-batch L-BFGS from a zero start."""

    def __init__(self, l2: float = 1e-2, max_iter: int = 200):
        self.l2 = l2
        self.max_iter = max_iter
        self.weights = None
        self.mu = None
        self.sd = None
        self.n_classes = 0

    def _design(self, z: np.ndarray) -> np.ndarray:
        zs = (z - self.mu) / self.sd
        return np.hstack([zs, np.ones((zs.shape[0], 1))])

    def fit(self, z, labels, n_classes: Optional[int] = None) -> "LinearProbe":
        z = np.asarray(z, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if z.ndim != 2 or z.shape[0] != labels.shape[0]:
            raise ValueError("z must be (n, d) with one label per row")
        self.n_classes = int(n_classes or labels.max() + 1)
        self.mu = z.mean(axis=0)
        self.sd = np.maximum(z.std(axis=0), 1e-8)
        design = self._design(z)
        n, d1 = design.shape
        k = self.n_classes
        y = onehot(labels, k).astype(np.float64)

        def objective(w_flat):
            w = w_flat.reshape(d1, k)
            logits = design @ w
            lse = logsumexp(logits, axis=1)
            ce = float(np.mean(lse - np.sum(logits * y, axis=1)))
            probs = np.exp(logits - lse[:, None])
            grad = design.T @ (probs - y) / n
            # bias row is unregularized
            reg = 0.5 * self.l2 * float(np.sum(w[:-1] ** 2))
            grad[:-1] += self.l2 * w[:-1]
            return ce + reg, grad.ravel()

        result = minimize(
            objective,
            np.zeros(d1 * k),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": self.max_iter},
        )
        self.weights = result.x.reshape(d1, k)
        return self

    def predict_proba(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        logits = self._design(z) @ self.weights
        return np.exp(logits - logsumexp(logits, axis=1)[:, None])

    def accuracy(self, z, labels) -> float:
        preds = self.predict_proba(z).argmax(axis=1)
        return float(np.mean(preds == np.asarray(labels)))


def adversary_accuracy(z_train, s_train, z_test, s_test) -> float:
    """Test accuracy of an independent linear classifier trained to
    recover the sensitive attribute from released representations."""
    z_train = np.asarray(z_train, dtype=np.float64)
    z_test = np.asarray(z_test, dtype=np.float64)
    s_train = np.asarray(s_train, dtype=np.int64)
    s_test = np.asarray(s_test, dtype=np.int64)
    if len(z_train) == 0 or len(z_test) == 0:
        raise ValueError("both splits must be non-empty")
    if z_train.shape[1] != z_test.shape[1]:
        raise ValueError("train and test feature dims differ")
    classes = np.unique(s_train)
    if classes.size == 1:
        warnings.warn(
            "single-class training set; reporting majority-class accuracy",
            RuntimeWarning,
        )
        return float(np.mean(s_test == classes[0]))
    n_classes = int(max(s_train.max(), s_test.max())) + 1
    probe = LinearProbe().fit(z_train, s_train, n_classes=n_classes)
    return probe.accuracy(z_test, s_test)


def _split_indices(n: int, train_fraction: float, seed: int):
    order = np.random.default_rng(seed).permutation(n)
    cut = max(1, int(round(train_fraction * n)))
    cut = min(cut, n - 1)
    return order[:cut], order[cut:]


def leakage_mi(z, s, method: str = "plugin_classifier", seed: int = 0) -> float:
    """Estimated I(S;Z) in bits, clipped to [0, H(S)].

    ``plugin_classifier``: H(S) - Hce(S|Z) from the linear probe's
    held-out posteriors. ``mine``: the neural DV estimate on (z,
    one-hot s).
    """
    z = np.asarray(z, dtype=np.float64)
    s = np.asarray(s, dtype=np.int64)
    if z.shape[0] != s.shape[0]:
        raise ValueError("z and s must be paired")
    h_s = label_entropy(s, base=2)
    n_classes = int(s.max()) + 1

    if method == "plugin_classifier":
        tr, te = _split_indices(len(s), 0.7, seed)
        probe = LinearProbe().fit(z[tr], s[tr], n_classes=n_classes)
        probs = probe.predict_proba(z[te])
        picked = np.maximum(probs[np.arange(len(te)), s[te]], 1e-12)
        h_ce_bits = float(-np.mean(np.log2(picked)))
        mi = h_s - h_ce_bits
    elif method == "mine":
        cfg = MineConfig(
            dim_x=z.shape[1],
            dim_y=n_classes,
            hidden_size=64,
            batch_size=min(256, max(2, len(s) // 4)),
            n_iterations=1200,
            n_window=300,
            seed=seed,
        )
        est = train_mine(cfg, z, onehot(s, n_classes))
        mi = est.windowed_estimate() / math.log(2)
    else:
        raise ValueError(f"unknown leakage method {method!r}")
    return float(np.clip(mi, 0.0, h_s))


def _pair_similarities(embeddings, identities, max_pairs: int, seed: int):
    emb = np.asarray(embeddings, dtype=np.float64)
    ids = np.asarray(identities)
    if emb.shape[0] != ids.shape[0]:
        raise ValueError("one identity per embedding row required")
    if np.unique(ids).size < 2:
        raise ValueError("need at least two identities")
    norms = np.linalg.norm(emb, axis=1)
    unit = emb / np.maximum(norms, 1e-12)[:, None]
    sims = unit @ unit.T
    iu, ju = np.triu_indices(len(ids), k=1)
    same = ids[iu] == ids[ju]
    genuine = sims[iu[same], ju[same]]
    imposter = sims[iu[~same], ju[~same]]
    if genuine.size == 0 or imposter.size == 0:
        raise ValueError("need at least one genuine and one imposter pair")
    rng = np.random.default_rng(seed)
    if genuine.size > max_pairs:
        genuine = genuine[rng.choice(genuine.size, max_pairs, replace=False)]
    if imposter.size > max_pairs:
        imposter = imposter[rng.choice(imposter.size, max_pairs, replace=False)]
    return genuine, imposter


def verification_metrics(
    embeddings,
    identities,
    thresholds: Optional[Sequence[float]] = None,
    max_pairs: int = 100_000,
    seed: int = 0,
) -> list[VerificationResult]:
    """FMR/TMR/Acc over a cosine-similarity threshold sweep.

    All genuine (same identity) and imposter (different identity) pairs
    are formed, subsampled to ``max_pairs`` each; a pair is accepted at a
    threshold when its similarity is >= the threshold.
    """
    genuine, imposter = _pair_similarities(embeddings, identities, max_pairs, seed)
    if thresholds is None:
        thresholds = np.linspace(-1.0, 1.0, 201)
    results = []
    for t in thresholds:
        ta = int(np.sum(genuine >= t))
        fa = int(np.sum(imposter >= t))
        tn = imposter.size - fa
        results.append(
            VerificationResult(
                threshold=float(t),
                fmr=fa / imposter.size,
                tmr=ta / genuine.size,
                acc=(ta + tn) / (genuine.size + imposter.size),
                n_genuine=int(genuine.size),
                n_imposter=int(imposter.size),
            )
        )
    return results


def tmr_at_fmr(results: Sequence[VerificationResult], target: float = 0.1) -> VerificationResult:
    """The result at the threshold whose FMR is closest below the target
    (or the smallest-FMR threshold when none is below)."""
    if not results:
        raise ValueError("no verification results")
    below = [r for r in results if r.fmr <= target]
    if below:
        return max(below, key=lambda r: (r.fmr, r.tmr))
    return min(results, key=lambda r: r.fmr)


def _release_splits(bundle: ModuleBundle, train: LabeledDataset,
                    test: LabeledDataset, seed: int):
    z_train = bundle.release(train.features, sample=True, seed=seed)
    z_test = bundle.release(test.features, sample=True, seed=seed + 1)
    return z_train, z_test


def tradeoff_sweep(
    cfg: TrainConfig,
    alphas: Sequence[float],
    ds: LabeledDataset,
    dataset_name: str = "synthetic",
    utility: str = "classification",  # or "tmr"
    leakage_method: str = "plugin_classifier",
    eval_seed: int = 0,
    out_csv=None,
    keep_bundles: bool = False,
):
    """Train one bundle per alpha (shared seed) and measure utility,
    leakage and adversary accuracy on held-out data.

    Utility is identity-classification accuracy by default, or
    verification TMR@FMR=0.1 with ``utility="tmr"``. Each point also
    carries the mean posterior-to-standard-prior KL as the information
    complexity proxy.
    """
    if len(alphas) < 1:
        raise ValueError("need at least one alpha")
    if utility not in ("classification", "tmr"):
        raise ValueError(f"unknown utility metric {utility!r}")
    train_fn = train_dispf if cfg.model == "dispf" else train_genpf
    train, test = split(ds, (0.8, 0.2), seed=cfg.seed)

    points = []
    bundles = []
    for alpha in alphas:
        cfg_a = replace(
            cfg, alpha_start=min(cfg.alpha_start, alpha), alpha_end=float(alpha)
        )
        bundle = train_fn(cfg_a, train, dataset_name=dataset_name)
        z_train, z_test = _release_splits(bundle, train, test, eval_seed)

        adv = adversary_accuracy(z_train, train.sensitive, z_test, test.sensitive)

        z_all = np.vstack([z_train, z_test])
        s_all = np.concatenate([train.sensitive, test.sensitive])
        leak = leakage_mi(z_all, s_all, method=leakage_method, seed=eval_seed)

        if ds.identity is None:
            warnings.warn("dataset has no identity labels; utility reported as nan",
                          RuntimeWarning)
            util = float("nan")
        elif utility == "classification":
            n_ids = int(max(train.identity.max(), test.identity.max())) + 1
            probe = LinearProbe().fit(z_train, train.identity, n_classes=n_ids)
            util = probe.accuracy(z_test, test.identity)
        else:
            results = verification_metrics(z_test, test.identity, seed=eval_seed)
            util = tmr_at_fmr(results, target=0.1).tmr

        points.append(
            TradeoffPoint(
                alpha=float(alpha),
                utility_metric=util,
                leakage_mi_bits=leak,
                adversary_acc=adv,
                model_kind=cfg.model,
                complexity_nats=bundle.posterior_kl_to_standard(test.features),
            )
        )
        if keep_bundles:
            bundles.append(bundle)

    if out_csv is not None:
        write_tradeoff_csv(points, out_csv)
    return (points, bundles) if keep_bundles else points


def write_tradeoff_csv(points: Sequence[TradeoffPoint], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(TRADEOFF_COLUMNS) + "\n")
        for p in points:
            row = (p.alpha, p.utility_metric, p.leakage_mi_bits, p.adversary_acc)
            fh.write(",".join(format(v, ".10g") for v in row) + "\n")


def plot_tradeoff(points: Sequence[TradeoffPoint], path) -> None:
    """Optional PNG of the trade-off curve (requires matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    alphas = [p.alpha for p in points]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(alphas, [p.utility_metric for p in points], "o-", label="utility")
    ax1.plot(alphas, [p.adversary_acc for p in points], "s-", label="adversary acc")
    ax1.set_xscale("log")
    ax1.set_xlabel("alpha")
    ax1.set_ylabel("accuracy")
    ax2 = ax1.twinx()
    ax2.plot(alphas, [p.leakage_mi_bits for p in points], "^--", color="tab:red",
             label="leakage (bits)")
    ax2.set_ylabel("leakage MI (bits)")
    lines, labels = ax1.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax1.legend(lines + lines2, labels + labels2, loc="center right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
