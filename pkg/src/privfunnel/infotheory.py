"""Exact information-theoretic quantities on finite distributions.

Everything in this module is computed by direct summation over finite
supports or by closed-form Gaussian formulas, so it serves as the ground
truth against which the neural estimators and variational bounds are
checked. All internal computation is in nats; entropy-style functions
accept a ``base`` argument for reporting in bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LN2 = math.log(2.0)

# Probabilities below this are treated as exact zeros (0*log0 := 0).
ZERO_MASS = 1e-15

# Variance of the latent perturbation noise whose differential entropy
# is exactly zero: (d/2)*ln(2*pi*e*var) = 0 iff var = 1/(2*pi*e).
LATENT_NOISE_VARIANCE = 1.0 / (2.0 * math.pi * math.e)


def _as_float_array(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _xlogx(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    mask = p > ZERO_MASS
    out[mask] = p[mask] * np.log(p[mask])
    return out


def _plugin_entropy(p: np.ndarray) -> float:
    """Entropy in nats of an (unnormalized-tolerant) probability array."""
    return float(-np.sum(_xlogx(p)))


@dataclass(frozen=True)
class Pmf:
    """A probability mass function over a finite alphabet."""

    probs: np.ndarray

    def __post_init__(self):
        probs = _as_float_array(self.probs, "probs")
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("probs must be a non-empty vector")
        if np.any(probs < 0):
            raise ValueError("probs must be non-negative")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"probs must sum to 1, got {probs.sum()!r}")
        object.__setattr__(self, "probs", probs)

    def __len__(self) -> int:
        return self.probs.size


@dataclass(frozen=True)
class GaussianDiag:
    """Diagonal-covariance Gaussian: a mean vector and a variance vector.

    The fields may be numpy arrays or torch tensors (the container only
    checks shape agreement and positivity); the closed-form operations in
    this module expect numpy.
    """

    mean: object
    variance: object

    def __post_init__(self):
        if tuple(self.mean.shape) != tuple(self.variance.shape):
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != variance shape "
                f"{tuple(self.variance.shape)}"
            )
        if bool((self.variance <= 0).any()):
            raise ValueError("variance entries must be strictly positive")

    @property
    def dim(self) -> int:
        return int(self.mean.shape[-1])


@dataclass(frozen=True)
class DiscreteTriple:
    """Exact finite joint P(S,X) plus release channel P(Z|X).

    The induced joint P(s,x,z) = P(s,x) * P(z|x) satisfies the Markov
    chain S - X - Z by construction, so I(S;Z|X) = 0 holds exactly.
    """

    joint_sx: np.ndarray
    channel_zx: np.ndarray

    def __post_init__(self):
        joint = _as_float_array(self.joint_sx, "joint_sx")
        channel = _as_float_array(self.channel_zx, "channel_zx")
        if joint.ndim != 2 or channel.ndim != 2:
            raise ValueError("joint_sx and channel_zx must be matrices")
        if joint.shape[1] != channel.shape[0]:
            raise ValueError(
                f"joint_sx has {joint.shape[1]} x-states but channel_zx has "
                f"{channel.shape[0]} rows"
            )
        if np.any(joint < 0) or np.any(channel < 0):
            raise ValueError("probabilities must be non-negative")
        if abs(joint.sum() - 1.0) > 1e-12:
            raise ValueError("joint_sx must sum to 1")
        row_sums = channel.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > 1e-12):
            raise ValueError("every row of channel_zx must sum to 1")
        object.__setattr__(self, "joint_sx", joint)
        object.__setattr__(self, "channel_zx", channel)

    @property
    def n_s(self) -> int:
        return self.joint_sx.shape[0]

    @property
    def n_x(self) -> int:
        return self.joint_sx.shape[1]

    @property
    def n_z(self) -> int:
        return self.channel_zx.shape[1]

    def joint_sxz(self) -> np.ndarray:
        """The induced joint as an (|S|, |X|, |Z|) array."""
        return self.joint_sx[:, :, None] * self.channel_zx[None, :, :]

    @classmethod
    def random(cls, n_s: int, n_x: int, n_z: int, rng: np.random.Generator) -> "DiscreteTriple":
        joint = rng.random((n_s, n_x)) + 1e-3
        joint /= joint.sum()
        channel = rng.random((n_x, n_z)) + 1e-3
        channel /= channel.sum(axis=1, keepdims=True)
        return cls(joint, channel)

    @classmethod
    def from_text(cls, path) -> "DiscreteTriple":
        """Read a triple from a plain-text matrix file.

        Layout: a header line ``n_s n_x n_z``, then n_s rows of the joint
        P(S,X) (n_x entries each), then n_x rows of the channel P(Z|X)
        (n_z entries each). Rows are whitespace-separated decimals; blank
        lines and lines starting with ``#`` are ignored.
        """
        with open(path, "r", encoding="utf-8") as fh:
            rows = [
                line.split()
                for line in fh
                if line.strip() and not line.lstrip().startswith("#")
            ]
        if not rows:
            raise ValueError(f"{path}: empty triple file")
        try:
            n_s, n_x, n_z = (int(v) for v in rows[0])
        except ValueError as exc:
            raise ValueError(f"{path}: bad header line {rows[0]!r}") from exc
        body = rows[1:]
        if len(body) != n_s + n_x:
            raise ValueError(
                f"{path}: expected {n_s + n_x} matrix rows, found {len(body)}"
            )
        joint = np.array([[float(v) for v in r] for r in body[:n_s]])
        channel = np.array([[float(v) for v in r] for r in body[n_s:]])
        if joint.shape != (n_s, n_x) or channel.shape != (n_x, n_z):
            raise ValueError(f"{path}: matrix rows do not match header dims")
        return cls(joint, channel)


@dataclass(frozen=True)
class InfoDecomposition:
    """The leakage decomposition I(S;Z) = I(X;Z) - H(X|S) + H(X|S,Z), in nats."""

    i_sz: float
    i_xz: float
    h_x_given_s: float
    h_x_given_sz: float

    def identity_gap(self) -> float:
        return abs(self.i_sz - (self.i_xz - self.h_x_given_s + self.h_x_given_sz))


def shannon_entropy(p: Pmf, base: float = 2.0) -> float:
    """Entropy -sum p_i log p_i of a pmf, in the requested base (2 or e)."""
    if base not in (2, 2.0, math.e):
        raise ValueError("base must be 2 or e")
    h = _plugin_entropy(p.probs)
    return h / LN2 if base == 2 else h


def kl_gaussian_diag(p: GaussianDiag, q: GaussianDiag) -> float:
    """Closed-form KL(p || q) in nats between diagonal Gaussians.

    0.5 * sum_i [ ln(vq_i/vp_i) + (vp_i + (mp_i - mq_i)^2) / vq_i - 1 ],
    which is non-negative and vanishes exactly when p == q.
    """
    mp = _as_float_array(p.mean, "p.mean")
    vp = _as_float_array(p.variance, "p.variance")
    mq = _as_float_array(q.mean, "q.mean")
    vq = _as_float_array(q.variance, "q.variance")
    if mp.shape != mq.shape:
        raise ValueError(f"dimension mismatch: {mp.shape} vs {mq.shape}")
    terms = np.log(vq / vp) + (vp + (mp - mq) ** 2) / vq - 1.0
    return float(0.5 * terms.sum())


def gaussian_differential_entropy(variance: float, d: int) -> float:
    """(d/2) * ln(2*pi*e*variance) in nats for an isotropic d-dim Gaussian."""
    if variance <= 0:
        raise ValueError("variance must be positive")
    if d < 1:
        raise ValueError("dimension must be a positive integer")
    return (d / 2.0) * math.log(2.0 * math.pi * math.e * variance)


def exact_decomposition(t: DiscreteTriple) -> InfoDecomposition:
    """Exact I(S;Z), I(X;Z), H(X|S), H(X|S,Z) from the induced joint."""
    p_sxz = t.joint_sxz()
    h_sxz = _plugin_entropy(p_sxz)
    h_sx = _plugin_entropy(p_sxz.sum(axis=2))
    h_sz = _plugin_entropy(p_sxz.sum(axis=1))
    h_xz = _plugin_entropy(p_sxz.sum(axis=0))
    h_s = _plugin_entropy(p_sxz.sum(axis=(1, 2)))
    h_x = _plugin_entropy(p_sxz.sum(axis=(0, 2)))
    h_z = _plugin_entropy(p_sxz.sum(axis=(0, 1)))
    return InfoDecomposition(
        i_sz=h_s + h_z - h_sz,
        i_xz=h_x + h_z - h_xz,
        h_x_given_s=h_sx - h_s,
        h_x_given_sz=h_sxz - h_sz,
    )


def _check_q_covers(p: np.ndarray, q: np.ndarray, what: str) -> None:
    if np.any((p > ZERO_MASS) & (q <= ZERO_MASS)):
        raise ValueError(f"{what} has zero mass where P is positive")


def complexity_identity_check(t: DiscreteTriple, q_z: Pmf) -> tuple[float, float]:
    """Both sides of the rate identity, in nats.

    Returns (I(X;Z), KL(P_Z|X || q_z | P_X) - KL(P_Z || q_z)); the two are
    equal for any strictly positive variational prior q_z.
    """
    if len(q_z) != t.n_z:
        raise ValueError(f"q_z has {len(q_z)} states, triple has {t.n_z}")
    p_x = t.joint_sx.sum(axis=0)
    p_z = p_x @ t.channel_zx
    q = q_z.probs
    _check_q_covers(p_z, q, "q_z")

    lhs = exact_decomposition(t).i_xz

    # KL(P_Z|X || q_z | P_X) = sum_x P(x) sum_z P(z|x) ln(P(z|x)/q(z))
    kl_cond = 0.0
    for xi in range(t.n_x):
        if p_x[xi] <= ZERO_MASS:
            continue
        row = t.channel_zx[xi]
        mask = row > ZERO_MASS
        kl_cond += p_x[xi] * float(np.sum(row[mask] * np.log(row[mask] / q[mask])))
    mask = p_z > ZERO_MASS
    kl_marg = float(np.sum(p_z[mask] * np.log(p_z[mask] / q[mask])))
    return lhs, kl_cond - kl_marg


def leakage_upper_bound(t: DiscreteTriple, q_z: Pmf, q_x_given_sz: np.ndarray) -> float:
    """Variational upper bound on I(S;Z), in nats.

    KL(P_Z|X || q_z | P_X) - KL(P_Z || q_z) + Hce(X|S,Z; q) - H(X|S).
    ``q_x_given_sz`` is an (|S|, |Z|, |X|) table whose last axis holds a
    pmf over x for each conditioning pair (s, z). The bound is tight
    (equals exact I(S;Z)) when q_x_given_sz is the true P(X|S,Z).
    """
    q_table = _as_float_array(q_x_given_sz, "q_x_given_sz")
    if q_table.shape != (t.n_s, t.n_z, t.n_x):
        raise ValueError(
            f"q_x_given_sz must have shape {(t.n_s, t.n_z, t.n_x)}, "
            f"got {q_table.shape}"
        )
    if np.any(q_table < 0) or np.any(np.abs(q_table.sum(axis=2) - 1.0) > 1e-9):
        raise ValueError("rows of q_x_given_sz must be valid pmfs")

    p_szx = np.moveaxis(t.joint_sxz(), 1, 2)
    _check_q_covers(p_szx, q_table, "q_x_given_sz")

    _, rate = complexity_identity_check(t, q_z)  # also validates q_z support

    # Hce(X|S,Z; q) = -sum_{s,x,z} P(s,x,z) ln q(x|s,z)
    mask = p_szx > ZERO_MASS
    h_ce = float(-np.sum(p_szx[mask] * np.log(q_table[mask])))

    return rate + h_ce - exact_decomposition(t).h_x_given_s


def leakage_lower_bound(t: DiscreteTriple, q_s_given_z: np.ndarray) -> float:
    """Variational lower bound E[ln q(S|Z)] + H(S) on I(S;Z), in nats.

    ``q_s_given_z`` is a (|Z|, |S|) table of row pmfs. Equality holds iff
    the table is the true posterior P(S|Z).
    """
    q_table = _as_float_array(q_s_given_z, "q_s_given_z")
    if q_table.shape != (t.n_z, t.n_s):
        raise ValueError(
            f"q_s_given_z must have shape {(t.n_z, t.n_s)}, got {q_table.shape}"
        )
    if np.any(q_table < 0) or np.any(np.abs(q_table.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("rows of q_s_given_z must be valid pmfs")

    p_sxz = t.joint_sxz()
    p_sz = p_sxz.sum(axis=1)  # (|S|, |Z|)
    p_zs = p_sz.T
    _check_q_covers(p_zs, q_table, "q_s_given_z")

    mask = p_zs > ZERO_MASS
    expected_log_q = float(np.sum(p_zs[mask] * np.log(q_table[mask])))
    h_s = _plugin_entropy(p_sz.sum(axis=1))
    return expected_log_q + h_s


def dv_value(t_joint, t_marginal) -> float:
    """Donsker-Varadhan value mean(T_joint) - log(mean(exp(T_marginal))).

    The log-partition term is computed with max-subtraction so that large
    critic outputs do not overflow.
    """
    tj = _as_float_array(t_joint, "t_joint").ravel()
    tm = _as_float_array(t_marginal, "t_marginal").ravel()
    if tj.size == 0 or tm.size == 0:
        raise ValueError("critic output vectors must be non-empty")
    m = float(tm.max())
    log_mean_exp = m + math.log(float(np.mean(np.exp(tm - m))))
    return float(tj.mean()) - log_mean_exp
