"""Dataset construction and ingestion.

Provides the colored-digit synthetic dataset (a stroke-drawn glyph
renderer tints each grayscale digit with a color drawn from a
configurable pmf), an IDX reader so real MNIST digits can be used as the
glyph source, a binary embedding-file format for pre-extracted feature
vectors, and a correlated-Gaussian sampler with known analytic MI for
calibrating the neural estimator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .infotheory import Pmf

COLOR_NAMES = ("Red", "Green", "Blue")

# Non-selected channels keep a fraction of the glyph so digit shape stays
# recoverable from any single channel.
TINT_ATTENUATION = 0.15

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

EMB_MAGIC = b"PFEMB1\x00\x00"
EMB_HEADER_LEN = 16  # magic + 8 reserved zero bytes


@dataclass
class LabeledDataset:
    """Features plus a sensitive label per row, with optional identities."""

    features: np.ndarray
    sensitive: np.ndarray
    identity: Optional[np.ndarray] = None
    sensitive_name: str = "sensitive"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.sensitive = np.asarray(self.sensitive, dtype=np.int64)
        n = self.features.shape[0]
        if self.sensitive.shape != (n,):
            raise ValueError("sensitive labels must have one entry per row")
        if np.any(self.sensitive < 0):
            raise ValueError("sensitive labels must be non-negative")
        if self.identity is not None:
            self.identity = np.asarray(self.identity, dtype=np.int64)
            if self.identity.shape != (n,):
                raise ValueError("identity labels must have one entry per row")
        if self.is_image and (self.features.min() < 0 or self.features.max() > 1):
            raise ValueError("image values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def is_image(self) -> bool:
        return self.features.ndim == 4

    @property
    def n_sensitive_classes(self) -> int:
        return int(self.sensitive.max()) + 1 if len(self) else 0

    def flat_features(self) -> np.ndarray:
        return self.features.reshape(len(self), -1)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(
            features=self.features[idx],
            sensitive=self.sensitive[idx],
            identity=None if self.identity is None else self.identity[idx],
            sensitive_name=self.sensitive_name,
        )


@dataclass(frozen=True)
class ColoredDigitConfig:
    n: int
    color_pmf: Pmf = Pmf(np.array([1 / 3, 1 / 3, 1 / 3]))
    sensitive: str = "color"  # or "digit"
    source: str = "synthetic_glyphs"  # or "idx_files"
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if len(self.color_pmf) != 3:
            raise ValueError("color_pmf must cover exactly Red, Green, Blue")
        if self.sensitive not in ("color", "digit"):
            raise ValueError(f"unknown sensitive attribute {self.sensitive!r}")
        if self.source not in ("synthetic_glyphs", "idx_files"):
            raise ValueError(f"unknown digit source {self.source!r}")


# Seven-segment layout of the glyph renderer: (top, top-left, top-right,
# middle, bottom-left, bottom-right, bottom) flags per digit.
_SEGMENTS = {
    0: (1, 1, 1, 0, 1, 1, 1),
    1: (0, 0, 1, 0, 0, 1, 0),
    2: (1, 0, 1, 1, 1, 0, 1),
    3: (1, 0, 1, 1, 0, 1, 1),
    4: (0, 1, 1, 1, 0, 1, 0),
    5: (1, 1, 0, 1, 0, 1, 1),
    6: (1, 1, 0, 1, 1, 1, 1),
    7: (1, 0, 1, 0, 0, 1, 0),
    8: (1, 1, 1, 1, 1, 1, 1),
    9: (1, 1, 1, 1, 0, 1, 1),
}


def render_glyph(digit: int, shift=(0, 0), intensity: float = 0.9) -> np.ndarray:
    """A 28x28 grayscale seven-segment digit in [0, 1]."""
    if digit not in _SEGMENTS:
        raise ValueError(f"digit must be 0-9, got {digit}")
    img = np.zeros((28, 28), dtype=np.float32)
    top, left = 4 + shift[0], 8 + shift[1]
    bottom, right = top + 19, left + 11
    mid = top + 9
    t = 3  # stroke thickness
    seg_top, seg_tl, seg_tr, seg_mid, seg_bl, seg_br, seg_bot = _SEGMENTS[digit]
    if seg_top:
        img[top : top + t, left : right + 1] = intensity
    if seg_mid:
        img[mid : mid + t, left : right + 1] = intensity
    if seg_bot:
        img[bottom - t + 1 : bottom + 1, left : right + 1] = intensity
    if seg_tl:
        img[top : mid + t, left : left + t] = intensity
    if seg_tr:
        img[top : mid + t, right - t + 1 : right + 1] = intensity
    if seg_bl:
        img[mid : bottom + 1, left : left + t] = intensity
    if seg_br:
        img[mid : bottom + 1, right - t + 1 : right + 1] = intensity
    return img


def tint(glyph: np.ndarray, color: int) -> np.ndarray:
    """Color a grayscale glyph: the chosen channel carries the glyph at
    full strength, the other two are attenuated copies."""
    img = np.repeat(glyph[:, :, None], 3, axis=2) * TINT_ATTENUATION
    img[:, :, color] = glyph
    return img.astype(np.float32)


def generate_colored_digits(cfg: ColoredDigitConfig) -> LabeledDataset:
    """Sample n tinted digits; sensitive = color or digit, identity = digit."""
    rng = np.random.default_rng(cfg.seed)
    if cfg.source == "idx_files":
        if not cfg.images_path or not cfg.labels_path:
            raise ValueError("idx_files source requires images_path and labels_path")
        glyphs = load_idx(cfg.images_path)
        digits = load_idx(cfg.labels_path).astype(np.int64)
        if glyphs.shape[0] != digits.shape[0]:
            raise ValueError("image and label files disagree on sample count")
        picks = rng.integers(0, glyphs.shape[0], size=cfg.n)
        gray = glyphs[picks]
        digit_labels = digits[picks]
    else:
        digit_labels = rng.integers(0, 10, size=cfg.n)
        shifts = rng.integers(-2, 3, size=(cfg.n, 2))
        intensities = rng.uniform(0.8, 1.0, size=cfg.n)
        gray = np.stack(
            [
                render_glyph(int(d), shift=tuple(sh), intensity=float(v))
                for d, sh, v in zip(digit_labels, shifts, intensities)
            ]
        )

    colors = rng.choice(3, size=cfg.n, p=cfg.color_pmf.probs)
    images = np.stack([tint(g, int(c)) for g, c in zip(gray, colors)])
    sensitive = colors if cfg.sensitive == "color" else digit_labels
    return LabeledDataset(
        features=images,
        sensitive=sensitive,
        identity=digit_labels,
        sensitive_name=cfg.sensitive,
    )


def load_idx(path) -> np.ndarray:
    """Parse an IDX file: images (magic 0x803) scaled to [0,1], or labels
    (magic 0x801) as raw bytes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX file")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise ValueError(f"{path}: unrecognized IDX magic 0x{magic:08x}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise ValueError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims))
    body = raw[header_len:]
    if len(body) != count:
        raise ValueError(
            f"{path}: expected {count} data bytes for dims {dims}, got {len(body)}"
        )
    data = np.frombuffer(body, dtype=np.uint8).reshape(dims)
    if magic == IDX_IMAGES_MAGIC:
        return data.astype(np.float32) / 255.0
    return data.copy()


def write_idx(path, array: np.ndarray, kind: str) -> None:
    """Write an IDX file (images: uint8 HxW stack, labels: uint8 vector)."""
    arr = np.asarray(array)
    if kind == "images":
        magic, ndim = IDX_IMAGES_MAGIC, 3
        if arr.ndim != 3:
            raise ValueError("images must be a (n, h, w) array")
    elif kind == "labels":
        magic, ndim = IDX_LABELS_MAGIC, 1
        if arr.ndim != 1:
            raise ValueError("labels must be a vector")
    else:
        raise ValueError(f"unknown kind {kind!r}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{ndim}I", *arr.shape))
        fh.write(arr.astype(np.uint8).tobytes())


def save_embeddings(ds: LabeledDataset, path) -> None:
    """Write the binary embedding format (all integers little-endian):
    16-byte header (magic ``PFEMB1\\0\\0`` + 8 reserved zero bytes),
    uint32 n, uint32 d, uint32 has_identity, then n*d float32 features
    row-major, n uint16 sensitive labels, and optionally n uint32
    identities."""
    if ds.is_image:
        raise ValueError("embedding files hold flat vectors, not images")
    n, d = ds.features.shape
    has_identity = ds.identity is not None
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + b"\x00" * (EMB_HEADER_LEN - len(EMB_MAGIC)))
        fh.write(struct.pack("<III", n, d, int(has_identity)))
        fh.write(ds.features.astype("<f4").tobytes())
        fh.write(ds.sensitive.astype("<u2").tobytes())
        if has_identity:
            fh.write(ds.identity.astype("<u4").tobytes())


def load_embeddings(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < EMB_HEADER_LEN + 12 or raw[: len(EMB_MAGIC)] != EMB_MAGIC:
        raise ValueError(f"{path}: not a PFEMB1 embedding file")
    n, d, has_identity = struct.unpack(
        "<III", raw[EMB_HEADER_LEN : EMB_HEADER_LEN + 12]
    )
    offset = EMB_HEADER_LEN + 12
    feat_bytes = n * d * 4
    sens_bytes = n * 2
    ident_bytes = n * 4 if has_identity else 0
    if len(raw) != offset + feat_bytes + sens_bytes + ident_bytes:
        raise ValueError(f"{path}: embedding file length does not match header")
    features = np.frombuffer(raw, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    offset += feat_bytes
    sensitive = np.frombuffer(raw, dtype="<u2", count=n, offset=offset)
    offset += sens_bytes
    identity = None
    if has_identity:
        identity = np.frombuffer(raw, dtype="<u4", count=n, offset=offset)
    return LabeledDataset(
        features=features.copy(),
        sensitive=sensitive.astype(np.int64),
        identity=None if identity is None else identity.astype(np.int64),
    )


@dataclass(frozen=True)
class CorrelatedPairs:
    """Bivariate standard-normal samples with known mutual information."""

    x: np.ndarray
    y: np.ndarray
    rho: float
    analytic_mi: float  # nats


def sample_correlated_gaussians(rho: float, n: int, seed: int = 0) -> CorrelatedPairs:
    """(x, y) standard-normal pairs with correlation rho;
    analytic MI = -0.5*ln(1 - rho^2) nats."""
    if not -1.0 < rho < 1.0:
        raise ValueError("|rho| must be < 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    noise = rng.standard_normal(n)
    y = rho * x + np.sqrt(1.0 - rho * rho) * noise
    return CorrelatedPairs(
        x=x, y=y, rho=rho, analytic_mi=float(-0.5 * np.log1p(-rho * rho))
    )


def split(ds: LabeledDataset, fractions, seed: int = 0):
    """Disjoint, exhaustive, seeded split, stratified on the sensitive label.

    Global split sizes follow a largest-remainder allocation of the
    fractions, so they are exact; per-class proportions are approximate.
    """
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be positive and sum to 1")
    n = len(ds)
    k = len(fractions)

    # exact global sizes via largest remainder
    raw = [f * n for f in fractions]
    sizes = [int(v) for v in raw]
    for j in sorted(range(k), key=lambda j: raw[j] - sizes[j], reverse=True):
        if sum(sizes) == n:
            break
        sizes[j] += 1

    rng = np.random.default_rng(seed)
    buckets = [[] for _ in range(k)]
    for cls in np.unique(ds.sensitive):
        idx = np.flatnonzero(ds.sensitive == cls)
        rng.shuffle(idx)
        raw_c = [f * idx.size for f in fractions]
        alloc = [int(v) for v in raw_c]
        for j in sorted(range(k), key=lambda j: raw_c[j] - alloc[j], reverse=True):
            if sum(alloc) == idx.size:
                break
            alloc[j] += 1
        start = 0
        for j in range(k):
            buckets[j].extend(idx[start : start + alloc[j]].tolist())
            start += alloc[j]

    # per-class rounding can leave splits one-off their exact size; move
    # single indices from over- to under-full splits
    for j in range(k):
        while len(buckets[j]) > sizes[j]:
            over = j
            under = next(i for i in range(k) if len(buckets[i]) < sizes[i])
            buckets[under].append(buckets[over].pop())

    return [ds.subset(sorted(b)) for b in buckets]


def color_name(index: int) -> str:
    return COLOR_NAMES[index]


def make_biased_pmf(probs) -> Pmf:
    return Pmf(np.asarray(probs, dtype=np.float64))


def onehot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    eye = np.eye(n_classes, dtype=np.float32)
    return eye[np.asarray(labels, dtype=np.int64)]
