"""Evaluation suite: paired reconstruction errors, sample-diversity scores,
and embedding-distribution distances, with pluggable embedding providers.

Distribution metrics operate on embedding sets produced either by the
in-repo providers (pooled mel statistics, a small trained classifier) or by
externally computed embedding files, so scores here are self-contained and
not comparable to results that used large pretrained embedders.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, IoError

EMBED_MAGIC = b"MARSEMBD"


# -----------------------------
# Domain types
# -----------------------------
@dataclass
class EmbeddingSet:
    vectors: np.ndarray          # (n, d)
    provider: str = "unknown"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise InvalidInputError("embedding set must be a 2-D (n, d) matrix")
        if not np.all(np.isfinite(self.vectors)):
            raise InvalidInputError("embedding set contains non-finite entries")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def to_bytes(self) -> bytes:
        n, d = self.vectors.shape
        return EMBED_MAGIC + struct.pack("<II", n, d) + \
            self.vectors.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, provider: str = "external_file") -> "EmbeddingSet":
        if len(raw) < 16 or raw[:8] != EMBED_MAGIC:
            raise IoError("not an embedding file")
        n, d = struct.unpack_from("<II", raw, 8)
        need = 16 + 4 * n * d
        if len(raw) < need:
            raise IoError("truncated embedding file")
        vec = np.frombuffer(raw, dtype="<f4", count=n * d, offset=16).reshape(n, d)
        return cls(vec.astype(np.float64), provider)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class GaussianStats:
    mean: np.ndarray             # (d,)
    cov: np.ndarray              # (d, d), symmetric PSD

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise InvalidInputError("covariance shape does not match mean")
        if np.abs(self.cov - self.cov.T).max() > 1e-8 * max(1.0, np.abs(self.cov).max()):
            raise InvalidInputError("covariance must be symmetric")


@dataclass
class ClassProbMatrix:
    probs: np.ndarray            # (n, classes) row-stochastic

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise InvalidInputError("class probabilities must be (n, classes)")
        if np.any(self.probs < 0):
            raise InvalidInputError("probabilities must be non-negative")
        if np.abs(self.probs.sum(axis=1) - 1.0).max() > 1e-6:
            raise InvalidInputError("rows must sum to 1 within 1e-6")


@dataclass
class MetricReport:
    ndb_over_k: float
    pkid: float
    ikid: float
    pis: float
    iis: float
    mse: float
    mae: float
    fad: float
    provenance: dict = field(default_factory=dict)

    FIELDS = ("ndb_over_k", "pkid", "ikid", "pis", "iis", "mse", "mae", "fad")

    def __post_init__(self):
        for name in self.FIELDS:
            if not math.isfinite(getattr(self, name)):
                raise InvalidInputError(f"metric {name} is not finite")
        if not (0.0 <= self.ndb_over_k <= 1.0):
            raise InvalidInputError("ndb_over_k must lie in [0, 1]")

    def as_dict(self) -> dict:
        out = {name: getattr(self, name) for name in self.FIELDS}
        out["provenance"] = dict(self.provenance)
        return out

    def to_text(self) -> str:
        lines = [
            "# metric report",
            "# embedding providers are self-contained (or user-supplied files);",
            "# scores are not comparable to results based on large pretrained embedders.",
        ]
        for name in self.FIELDS:
            lines.append(f"{name} = {getattr(self, name):.10g}")
        for key in sorted(self.provenance):
            lines.append(f"provenance.{key} = {self.provenance[key]}")
        return "\n".join(lines) + "\n"


# -----------------------------
# Gaussian statistics and Frechet distance
# -----------------------------
def gaussian_stats(e: EmbeddingSet) -> GaussianStats:
    """Sample mean and unbiased (n-1) covariance, symmetrized."""
    if e.n < 2:
        raise InvalidInputError("need at least 2 embeddings for Gaussian stats")
    mu = e.vectors.mean(axis=0)
    centered = e.vectors - mu
    cov = centered.T @ centered / (e.n - 1)
    return GaussianStats(mu, 0.5 * (cov + cov.T))


def psd_sqrt(a: np.ndarray, eig_floor: float = -1e-8) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; eigenvalues in
    [eig_floor, 0) are clamped to zero, more negative ones are an error."""
    a = np.asarray(a, dtype=np.float64)
    scale = max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > 1e-8 * scale:
        raise InvalidInputError("matrix must be symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    if vals.min() < eig_floor * scale:
        raise InvalidInputError(f"matrix is not PSD (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    root = (vecs * np.sqrt(vals)) @ vecs.T
    return 0.5 * (root + root.T)


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)).

    The cross term uses the symmetric congruence form
    sqrt(S_a^(1/2) S_b S_a^(1/2)); tiny negative results from roundoff are
    clamped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise InvalidInputError("dimension mismatch between Gaussian stats")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0  # exact identity; avoids eigen-roundoff on the cross term
    sa_half = psd_sqrt(a.cov)
    cross = psd_sqrt(sa_half @ b.cov @ sa_half)
    d2 = float(((a.mean - b.mean) ** 2).sum()
               + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    return max(d2, 0.0)


# -----------------------------
# Kernel distance (unbiased squared MMD)
# -----------------------------
def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """k(a, b) = (a.b / d + 1)^3."""
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kid(a: EmbeddingSet, b: EmbeddingSet) -> float:
    """Unbiased squared maximum mean discrepancy under the cubic polynomial
    kernel.

    Within-set terms always exclude the diagonal. The cross term excludes
    same-index pairs exactly when the two sets are element-wise identical
    (indices then pair the same sample), which makes kid(e, e) == 0 exactly
    while keeping the estimator invariant to sample order for distinct sets.
    """
    if a.dim != b.dim:
        raise InvalidInputError("embedding dimension mismatch")
    if a.n < 2 or b.n < 2:
        raise InvalidInputError("need at least 2 embeddings per set")
    kaa = polynomial_kernel(a.vectors, a.vectors)
    kbb = polynomial_kernel(b.vectors, b.vectors)
    kab = polynomial_kernel(a.vectors, b.vectors)
    na, nb = a.n, b.n
    term_a = (kaa.sum() - np.trace(kaa)) / (na * (na - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (nb * (nb - 1))
    if na == nb and np.array_equal(a.vectors, b.vectors):
        term_ab = (kab.sum() - np.trace(kab)) / (na * nb - na)
    else:
        term_ab = kab.sum() / (na * nb)
    return float(term_a + term_b - 2.0 * term_ab)


# -----------------------------
# Binned diversity (cluster occupancy comparison)
# -----------------------------
def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> np.ndarray:
    """Deterministic k-means (greedy ++ seeding, fixed iteration cap).
    Returns the (k, d) centroid matrix."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 2:
        raise InvalidInputError("k must be >= 2")
    if n < k:
        raise InvalidInputError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i:] = points[rng.integers(n, size=k - i)]
            break
        centroids[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    for _ in range(max_iter):
        assign = _nearest_centroid(points, centroids)
        new = centroids.copy()
        for i in range(k):
            members = points[assign == i]
            if len(members):
                new[i] = members.mean(axis=0)
        if np.allclose(new, centroids, atol=1e-12, rtol=0.0):
            centroids = new
            break
        centroids = new
    return centroids


def _nearest_centroid(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1)


def normal_two_sided_threshold(alpha: float) -> float:
    """z with P(|Z| > z) = alpha for a standard normal, via bisection on
    the erf-based CDF (keeps the package dependency-light)."""
    if not (0.0 < alpha < 1.0):
        raise InvalidConfigError("alpha must lie in (0, 1)")
    target = 1.0 - alpha / 2.0
    lo, hi = 0.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * (1.0 + math.erf(mid / math.sqrt(2.0))) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class NdbBin:
    index: int
    train_count: int
    eval_count: int
    z_score: float
    different: bool


def ndb(train: EmbeddingSet, evaluation: EmbeddingSet, k: int = 10,
        alpha: float = 0.05, seed: int = 0):
    """Number of statistically different bins.

    Clusters the training set, assigns both sets to the nearest centroid,
    and applies a two-proportion z-test per bin at level ``alpha``.
    Returns (ndb, ndb/k, bin table).
    """
    if evaluation.n < 1:
        raise InvalidInputError("evaluation set is empty")
    if train.dim != evaluation.dim:
        raise InvalidInputError("embedding dimension mismatch")
    centroids = kmeans(train.vectors, k, seed=seed)
    t_assign = _nearest_centroid(train.vectors, centroids)
    e_assign = _nearest_centroid(evaluation.vectors, centroids)
    threshold = normal_two_sided_threshold(alpha)
    nt, ne = train.n, evaluation.n
    bins = []
    different = 0
    for i in range(k):
        ct = int((t_assign == i).sum())
        ce = int((e_assign == i).sum())
        p_t, p_e = ct / nt, ce / ne
        pooled = (ct + ce) / (nt + ne)
        denom = math.sqrt(max(pooled * (1.0 - pooled) * (1.0 / nt + 1.0 / ne), 0.0))
        z = 0.0 if denom == 0 else (p_t - p_e) / denom
        flag = abs(z) > threshold
        different += int(flag)
        bins.append(NdbBin(i, ct, ce, z, flag))
    return different, different / k, bins


# -----------------------------
# Class-posterior diversity
# -----------------------------
def inception_score(p: ClassProbMatrix) -> float:
    """exp(mean_i KL(p_i || mean_j p_j)); 1 for uniform rows, up to the
    class count for confident, evenly spread rows."""
    probs = p.probs
    marginal = probs.mean(axis=0)
    safe = np.where(probs > 0, probs, 1.0)
    safe_marginal = np.where(marginal > 0, marginal, 1.0)
    kl = (probs * (np.log(safe) - np.log(safe_marginal))).sum(axis=1)
    return float(np.exp(kl.mean()))


# -----------------------------
# Spectrogram errors
# -----------------------------
def spectro_error(ref_mels: np.ndarray, est_mels: np.ndarray) -> tuple[float, float]:
    """Element-wise (MSE, MAE) over a paired set of mel arrays."""
    ref = np.asarray(ref_mels, dtype=np.float64)
    est = np.asarray(est_mels, dtype=np.float64)
    if ref.shape != est.shape:
        raise InvalidInputError(f"shape mismatch {ref.shape} vs {est.shape}")
    diff = est - ref
    return float((diff ** 2).mean()), float(np.abs(diff).mean())


def nearest_neighbor_error(generated_mels: np.ndarray, test_mels: np.ndarray):
    """Match each generated mel to its squared-error-nearest test mel
    (ties to the lowest index); returns (mse, mae, match indices) averaged
    over the matched pairs."""
    gen = np.asarray(generated_mels, dtype=np.float64)
    test = np.asarray(test_mels, dtype=np.float64)
    if gen.ndim < 2 or test.ndim < 2 or gen.shape[1:] != test.shape[1:]:
        raise InvalidInputError("generated and test mels must share per-item shape")
    if len(gen) == 0 or len(test) == 0:
        raise InvalidInputError("empty input set")
    g = gen.reshape(len(gen), -1)
    t = test.reshape(len(test), -1)
    d2 = ((g[:, None, :] - t[None, :, :]) ** 2).mean(axis=2)
    matches = d2.argmin(axis=1)
    mse = float(d2[np.arange(len(g)), matches].mean())
    mae = float(np.mean([np.abs(g[i] - t[matches[i]]).mean() for i in range(len(g))]))
    return mse, mae, matches


# -----------------------------
# Embedding providers
# -----------------------------
def mel_stats_embedding(mels: list[np.ndarray]) -> EmbeddingSet:
    """Pooled per-band statistics of log1p mels: concat(mean over time,
    std over time) per item. Deterministic."""
    if not mels:
        raise InvalidInputError("empty audio set")
    rows = []
    for m in mels:
        lm = np.log1p(np.asarray(m, dtype=np.float64))
        rows.append(np.concatenate([lm.mean(axis=1), lm.std(axis=1)]))
    return EmbeddingSet(np.stack(rows), provider="mel_stats")


class MiniClassifier:
    """One-hidden-layer classifier over pooled mel features.

    Trained in-repo on pitch or instrument labels; its penultimate
    activations serve as an embedding space and its softmax rows feed the
    class-posterior diversity score.
    """

    def __init__(self, in_dim: int, classes: int, hidden: int = 64, seed: int = 0):
        from .substrate import Model, init_normal

        if classes < 2:
            raise InvalidConfigError("classifier needs at least 2 classes")
        rng = np.random.default_rng(seed)
        self.classes = classes
        self.model = Model()
        self.w1 = self.model.add_param("clf.w1", init_normal(rng, (in_dim, hidden), 0.1, np.float64))
        self.b1 = self.model.add_param("clf.b1", np.zeros(hidden, dtype=np.float64))
        self.w2 = self.model.add_param("clf.w2", init_normal(rng, (hidden, classes), 0.1, np.float64))
        self.b2 = self.model.add_param("clf.b2", np.zeros(classes, dtype=np.float64))
        self.mu = np.zeros(in_dim)
        self.sigma = np.ones(in_dim)

    def _hidden(self, x: np.ndarray):
        from .substrate import Tensor, gelu, linear

        xn = (np.asarray(x, dtype=np.float64) - self.mu) / self.sigma
        return gelu(linear(Tensor(xn), self.w1, self.b1))

    def fit(self, features: np.ndarray, labels: np.ndarray, steps: int = 300,
            lr: float = 1e-2) -> float:
        """Full-batch training; returns final training accuracy."""
        from .substrate import OptimizerState, adam_step, cross_entropy, linear

        x = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise InvalidInputError("features must be (n, d) with one label per row")
        if y.size and (y.min() < 0 or y.max() >= self.classes):
            raise InvalidInputError("label out of range")
        self.mu = x.mean(axis=0)
        self.sigma = np.where(x.std(axis=0) > 1e-8, x.std(axis=0), 1.0)
        opt = OptimizerState(lr=lr)
        for _ in range(steps):
            self.model.zero_grad()
            logits = linear(self._hidden(x), self.w2, self.b2)
            loss = cross_entropy(logits, y)
            loss.backward()
            adam_step(self.model.parameters(), opt)
        return float((self.predict_probs(x).probs.argmax(axis=1) == y).mean())

    def embed(self, features: np.ndarray, provider: str = "mini_classifier") -> EmbeddingSet:
        return EmbeddingSet(self._hidden(features).data, provider=provider)

    def predict_probs(self, features: np.ndarray) -> ClassProbMatrix:
        from .substrate import linear, softmax

        logits = linear(self._hidden(features), self.w2, self.b2)
        return ClassProbMatrix(softmax(logits, axis=-1).data)


def external_embedding(path, expected_dim: int | None = None) -> EmbeddingSet:
    """Load a precomputed embedding matrix; optionally enforce its width."""
    e = EmbeddingSet.load(path)
    if expected_dim is not None and e.dim != expected_dim:
        raise InvalidInputError(
            f"external embeddings have dimension {e.dim}, expected {expected_dim}")
    return e
