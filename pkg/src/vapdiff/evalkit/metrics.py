"""Generative-model metrics over feature matrices."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist

from ..errors import NumericError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray
    extractor_id: str

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2:
            raise ValidationError("features must be an N x D matrix", field="features")
        if not np.all(np.isfinite(f)):
            raise ValidationError("features contain non-finite entries", field="features")
        object.__setattr__(self, "features", f)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class MetricReport:
    fid: float
    is_mean: float
    is_std: float
    precision: float
    recall: float
    n_real: int
    n_fake: int
    extractor_id: str
    config_hash: str = ""

    def to_row(self) -> dict:
        return asdict(self)


def _as_matrix(x) -> np.ndarray:
    return x.features if isinstance(x, FeatureSet) else np.asarray(x, dtype=np.float64)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray, tol: float = 1e-6) -> float:
    """Tr((A B)^{1/2}) for PSD A, B via the symmetric form (A^{1/2} B A^{1/2})^{1/2}."""
    root_a = _psd_sqrt(sigma_a)
    inner = root_a @ sigma_b @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    scale = max(float(np.abs(w).max(initial=0.0)), 1.0)
    if w.min(initial=0.0) < -tol * scale:
        raise NumericError(f"matrix square root: eigenvalue {w.min():.3e} is too negative")
    if w.min(initial=0.0) < 0:
        log.debug("clipping negative eigenvalue %.3e in matrix sqrt", w.min())
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def fid(real, fake) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    a, b = _as_matrix(real), _as_matrix(fake)
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}", field="features")
    if len(a) < 2 or len(b) < 2:
        raise ValidationError("need at least 2 samples per set", field="features")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a, cov_b = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    d2 = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * trace_sqrt_product(cov_a, cov_b))
    if d2 < -1e-6:
        raise NumericError(f"negative Frechet distance {d2:.3e}")
    return max(d2, 0.0)


def inception_score(probs, splits: int = 1) -> tuple[float, float]:
    """exp(E_x KL(p(y|x) || p(y))), averaged over ``splits`` chunks."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or np.any(p < 0) or not np.allclose(p.sum(1), 1.0, atol=1e-6, rtol=0):
        raise ValidationError("rows must be probability vectors summing to 1", field="probs")
    if not 1 <= splits <= len(p):
        raise ValidationError(f"splits must be in [1, {len(p)}]", field="splits")
    scores = []
    for chunk in np.array_split(p, splits):
        marginal = chunk.mean(0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(chunk > 0, chunk * (np.log(chunk) - np.log(marginal)), 0.0)
        scores.append(np.exp(terms.sum(1).mean()))
    return float(np.mean(scores)), float(np.std(scores))


def knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    """Distance from each row to its k-th nearest other row."""
    d = cdist(x, x)
    return np.sort(d, axis=1)[:, k]


def precision_recall(real, fake, k: int = 3) -> tuple[float, float]:
    """k-NN manifold precision and recall.

    A fake sample counts toward precision if it falls within some real
    sample's k-NN ball; recall swaps the roles.
    """
    a, b = _as_matrix(real), _as_matrix(fake)
    if a.shape[1] != b.shape[1]:
        raise ValidationError("feature dims differ", field="features")
    if k < 1 or k >= len(a) or k >= len(b):
        raise ValidationError(f"k={k} needs more than k samples in both sets", field="k")
    cross = cdist(a, b)
    precision = (cross <= knn_radii(a, k)[:, None]).any(axis=0).mean()
    recall = (cross <= knn_radii(b, k)[None, :]).any(axis=1).mean()
    return float(precision), float(recall)
