"""Gaussian density model over unit-normalized embeddings.

The model fits mean and (biased, 1/N) covariance to L2-normalized backbone
embeddings of an augmentation-expanded few-shot set, regularizes the
covariance with epsilon on the diagonal, and scores test embeddings by
Mahalanobis distance through a Cholesky solve (no explicit inverse on the
main path). A kNN scorer over the same normalized reference embeddings is
available as an alternative.

Serialization format: little-endian uint64 header length, JSON header
{"kind", "dim", "epsilon", "n_fit"}, then row-major float64 blobs (mu then
sigma for the Gaussian model; the reference matrix for the kNN scorer).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.stats import rankdata
from torch import Tensor

from .augment import PositivePolicy, apply_positive
from .encoder import OnlineNetwork, TargetNetwork, embed
from .errors import DataError, DegenerateEmbeddingError, NumericalError
from .seeding import seed_stream

_MAGIC_KIND_GAUSSIAN = "gaussian"
_MAGIC_KIND_KNN = "knn"


def normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit L2 norm; zero vectors raise."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DegenerateEmbeddingError("cannot normalize a zero vector")
    return v / norm


def normalize_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError("cannot normalize zero rows")
    return m / norms


@dataclass
class DensityModel:
    """Mean, epsilon-regularized covariance, and its Cholesky factorization.

    Immutable after fit; scoring is safe under concurrent readers.
    """

    mu: np.ndarray
    sigma: np.ndarray
    epsilon: float
    n_fit: int
    dim: int
    cho: tuple = field(repr=False, default=None)

    def __post_init__(self) -> None:
        if self.cho is None:
            self.cho = scipy.linalg.cho_factor(self.sigma, lower=True)


@dataclass
class ScoreRecord:
    sample_id: str
    raw_score: float
    percentile: float | None = None


def fit_gaussian(embeddings: np.ndarray, epsilon: float) -> DensityModel:
    """Fit the model to raw (un-normalized) embedding rows.

    Rows are unit-normalized, then mu is their mean and sigma the biased
    covariance plus ``epsilon`` on the diagonal.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] < 2:
        raise DataError("need at least two embedding rows to fit a covariance")
    if not np.isfinite(embeddings).all():
        raise NumericalError("non-finite values in fit embeddings")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    z = normalize_rows(embeddings)
    n, d = z.shape
    mu = z.mean(axis=0)
    centered = z - mu
    sigma = centered.T @ centered / n
    sigma += epsilon * np.eye(d)
    return DensityModel(mu=mu, sigma=sigma, epsilon=float(epsilon), n_fit=n, dim=d)


def _augmented_embeddings(
    net: OnlineNetwork | TargetNetwork,
    images: Sequence[Tensor],
    ids: Sequence[str],
    pos: PositivePolicy,
    n_a: int,
    seed: int,
) -> np.ndarray:
    """Backbone embeddings of n_a augmented copies of every image.

    Augmentation streams are keyed by (sample id, copy index), so the result
    is independent of the order in which images are supplied.
    """
    import torch

    if len(images) == 0:
        raise DataError("cannot fit a density model on an empty few-shot set")
    if n_a < 1:
        raise ValueError("n_a must be >= 1")
    augmented = []
    for image, sample_id in zip(images, ids):
        for copy_idx in range(n_a):
            rng = seed_stream(seed, "density-aug", str(sample_id), copy_idx)
            augmented.append(apply_positive(image, pos, rng))
    vectors = embed(net, torch.stack(augmented), depth="backbone").vectors
    return vectors.double().numpy()


def fit_density(
    net: OnlineNetwork | TargetNetwork,
    images: Sequence[Tensor],
    ids: Sequence[str],
    pos: PositivePolicy,
    n_a: int = 10,
    epsilon: float = 1e-3,
    seed: int = 0,
) -> DensityModel:
    """Fit the Gaussian over n_a augmented copies of the few-shot images."""
    return fit_gaussian(_augmented_embeddings(net, images, ids, pos, n_a, seed), epsilon)


def score_embedding(model: DensityModel, v: np.ndarray) -> float:
    """Mahalanobis distance of the unit-normalized vector from the model."""
    v_hat = normalize(v)
    if v_hat.shape[0] != model.dim:
        raise ValueError(f"dimension mismatch: model dim {model.dim}, vector dim {v_hat.shape[0]}")
    delta = v_hat - model.mu
    solved = scipy.linalg.cho_solve(model.cho, delta)
    return float(np.sqrt(max(0.0, float(delta @ solved))))


def score_images(
    model: DensityModel,
    net: OnlineNetwork | TargetNetwork,
    images: Sequence[Tensor],
    ids: Sequence[str] | None = None,
) -> list[ScoreRecord]:
    """Score images un-augmented, preserving input order."""
    import torch

    if len(images) == 0:
        return []
    if ids is None:
        ids = [str(i) for i in range(len(images))]
    vectors = embed(net, torch.stack(list(images)), depth="backbone", source_ids=list(ids)).vectors
    matrix = vectors.double().numpy()
    if not np.isfinite(matrix).all():
        raise NumericalError("non-finite embeddings while scoring")
    return [ScoreRecord(sample_id=str(i), raw_score=score_embedding(model, row)) for i, row in zip(ids, matrix)]


def knn_score(train_embeddings: np.ndarray, v: np.ndarray, k: int) -> float:
    """Mean Euclidean distance to the k nearest normalized training rows."""
    train = normalize_rows(np.asarray(train_embeddings, dtype=np.float64))
    if not 1 <= k <= train.shape[0]:
        raise ValueError(f"k must lie in [1, {train.shape[0]}], got {k}")
    v_hat = normalize(v)
    dists = np.linalg.norm(train - v_hat, axis=1)
    nearest = np.partition(dists, k - 1)[:k]
    return float(nearest.mean())


def percentile_normalize(scores: Sequence[float]) -> list[float]:
    """Midrank fraction of each score within the list (values in (0, 1))."""
    scores = np.asarray(list(scores), dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot rank an empty score list")
    ranks = rankdata(scores, method="average")
    return list((ranks - 0.5) / scores.size)


def save_density(model: DensityModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(
        {"kind": _MAGIC_KIND_GAUSSIAN, "dim": model.dim, "epsilon": model.epsilon, "n_fit": model.n_fit}
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(model.mu, dtype=np.float64).tobytes())
        fh.write(np.ascontiguousarray(model.sigma, dtype=np.float64).tobytes())
    return path


def save_knn_reference(train_embeddings: np.ndarray, k: int, path: str | Path) -> Path:
    """Persist a normalized kNN reference set in the same container format."""
    reference = normalize_rows(np.asarray(train_embeddings, dtype=np.float64))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(
        {"kind": _MAGIC_KIND_KNN, "dim": int(reference.shape[1]), "n_fit": int(reference.shape[0]), "k": int(k)}
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(reference).tobytes())
    return path


def load_scorer(path: str | Path) -> DensityModel | tuple[np.ndarray, int]:
    """Load either a Gaussian DensityModel or a (reference, k) kNN pair."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"density model not found: {path}")
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header["kind"] == _MAGIC_KIND_GAUSSIAN:
            d = header["dim"]
            mu = np.frombuffer(fh.read(8 * d), dtype="<f8").copy()
            sigma = np.frombuffer(fh.read(8 * d * d), dtype="<f8").reshape(d, d).copy()
            return DensityModel(mu=mu, sigma=sigma, epsilon=header["epsilon"], n_fit=header["n_fit"], dim=d)
        if header["kind"] == _MAGIC_KIND_KNN:
            d, n = header["dim"], header["n_fit"]
            reference = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d).copy()
            return reference, int(header["k"])
    raise DataError(f"unrecognized density file kind in {path}")
