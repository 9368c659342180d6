"""Turn an exposed update into reconstructed inputs.

Extraction inverts the first dense layer's gradient rows: for a neuron with a
usable bias gradient, weight-gradient row / bias gradient is the (possibly
noisy, possibly overlaid) layer input that drove it. Scoring, filtering,
k-means clustering with per-cluster averaging, and nearest-embedding token
lookup refine the raw candidates.

SNR here is measured against simulator ground truth: a candidate r is matched
to the batch input g* with the highest normalized correlation, aligned with
the least-squares scalar a = <r, g*>/||g*||^2, and scored ||a g*||^2 /
||r - a g*||^2. Exact reconstructions are reported at the cap 1e12. For the
attacker-realistic path (no ground truth) the bias-gradient magnitude serves
as a proxy score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError
from .nn import EmbeddingLayer, GradientUpdate
from .rng import RngStream

SNR_CAP = 1e12


@dataclass
class ExtractedCandidate:
    """One rescaled gradient row: a putative reconstructed input."""

    neuron: int
    value: np.ndarray
    bias_gradient: float
    snr: float | None = None
    match: int | None = None  # ground-truth row index, set alongside snr


@dataclass
class ClusterResult:
    k: int
    assignments: np.ndarray
    centroids: np.ndarray
    counts: np.ndarray
    inertia_path: list[float]


def extract_inputs(
    update: GradientUpdate,
    layer_index: int = 0,
    bias_floor: float = 1e-12,
) -> list[ExtractedCandidate]:
    """Rescale weight-gradient rows by their bias gradients.

    Neurons whose |bias gradient| is at or below `bias_floor` are skipped: with
    noise those rows are rescaled by (almost) pure noise, without noise they
    were never activated. Callers set the floor to the exposed update's noise
    std in noisy runs.
    """
    grads = update.layers[layer_index]
    keep = np.flatnonzero(np.abs(grads.bias) > bias_floor)
    return [
        ExtractedCandidate(
            neuron=int(i),
            value=grads.weights[i] / grads.bias[i],
            bias_gradient=float(grads.bias[i]),
        )
        for i in keep
    ]


def match_and_snr(value: np.ndarray, inputs: np.ndarray) -> tuple[int, float]:
    """(nearest ground-truth row by normalized correlation, aligned SNR)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise InputError("ground-truth inputs must be a non-empty batch")
    r = np.asarray(value, dtype=np.float64)
    r_norm = np.linalg.norm(r)
    g_norms = np.linalg.norm(inputs, axis=1)
    if r_norm == 0.0:
        return 0, 0.0
    safe = np.where(g_norms > 0, g_norms, 1.0)
    corr = (inputs @ r) / (safe * r_norm)
    corr[g_norms == 0] = -np.inf
    best = int(np.argmax(corr))
    g = inputs[best]
    g_sq = float(g @ g)
    if g_sq == 0.0:
        return best, 0.0
    alpha = float(r @ g) / g_sq
    signal = alpha * alpha * g_sq
    residual = float(np.sum((r - alpha * g) ** 2))
    if signal == 0.0:
        return best, 0.0
    if residual <= signal / SNR_CAP:
        return best, SNR_CAP
    return best, min(signal / residual, SNR_CAP)


def compute_snr(value: np.ndarray, inputs: np.ndarray) -> float:
    """Ground-truth SNR of one candidate against a batch of inputs."""
    return match_and_snr(value, inputs)[1]


def score_candidates(candidates: list[ExtractedCandidate], inputs: np.ndarray) -> None:
    """Attach (match, snr) to every candidate in place."""
    for cand in candidates:
        cand.match, cand.snr = match_and_snr(cand.value, inputs)


def filter_by_snr(
    candidates: list[ExtractedCandidate],
    threshold: float = 1.0,
    score: str = "snr",
) -> list[ExtractedCandidate]:
    """Keep candidates scoring at or above the threshold.

    score="snr" uses the ground-truth SNR (must be computed); score="bias"
    is the attacker-realistic proxy |bias gradient|.
    """
    if score == "snr":
        missing = [c.neuron for c in candidates if c.snr is None]
        if missing:
            raise InputError(f"snr not computed for neurons {missing[:5]}")
        return [c for c in candidates if c.snr >= threshold]
    if score == "bias":
        return [c for c in candidates if abs(c.bias_gradient) >= threshold]
    raise ConfigurationError(f"unknown candidate score {score!r}")


def kmeans_cluster(
    points: np.ndarray,
    k: int,
    rng: RngStream,
    max_iters: int = 60,
) -> ClusterResult:
    """Lloyd's algorithm with k-means++ seeding, Euclidean distance."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise InputError("clustering expects an N x d matrix")
    n = points.shape[0]
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    if n < k:
        raise InputError(f"cannot form {k} clusters from {n} candidates")
    gen = rng.generator()

    centroids = _kmeanspp_seed(points, k, gen)
    assignments = np.zeros(n, dtype=np.int64)
    inertia_path: list[float] = []
    for _ in range(max_iters):
        d2 = _sq_distances(points, centroids)
        assignments = d2.argmin(axis=1)
        inertia_path.append(float(d2[np.arange(n), assignments].sum()))
        new_centroids = centroids.copy()
        for c in range(k):
            members = assignments == c
            if members.any():
                new_centroids[c] = points[members].mean(axis=0)
            else:
                # re-seed an empty cluster at the point farthest from its centroid
                far = int(d2[np.arange(n), assignments].argmax())
                new_centroids[c] = points[far]
        if np.array_equal(new_centroids, centroids):
            break
        centroids = new_centroids
    d2 = _sq_distances(points, centroids)
    assignments = d2.argmin(axis=1)
    inertia_path.append(float(d2[np.arange(n), assignments].sum()))
    counts = np.bincount(assignments, minlength=k)
    return ClusterResult(k, assignments, centroids, counts, inertia_path)


def _kmeanspp_seed(points: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(gen.integers(n))]
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centroid; pick any unused
            pick = int(gen.integers(n))
        else:
            pick = int(gen.choice(n, p=d2 / total))
        chosen.append(pick)
        d2 = np.minimum(d2, np.sum((points - points[pick]) ** 2, axis=1))
    return points[chosen].copy()


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # ||p - c||^2 expanded; clip tiny negatives from cancellation
    d2 = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids**2, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def average_redundant(
    values: np.ndarray,
    ground_truth: np.ndarray,
) -> tuple[np.ndarray, list[float]]:
    """Running mean over candidate prefixes with the SNR of each prefix mean.

    `values` are candidates already attributed to one ground-truth point, in
    the order they should be accumulated.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] == 0:
        raise InputError("need at least one candidate to average")
    sums = np.cumsum(values, axis=0)
    curve = []
    truth = np.asarray(ground_truth, dtype=np.float64)[None, :]
    for n in range(1, values.shape[0] + 1):
        curve.append(compute_snr(sums[n - 1] / n, truth))
    return sums[-1] / values.shape[0], curve


def token_lookup(value: np.ndarray, table: EmbeddingLayer | np.ndarray) -> int:
    """Vocabulary index with the smallest L2 distance; ties go to the lowest index."""
    rows = table.table if isinstance(table, EmbeddingLayer) else np.asarray(table)
    if rows.size == 0:
        raise InputError("empty embedding table")
    d2 = np.sum((rows - np.asarray(value, dtype=np.float64)) ** 2, axis=1)
    return int(d2.argmin())
