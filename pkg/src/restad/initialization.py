"""RBF layer initialization strategies.

Random: centers and gamma drawn from a standard normal.  K-means: centers
from Lloyd's algorithm over the latent representations of a trained base
model, with gamma seeded from the mean squared distance of latents to their
nearest center.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DegenerateInitError
from .model import ModelConfig, RbfLayer, RestadModel
from .tensor import Tensor

KMEANS_SUBSAMPLE_LIMIT = 100_000


def random_init(M: int, d_h: int, seed) -> RbfLayer:
    """Centers ~ N(0,1) elementwise, gamma ~ N(0,1), deterministic per seed."""
    if M <= 0 or d_h <= 0:
        raise ConfigError(f"M and d_h must be positive, got {M} and {d_h}")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((M, d_h))
    gamma = rng.standard_normal()
    return RbfLayer(Tensor(centers, requires_grad=True),
                    Tensor(gamma, requires_grad=True))


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations_run: int
    inertia_trace: list = field(default_factory=list)


def _nearest(points: np.ndarray, centers: np.ndarray, chunk: int = 2048,
             center_chunk: int = 64):
    """Assignment and squared distance to the nearest center.

    Distances use explicit differences so a point sitting exactly on a
    center gets an exact zero; the inner-product expansion would leave
    cancellation noise there and break the coincidence contracts.
    """
    n, m = points.shape[0], centers.shape[0]
    assign = np.empty(n, dtype=np.int64)
    d2 = np.empty(n)
    for s in range(0, n, chunk):
        block = points[s:s + chunk]
        dist = np.empty((block.shape[0], m))
        for cs in range(0, m, center_chunk):
            diff = block[:, None, :] - centers[None, cs:cs + center_chunk, :]
            dist[:, cs:cs + center_chunk] = np.einsum("nmk,nmk->nm", diff, diff)
        idx = dist.argmin(axis=1)
        assign[s:s + chunk] = idx
        d2[s:s + chunk] = dist[np.arange(block.shape[0]), idx]
    return assign, d2


def _seed_centers(points: np.ndarray, m: int, rng) -> np.ndarray:
    """k-means++ seeding: first center uniform, later centers sampled with
    probability proportional to squared distance from the chosen set."""
    n = points.shape[0]
    centers = np.empty((m, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    diff = points - centers[0]
    d2 = (diff * diff).sum(axis=1)
    for j in range(1, m):
        total = d2.sum()
        if total > 0.0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)  # all points already coincide with centers
        centers[j] = points[idx]
        diff = points - centers[j]
        np.minimum(d2, (diff * diff).sum(axis=1), out=d2)
    return centers


def kmeans(points: np.ndarray, M: int, max_iter: int = 100, tol: float = 1e-6,
           seed=0) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops after max_iter iterations or when the inertia improvement drops
    below tol.  An emptied cluster is re-seeded to the point currently
    farthest from its nearest center, which never increases inertia.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ContractError(f"points must be 2-d, got shape {points.shape}")
    n = points.shape[0]
    if n < M:
        raise ContractError(f"kmeans needs at least M={M} points, got {n}")
    rng = np.random.default_rng(seed)

    centers = _seed_centers(points, M, rng)
    assign, d2 = _nearest(points, centers)
    inertia = float(d2.sum())
    trace = [inertia]
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        counts = np.bincount(assign, minlength=M)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, points)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            spare = d2.copy()
            for j in empty:
                far = int(spare.argmax())
                centers[j] = points[far]
                spare[far] = 0.0
        assign, d2 = _nearest(points, centers)
        new_inertia = float(d2.sum())
        trace.append(new_inertia)
        done = inertia - new_inertia < tol
        inertia = new_inertia
        if done:
            break
    return KMeansResult(centers=centers, assignments=assign, inertia=inertia,
                        iterations_run=iterations, inertia_trace=trace)


def sigma_tilde(points: np.ndarray, centers: np.ndarray, chunk: int = 4096) -> float:
    """Mean over points of the squared distance to the nearest center.

    Computed with explicit differences (not the inner-product expansion) so
    the value matches a brute-force double loop to full precision.
    """
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if points.ndim != 2 or centers.ndim != 2 or points.shape[1] != centers.shape[1]:
        raise ContractError(
            f"sigma_tilde: points {points.shape} and centers {centers.shape} disagree"
        )
    n = points.shape[0]
    total = 0.0
    for s in range(0, n, chunk):
        block = points[s:s + chunk]
        diff = block[:, None, :] - centers[None, :, :]
        d2 = np.einsum("nmk,nmk->nm", diff, diff)
        total += float(d2.min(axis=1).sum())
    return total / n


def pool_latents(base_model: RestadModel, windows: np.ndarray, position: int,
                 batch: int = 64) -> np.ndarray:
    """Latents of all windows at the given encoder layer, flattened to
    [n_windows * window_len, width].  Batched to bound peak memory."""
    pieces = []
    for s in range(0, windows.shape[0], batch):
        h = base_model.forward_latents(windows[s:s + batch], upto=position)
        pieces.append(h.reshape(-1, h.shape[-1]))
    return np.concatenate(pieces, axis=0)


def gamma_from_sigma(s2: float, mode: str) -> float:
    """Seed gamma from the mean squared nearest-center distance s2.

    "direct" applies gamma = 1/s2 directly in the log domain (effective
    kernel scale e^(1/s2)); "log_consistent" sets gamma = ln(1/s2) so the
    effective scale is exactly 1/s2.
    """
    if mode == "direct":
        return 1.0 / s2
    if mode == "log_consistent":
        return float(-np.log(s2))
    raise ConfigError(f"unknown gamma_init_mode {mode!r}")


def kmeans_init(base_model: RestadModel, train_windows: np.ndarray,
                config: ModelConfig, gamma_init_mode: str = "direct",
                seed=0, max_iter: int = 100, tol: float = 1e-6,
                subsample_limit: int = KMEANS_SUBSAMPLE_LIMIT) -> RbfLayer:
    """Centers from K-means over the base model's latents at the layer where
    the RBF will sit; gamma seeded from the mean squared distance to the
    nearest center (sigma2 below).

    gamma_init_mode picks between two readings of that seeding rule:
      - "direct": gamma = 1 / sigma2, applied directly in the log domain,
        so the effective kernel scale is e^(1/sigma2).
      - "log_consistent": gamma = ln(1 / sigma2), so the effective scale is
        exactly 1 / sigma2.
    """
    if gamma_init_mode not in ("direct", "log_consistent"):
        raise ConfigError(f"unknown gamma_init_mode {gamma_init_mode!r}")
    if base_model.config.rbf_enabled:
        raise ContractError("kmeans_init expects a base model without an RBF layer")

    latents = pool_latents(base_model, train_windows, config.rbf_position)
    rng = np.random.default_rng(seed)
    if latents.shape[0] > subsample_limit:
        idx = rng.choice(latents.shape[0], subsample_limit, replace=False)
        latents = latents[np.sort(idx)]

    km = kmeans(latents, config.n_centers, max_iter=max_iter, tol=tol, seed=rng)
    s2 = sigma_tilde(latents, km.centers)
    if s2 == 0.0:
        raise DegenerateInitError(
            "mean squared distance to the nearest center is zero; latents are"
            " degenerate (every point coincides with a center)"
        )
    gamma = gamma_from_sigma(s2, gamma_init_mode)
    return RbfLayer(Tensor(km.centers.copy(), requires_grad=True),
                    Tensor(float(gamma), requires_grad=True))
