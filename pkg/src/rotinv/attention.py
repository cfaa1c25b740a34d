"""Learnable confidence over points and region-of-interest selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import Centroid, PointCloud

logger = logging.getLogger(__name__)

MODES = ("stochastic", "top-k")


@dataclass
class AttentionParams:
    weight: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias: float = 0.0

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64).reshape(-1)
        self.bias = float(self.bias)
        if not (np.all(np.isfinite(self.weight)) and np.isfinite(self.bias)):
            raise ValueError("attention parameters must be finite")


@dataclass(frozen=True)
class AttentionSelection:
    indices: np.ndarray  # positions into the confidence vector
    confidences: np.ndarray
    mode: str


def candidate_offsets(cloud: PointCloud, centroid: Centroid, tol: float = 0.0):
    """Indices of selectable points and their offsets from the centroid.

    The centroid itself and any exact duplicate of it are excluded.
    """
    if cloud.n < 2:
        raise ValueError("need at least 2 points to form directions")
    offsets = cloud.points - centroid.coords
    norms = np.linalg.norm(offsets, axis=1)
    keep = norms > tol
    keep[centroid.index] = False
    dupes = np.flatnonzero(norms <= tol)
    if len(dupes) > 1:
        logger.info("excluding %d point(s) coincident with the centroid", len(dupes) - 1)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        raise ValueError("all points coincide with the centroid")
    return idx, offsets[idx], norms[idx]


def unit_directions(cloud: PointCloud, centroid: Centroid):
    """(candidate indices, unit vectors from the centroid to each candidate)."""
    idx, offsets, norms = candidate_offsets(cloud, centroid)
    return idx, offsets / norms[:, None]


def softplus(z):
    return np.logaddexp(0.0, z)


def attention_confidences(features: np.ndarray, params: AttentionParams) -> np.ndarray:
    """c_i = softplus(weight . feature_i + bias).

    ``features`` is (M, 3) unit directions, or (M, 1) centroid distances in the
    rotation-invariant variant.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if features.shape[1] != params.weight.shape[0]:
        raise ValueError(f"feature width {features.shape[1]} != weight size {params.weight.shape[0]}")
    # softplus underflows to 0 below about -745; keep scores strictly positive
    return np.maximum(softplus(features @ params.weight + params.bias), np.finfo(np.float64).tiny)


def select_attention(confidences, count: int, mode: str = "stochastic", seed=None) -> AttentionSelection:
    """Pick ``count`` distinct positions.

    stochastic: successive draws without replacement, each proportional to the
    remaining confidences (sampled in one pass with Gumbel top-k, which has the
    same law). top-k: the largest confidences, ties to the lowest position.
    """
    c = np.asarray(confidences, dtype=np.float64)
    if mode not in MODES:
        raise ValueError(f"unknown selection mode {mode!r}")
    if not 1 <= count <= c.size:
        raise ValueError(f"cannot select {count} of {c.size} candidates")
    if np.any(c < 0) or not np.all(np.isfinite(c)):
        raise ValueError("confidences must be finite and nonnegative")
    if not np.any(c > 0):
        raise ValueError("all confidences are zero")
    if mode == "top-k":
        order = np.argsort(-c, kind="stable")
    else:
        rng = np.random.default_rng(seed)
        with np.errstate(divide="ignore"):
            keys = np.log(c) + rng.gumbel(size=c.size)
        order = np.argsort(-keys, kind="stable")
    return AttentionSelection(order[:count].copy(), c, mode)
