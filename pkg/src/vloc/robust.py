"""Locally optimized RANSAC for two-view relative pose.

The estimator samples eight correspondences, fits an essential matrix with
the normalized eight-point solver, scores by Sampson distance, and refits on
the consensus set whenever a new best model appears (local optimization).
All randomness comes from a single PCG64 generator seeded from the config,
so results are bit-identical for a fixed seed and input order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geom
from .errors import (
    DegenerateConfiguration,
    InsufficientCorrespondences,
    NoModelFound,
)

_SAMPLE_SIZE = 8


@dataclass
class RansacConfig:
    """Knobs for the relative-pose estimator.

    pixel_threshold is a Sampson distance bound expressed in pixels; it is
    converted to normalized coordinates by dividing by the geometric mean of
    the focal lengths of both cameras.
    """

    pixel_threshold: float = 1.5
    confidence: float = 0.9999
    max_iterations: int = 10000
    min_iterations: int = 100
    lo_refits: int = 4
    seed: int = 0


@dataclass
class RobustEstimate:
    """Result of a successful robust two-view estimation."""

    motion: geom.RelativeMotion
    essential: np.ndarray
    inlier_mask: np.ndarray
    inlier_count: int
    iterations_run: int


def pair_seed(seed: int, frame_i: int, frame_j: int) -> int:
    """Deterministic per-pair seed: seed XOR (frame_i * 2^20 + frame_j)."""
    return (seed ^ (frame_i * 2**20 + frame_j)) & 0xFFFFFFFFFFFFFFFF


def adaptive_trials(inlier_ratio: float, confidence: float, sample_size: int) -> int:
    """Trial count for the desired confidence at the given inlier ratio.

    ceil(log(1 - confidence) / log(1 - ratio^sample_size)), clamped to at
    least 1; a ratio of 1 needs a single trial.
    """
    if not 0.0 <= inlier_ratio <= 1.0:
        raise ValueError("inlier_ratio must be in [0, 1]")
    if inlier_ratio >= 1.0:
        return 1
    hit = inlier_ratio**sample_size
    denominator = math.log1p(-hit) if hit < 1.0 else -math.inf
    if denominator == 0.0:
        return 1 << 62
    trials = math.ceil(math.log(1.0 - confidence) / denominator)
    return max(1, trials)


def local_optimize(
    E: np.ndarray,
    x1: np.ndarray,
    x2: np.ndarray,
    mask: np.ndarray,
    threshold: float,
    refits: int = 4,
) -> tuple[np.ndarray, np.ndarray]:
    """Refit the essential matrix on its consensus set up to `refits` times.

    Args:
        x1, x2: (n, 2) normalized camera coordinates.
        mask: boolean inlier mask of the starting model.
        threshold: Sampson distance bound in normalized coordinates.

    Returns:
        (E, mask) with an inlier count that never decreases relative to the
        input; a refit that degenerates or loses inliers keeps the previous
        model. A fixed point (mask unchanged by a refit) returns immediately,
        so the operation is idempotent.
    """
    best_E = np.asarray(E, dtype=np.float64)
    best_mask = np.asarray(mask, dtype=bool).copy()
    best_count = int(best_mask.sum())
    for _ in range(max(0, refits)):
        if best_count < _SAMPLE_SIZE:
            break
        try:
            E_new = geom.eight_point(x1[best_mask], x2[best_mask])
        except DegenerateConfiguration:
            break
        d = geom._sampson_many(E_new, x1, x2)
        mask_new = d < threshold
        count_new = int(mask_new.sum())
        if count_new < best_count:
            break
        if np.array_equal(mask_new, best_mask):
            best_E = E_new
            break
        best_E, best_mask, best_count = E_new, mask_new, count_new
    return best_E, best_mask


def estimate_relative_pose(
    corrs: np.ndarray,
    K1: geom.CameraIntrinsics,
    K2: geom.CameraIntrinsics,
    cfg: RansacConfig,
    frame_i: int = 0,
    frame_j: int = 1,
) -> RobustEstimate:
    """Robustly estimate the relative motion from pixel correspondences.

    Args:
        corrs: (n, 4) pixel correspondences (x1, y1, x2, y2), n >= 8.
        frame_i, frame_j: frame ids; the sampler is seeded with
            pair_seed(cfg.seed, frame_i, frame_j), so results for a pair do
            not depend on the order pairs are processed in.

    Returns:
        RobustEstimate with a unit-norm translation, the final inlier mask
        over `corrs`, and the number of RANSAC iterations run.

    Raises:
        InsufficientCorrespondences: n < 8.
        NoModelFound: no sampled model reached 8 inliers.
        CheiralityAmbiguity: the final decomposition vote tied (propagated).
    """
    corrs = np.asarray(corrs, dtype=np.float64).reshape(-1, 4)
    n = corrs.shape[0]
    if n < _SAMPLE_SIZE:
        raise InsufficientCorrespondences(f"need >= 8 correspondences, got {n}")

    x1 = K1.normalize(corrs[:, :2])
    x2 = K2.normalize(corrs[:, 2:])
    focal = math.sqrt(K1.focal_mean * K2.focal_mean)
    threshold = (cfg.pixel_threshold / focal) ** 2

    rng = np.random.default_rng(pair_seed(cfg.seed, frame_i, frame_j))
    best_E: np.ndarray | None = None
    best_mask: np.ndarray | None = None
    best_count = 0
    target = cfg.max_iterations
    it = 0
    while it < target:
        it += 1
        idx = rng.choice(n, _SAMPLE_SIZE, replace=False)
        try:
            E = geom.eight_point(x1[idx], x2[idx])
        except DegenerateConfiguration:
            continue
        d = geom._sampson_many(E, x1, x2)
        mask = d < threshold
        count = int(mask.sum())
        if count > best_count and count >= _SAMPLE_SIZE:
            E, mask = local_optimize(E, x1, x2, mask, threshold, cfg.lo_refits)
            count = int(mask.sum())
            best_E, best_mask, best_count = E, mask, count
            needed = adaptive_trials(count / n, cfg.confidence, _SAMPLE_SIZE)
            target = min(cfg.max_iterations, max(cfg.min_iterations, needed))

    if best_E is None or best_count < _SAMPLE_SIZE:
        raise NoModelFound(f"best consensus {best_count} below {_SAMPLE_SIZE}")

    # Final refit on the full consensus set, kept only if it holds the
    # consensus. Near-degenerate point sets (a single facade plane) can send
    # the least-squares fit far from the sampled model, so a refit that sheds
    # inliers is a replacement, not a refinement, and is discarded.
    try:
        E_final = geom.eight_point(x1[best_mask], x2[best_mask])
        d = geom._sampson_many(E_final, x1, x2)
        mask_final = d < threshold
        if int(mask_final.sum()) >= best_count:
            best_E, best_mask = E_final, mask_final
            best_count = int(mask_final.sum())
    except DegenerateConfiguration:
        pass

    motion = geom.decompose_essential(best_E, corrs[best_mask], K1, K2, frame_i, frame_j)
    return RobustEstimate(
        motion=motion,
        essential=best_E,
        inlier_mask=best_mask,
        inlier_count=best_count,
        iterations_run=it,
    )
