"""Image retrieval over global descriptors for loop-closure pair proposals.

Frames far apart in capture order but close in descriptor space are proposed
as extra matching pairs; a cheap dense-warp overlap check then discards
proposals whose views do not actually cover common structure.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, MissingWarp
from .matchcore import DenseWarp, mean_certainty

logger = logging.getLogger(__name__)


@dataclass
class Embedding:
    """Global descriptor of one frame."""

    frame: int
    vector: np.ndarray

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if self.vector.size == 0:
            raise ValueError("embedding vector must be non-empty")
        if not np.isfinite(self.vector).all():
            raise ValueError("embedding vector must be finite")


class PairSource(str, Enum):
    SEQUENTIAL = "SEQUENTIAL"
    RETRIEVED = "RETRIEVED"
    MANUAL = "MANUAL"


@dataclass(frozen=True)
class FramePair:
    """Unordered frame pair stored with frame_i < frame_j."""

    frame_i: int
    frame_j: int
    source: PairSource = PairSource.RETRIEVED

    def __post_init__(self) -> None:
        if self.frame_i >= self.frame_j:
            raise ValueError("pair must satisfy frame_i < frame_j")


@dataclass
class RetrievalConfig:
    """Thresholds for descriptor-based pair proposal.

    max_distance applies to the descriptor distance (inclusive),
    min_separation to the frame-index gap (strict), and
    mean_certainty_floor to the mean warp certainty of a proposal (strict).
    metric is "normalized" (Euclidean between L2-normalized vectors) or
    "euclidean" (raw vectors).
    """

    max_distance: float = 0.35
    min_separation: int = 20
    mean_certainty_floor: float = 0.05
    metric: str = "normalized"

    def __post_init__(self) -> None:
        if self.metric not in ("normalized", "euclidean"):
            raise ValueError(f"unknown metric {self.metric!r}")


def embedding_distances(vectors: np.ndarray, metric: str = "normalized") -> np.ndarray:
    """Pairwise descriptor distance matrix.

    Args:
        vectors: (n, d) array, one descriptor per row.

    Returns:
        (n, n) symmetric matrix of Euclidean distances, computed after L2
        normalization when metric is "normalized".
    """
    v = np.asarray(vectors, dtype=np.float64)
    if metric == "normalized":
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        norms = np.where(norms == 0.0, 1.0, norms)
        v = v / norms
    diff = v[:, None, :] - v[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def propose_pairs(embeddings: Sequence[Embedding], cfg: RetrievalConfig) -> list[FramePair]:
    """Propose loop-closure pairs from descriptor proximity.

    A pair (i, j) with i < j is proposed iff its descriptor distance is at
    most cfg.max_distance and j - i exceeds cfg.min_separation. Output is
    sorted by (frame_i, frame_j).

    Raises:
        DimensionMismatch: embeddings disagree in dimension.
    """
    if len(embeddings) < 2:
        return []
    dims = {e.vector.size for e in embeddings}
    if len(dims) != 1:
        raise DimensionMismatch(f"embedding dimensions differ: {sorted(dims)}")
    frames = np.array([e.frame for e in embeddings], dtype=np.int64)
    order = np.argsort(frames, kind="stable")
    frames = frames[order]
    vectors = np.stack([embeddings[k].vector for k in order])

    D = embedding_distances(vectors, cfg.metric)
    out: list[FramePair] = []
    n = len(frames)
    for a in range(n):
        for b in range(a + 1, n):
            fi, fj = int(frames[a]), int(frames[b])
            if fj - fi <= cfg.min_separation:
                continue
            if D[a, b] <= cfg.max_distance:
                out.append(FramePair(fi, fj, PairSource.RETRIEVED))
    out.sort(key=lambda p: (p.frame_i, p.frame_j))
    logger.info("proposed %d retrieval pairs from %d frames", len(out), n)
    return out


def filter_pairs(
    pairs: Sequence[FramePair],
    warps: Mapping[tuple[int, int], DenseWarp],
    cfg: RetrievalConfig,
) -> list[FramePair]:
    """Keep proposals whose forward full-image warp shows real overlap.

    The warp for (frame_i, frame_j) is the full-crop to full-crop field from
    frame_i into frame_j; a pair survives iff the mean of its certainty
    channel strictly exceeds cfg.mean_certainty_floor.

    Raises:
        MissingWarp: a proposed pair has no warp in `warps`.
    """
    kept: list[FramePair] = []
    for pair in pairs:
        key = (pair.frame_i, pair.frame_j)
        warp = warps.get(key)
        if warp is None:
            raise MissingWarp(f"no warp available for pair {key}")
        if mean_certainty(warp) > cfg.mean_certainty_floor:
            kept.append(pair)
    logger.info("kept %d of %d retrieval pairs after warp check", len(kept), len(pairs))
    return kept
