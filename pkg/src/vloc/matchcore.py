"""Keypoint matching through dense warps over image crop combinations.

Crop coordinate systems: a crop rectangle lives in full-image pixel
coordinates; "crop pixels" are full-image pixels minus the crop origin, so a
(w, h) crop spans [0, w] x [0, h]; "normalized" coordinates scale crop pixels
into [0, 1]^2. Warp grids store, per cell, the predicted target position as
normalized coordinates of the destination crop plus a certainty in [0, 1].
Grid cells cover the source crop uniformly with cell centers at pixel
centers, so cell (r, c) of an HxW grid sits at crop pixel
((c + 0.5) * w / W, (r + 0.5) * h / H).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .errors import MissingCropCombination, OutOfCrop, OutOfDomain

_DOMAIN_TOL = 1e-9


class CropId(str, Enum):
    FULL = "FULL"
    LEFT = "LEFT"
    RIGHT = "RIGHT"
    ANY = "ANY"


CROP_COMBINATIONS: tuple[tuple[CropId, CropId], ...] = tuple(
    (a, b)
    for a in (CropId.FULL, CropId.LEFT, CropId.RIGHT)
    for b in (CropId.FULL, CropId.LEFT, CropId.RIGHT)
)


@dataclass(frozen=True)
class CropRect:
    """Axis-aligned crop in full-image pixels."""

    x: float
    y: float
    w: float
    h: float
    frame: int = 0
    crop_id: CropId = CropId.FULL

    def __post_init__(self) -> None:
        if self.w <= 0.0 or self.h <= 0.0:
            raise ValueError("crop must have positive extent")
        if self.crop_id is CropId.ANY:
            raise ValueError("ANY is a selector, not a concrete crop")

    def contains(self, p: np.ndarray, tol: float = _DOMAIN_TOL) -> np.ndarray:
        """Boolean mask for full-image points (..., 2) inside the crop."""
        p = np.asarray(p, dtype=np.float64)
        return (
            (p[..., 0] >= self.x - tol)
            & (p[..., 0] <= self.x + self.w + tol)
            & (p[..., 1] >= self.y - tol)
            & (p[..., 1] <= self.y + self.h + tol)
        )


def derive_crops(full: CropRect) -> dict[CropId, CropRect]:
    """FULL plus the LEFT/RIGHT halves that partition it horizontally."""
    half = full.w / 2.0
    return {
        CropId.FULL: full,
        CropId.LEFT: CropRect(full.x, full.y, half, full.h, full.frame, CropId.LEFT),
        CropId.RIGHT: CropRect(full.x + half, full.y, full.w - half, full.h, full.frame, CropId.RIGHT),
    }


# ---------------------------------------------------------------------------
# Coordinate spaces


@dataclass(frozen=True)
class FullImage:
    width: float
    height: float


@dataclass(frozen=True)
class CropPixels:
    crop: CropRect


@dataclass(frozen=True)
class CropNormalized:
    crop: CropRect


CoordSpace = FullImage | CropPixels | CropNormalized


def _to_full(p: np.ndarray, space: CoordSpace) -> np.ndarray:
    if isinstance(space, FullImage):
        return p
    c = space.crop
    if isinstance(space, CropPixels):
        return p + np.array([c.x, c.y])
    return np.array([c.x + p[0] * c.w, c.y + p[1] * c.h])


def _from_full(p: np.ndarray, space: CoordSpace) -> np.ndarray:
    if isinstance(space, FullImage):
        return p
    c = space.crop
    if isinstance(space, CropPixels):
        return p - np.array([c.x, c.y])
    return np.array([(p[0] - c.x) / c.w, (p[1] - c.y) / c.h])


def _domain_of(space: CoordSpace) -> tuple[float, float]:
    if isinstance(space, FullImage):
        return space.width, space.height
    if isinstance(space, CropPixels):
        return space.crop.w, space.crop.h
    return 1.0, 1.0


def crop_transform(p: np.ndarray, src: CoordSpace, dst: CoordSpace) -> np.ndarray:
    """Convert a point between full-image, crop-pixel, and normalized spaces.

    Raises:
        OutOfDomain: p outside the source domain, or the converted point
            outside the destination domain (tolerance 1e-9 in source units).
    """
    p = np.asarray(p, dtype=np.float64).reshape(2)
    w, h = _domain_of(src)
    if not (-_DOMAIN_TOL <= p[0] <= w + _DOMAIN_TOL and -_DOMAIN_TOL <= p[1] <= h + _DOMAIN_TOL):
        raise OutOfDomain(f"point {p.tolist()} outside source domain {w}x{h}")
    out = _from_full(_to_full(p, src), dst)
    w, h = _domain_of(dst)
    if not (-_DOMAIN_TOL <= out[0] <= w + _DOMAIN_TOL and -_DOMAIN_TOL <= out[1] <= h + _DOMAIN_TOL):
        raise OutOfDomain(f"point maps to {out.tolist()}, outside destination domain {w}x{h}")
    return out


# ---------------------------------------------------------------------------
# Warps and keypoints


@dataclass
class DenseWarp:
    """Dense correspondence field from src_crop into dst_crop.

    grid: (H, W, 3) float array of (tx, ty, certainty); tx, ty are normalized
    coordinates in dst_crop, certainty lies in [0, 1].
    """

    src_crop: CropRect
    dst_crop: CropRect
    grid: np.ndarray

    def __post_init__(self) -> None:
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3 or self.grid.shape[2] != 3:
            raise ValueError("warp grid must have shape (H, W, 3)")
        if self.grid.shape[0] < 2 or self.grid.shape[1] < 2:
            raise ValueError("warp grid must be at least 2x2")
        if not np.isfinite(self.grid).all():
            raise ValueError("warp grid must be finite")
        cert = self.grid[..., 2]
        if cert.min() < -1e-9 or cert.max() > 1.0 + 1e-9:
            raise ValueError("warp certainty must lie in [0, 1]")


@dataclass
class KeypointSet:
    """Detected keypoints of one frame: (n, 3) array of (x, y, score)."""

    frame: int
    points: np.ndarray

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("keypoints must be finite")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]


@dataclass
class MatchSet:
    """One-to-one keypoint matches between two frames."""

    frame_i: int
    frame_j: int
    kp_i: np.ndarray
    kp_j: np.ndarray
    xy_i: np.ndarray
    xy_j: np.ndarray
    certainty: np.ndarray

    def __post_init__(self) -> None:
        self.kp_i = np.asarray(self.kp_i, dtype=np.int64).reshape(-1)
        self.kp_j = np.asarray(self.kp_j, dtype=np.int64).reshape(-1)
        self.xy_i = np.asarray(self.xy_i, dtype=np.float64).reshape(-1, 2)
        self.xy_j = np.asarray(self.xy_j, dtype=np.float64).reshape(-1, 2)
        self.certainty = np.asarray(self.certainty, dtype=np.float64).reshape(-1)
        n = len(self.kp_i)
        if not (len(self.kp_j) == len(self.xy_i) == len(self.xy_j) == len(self.certainty) == n):
            raise ValueError("match arrays disagree in length")
        if n and (len(np.unique(self.kp_i)) != n or len(np.unique(self.kp_j)) != n):
            raise ValueError("matches must be one-to-one")

    def __len__(self) -> int:
        return len(self.kp_i)

    @classmethod
    def empty(cls, frame_i: int, frame_j: int) -> "MatchSet":
        return cls(frame_i, frame_j, np.empty(0, np.int64), np.empty(0, np.int64),
                   np.empty((0, 2)), np.empty((0, 2)), np.empty(0))

    def correspondences(self) -> np.ndarray:
        """(n, 4) array of (x_i, y_i, x_j, y_j) pixel correspondences."""
        return np.hstack([self.xy_i, self.xy_j])


@dataclass
class MatchConfig:
    """certainty_floor gates warp samples; nn_distance_fraction scales the
    mutual-nearest-neighbor acceptance radius by max(image width, height)."""

    certainty_floor: float = 0.1
    nn_distance_fraction: float = 0.005


# ---------------------------------------------------------------------------
# Warp sampling


def _sample_warp_many(warp: DenseWarp, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear warp lookup for (n, 2) crop-pixel points (no domain checks).

    Returns (predicted dst-crop pixels (n, 2), certainty (n,)).
    """
    H, W = warp.grid.shape[:2]
    sc, dc = warp.src_crop, warp.dst_crop
    u = p[:, 0] * (W / sc.w) - 0.5
    v = p[:, 1] * (H / sc.h) - 0.5
    u = np.clip(u, 0.0, W - 1.0)
    v = np.clip(v, 0.0, H - 1.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u0 = np.minimum(u0, W - 2)
    v0 = np.minimum(v0, H - 2)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    g00 = warp.grid[v0, u0]
    g01 = warp.grid[v0, u0 + 1]
    g10 = warp.grid[v0 + 1, u0]
    g11 = warp.grid[v0 + 1, u0 + 1]
    top = g00 * (1.0 - fu) + g01 * fu
    bot = g10 * (1.0 - fu) + g11 * fu
    val = top * (1.0 - fv) + bot * fv
    pred = np.empty((p.shape[0], 2))
    pred[:, 0] = val[:, 0] * dc.w
    pred[:, 1] = val[:, 1] * dc.h
    return pred, val[:, 2]


def sample_warp(warp: DenseWarp, p: np.ndarray) -> tuple[np.ndarray, float]:
    """Sample the warp at a source-crop pixel position.

    Args:
        p: (2,) point in src_crop pixels.

    Returns:
        (predicted point in dst_crop pixels, certainty), bilinearly
        interpolated with edge clamping.

    Raises:
        OutOfCrop: p outside [0, w] x [0, h] of the source crop.
    """
    p = np.asarray(p, dtype=np.float64).reshape(2)
    sc = warp.src_crop
    if not (-_DOMAIN_TOL <= p[0] <= sc.w + _DOMAIN_TOL and -_DOMAIN_TOL <= p[1] <= sc.h + _DOMAIN_TOL):
        raise OutOfCrop(f"point {p.tolist()} outside source crop {sc.w}x{sc.h}")
    pred, cert = _sample_warp_many(warp, p.reshape(1, 2))
    return pred[0], float(cert[0])


def mean_certainty(warp: DenseWarp) -> float:
    """Mean of the certainty channel over the whole grid."""
    return float(warp.grid[..., 2].mean())


# ---------------------------------------------------------------------------
# Matching


def _directional_predictions(
    warp: DenseWarp, kps: KeypointSet, floor: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Warp every keypoint inside the source crop whose certainty clears the
    floor. Returns (global kp indices, predicted full-image points, certainty)."""
    xy = kps.xy
    inside = np.flatnonzero(warp.src_crop.contains(xy))
    if inside.size == 0:
        return inside, np.empty((0, 2)), np.empty(0)
    crop_pts = xy[inside] - np.array([warp.src_crop.x, warp.src_crop.y])
    pred, cert = _sample_warp_many(warp, crop_pts)
    keep = cert >= floor
    pred_full = pred[keep] + np.array([warp.dst_crop.x, warp.dst_crop.y])
    return inside[keep], pred_full, cert[keep]


def _nearest(pred: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-prediction nearest target: (argmin, min distance, exact-tie mask)."""
    diff = pred[:, None, :] - targets[None, :, :]
    D = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    nn = np.argmin(D, axis=1)
    dmin = D[np.arange(D.shape[0]), nn]
    ties = (D == dmin[:, None]).sum(axis=1) > 1
    return nn, dmin, ties


def match_single_crop(
    warp_ab: DenseWarp,
    warp_ba: DenseWarp,
    kps_a: KeypointSet,
    kps_b: KeypointSet,
    size_a: tuple[float, float],
    size_b: tuple[float, float],
    cfg: MatchConfig,
) -> MatchSet:
    """Mutual-nearest-neighbor matches through one crop combination.

    A keypoint pair (i, j) is kept iff i's warped prediction has j as its
    strict nearest keypoint in frame b and vice versa, and both prediction
    distances stay below nn_distance_fraction * max(width, height) of the
    image the distance is measured in. Match certainty is the mean of the two
    directional warp certainties. Exactly equidistant nearest neighbors are
    rejected.
    """
    ia, pred_a, cert_a = _directional_predictions(warp_ab, kps_a, cfg.certainty_floor)
    ib, pred_b, cert_b = _directional_predictions(warp_ba, kps_b, cfg.certainty_floor)
    if ia.size == 0 or ib.size == 0:
        return MatchSet.empty(kps_a.frame, kps_b.frame)

    nn_a, dist_a, tie_a = _nearest(pred_a, kps_b.xy)
    nn_b, dist_b, tie_b = _nearest(pred_b, kps_a.xy)

    # Position of each frame-b keypoint in the kept prediction list, or -1.
    inv_b = np.full(len(kps_b), -1, dtype=np.int64)
    inv_b[ib] = np.arange(ib.size)

    limit_a = cfg.nn_distance_fraction * max(size_b)
    limit_b = cfg.nn_distance_fraction * max(size_a)

    j = nn_a
    pos_b = inv_b[j]
    ok = pos_b >= 0
    ok &= ~tie_a
    ok &= dist_a < limit_a
    safe_pos = np.where(ok, pos_b, 0)
    ok &= nn_b[safe_pos] == ia
    ok &= ~tie_b[safe_pos]
    ok &= dist_b[safe_pos] < limit_b

    sel = np.flatnonzero(ok)
    kp_i = ia[sel]
    kp_j = j[sel]
    certainty = 0.5 * (cert_a[sel] + cert_b[inv_b[kp_j]])
    order = np.lexsort((kp_j, kp_i))
    return MatchSet(
        kps_a.frame,
        kps_b.frame,
        kp_i[order],
        kp_j[order],
        kps_a.xy[kp_i[order]],
        kps_b.xy[kp_j[order]],
        certainty[order],
    )


def merge_match_sets(frame_i: int, frame_j: int, parts: Sequence[MatchSet]) -> MatchSet:
    """Merge per-combination match sets into a one-to-one set.

    Duplicate (kp_i, kp_j) pairs keep their maximum certainty; conflicting
    pairs are resolved greedily by descending certainty (ties broken by
    ascending (kp_i, kp_j)); the result is sorted by (kp_i, kp_j). The
    outcome does not depend on the order of `parts`.
    """
    best: dict[tuple[int, int], tuple[float, np.ndarray, np.ndarray]] = {}
    for ms in parts:
        for k in range(len(ms)):
            key = (int(ms.kp_i[k]), int(ms.kp_j[k]))
            cert = float(ms.certainty[k])
            cur = best.get(key)
            if cur is None or cert > cur[0]:
                best[key] = (cert, ms.xy_i[k], ms.xy_j[k])

    order = sorted(best.items(), key=lambda kv: (-kv[1][0], kv[0][0], kv[0][1]))
    used_i: set[int] = set()
    used_j: set[int] = set()
    rows = []
    for (i, jj), (cert, xi, xj) in order:
        if i in used_i or jj in used_j:
            continue
        used_i.add(i)
        used_j.add(jj)
        rows.append((i, jj, xi, xj, cert))
    rows.sort(key=lambda r: (r[0], r[1]))
    if not rows:
        return MatchSet.empty(frame_i, frame_j)
    return MatchSet(
        frame_i,
        frame_j,
        np.array([r[0] for r in rows], dtype=np.int64),
        np.array([r[1] for r in rows], dtype=np.int64),
        np.array([r[2] for r in rows]),
        np.array([r[3] for r in rows]),
        np.array([r[4] for r in rows]),
    )


def match_multicrop(
    warps: Mapping[tuple[CropId, CropId], tuple[DenseWarp, DenseWarp]],
    kps_a: KeypointSet,
    kps_b: KeypointSet,
    size_a: tuple[float, float],
    size_b: tuple[float, float],
    cfg: MatchConfig,
) -> MatchSet:
    """Match through all nine crop combinations and merge.

    Args:
        warps: mapping (crop_a, crop_b) -> (warp a->b, warp b->a) covering
            {FULL, LEFT, RIGHT} x {FULL, LEFT, RIGHT}.

    Raises:
        MissingCropCombination: any of the nine keys is absent.
    """
    missing = [c for c in CROP_COMBINATIONS if c not in warps]
    if missing:
        names = ", ".join(f"{a.value}x{b.value}" for a, b in missing)
        raise MissingCropCombination(f"missing crop combinations: {names}")
    parts = [
        match_single_crop(warps[c][0], warps[c][1], kps_a, kps_b, size_a, size_b, cfg)
        for c in CROP_COMBINATIONS
    ]
    return merge_match_sets(kps_a.frame, kps_b.frame, parts)
