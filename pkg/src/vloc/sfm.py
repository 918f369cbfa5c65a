"""Incremental structure-from-motion over verified pairwise matches.

Reconstruction grows pose Fragments: a seeded two-view pair is extended one
image at a time through 2D-3D registration, with multi-view triangulation and
periodic bundle adjustment. Every fragment carries poses in its own gauge;
the world frame of a fragment is the camera frame of its first registered
image, with the scale set by the seed pair's unit baseline.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import NoInitPair, RegistrationFailed, SingularNormalEquations
from .geom import (
    CameraIntrinsics,
    Pose,
    RelativeMotion,
    _triangulate_many,
    matrix_to_quat,
    quat_from_rotvec,
    quat_multiply,
    quat_to_matrix,
)
from .matchcore import MatchSet
from .robust import RobustEstimate, adaptive_trials, pair_seed

logger = logging.getLogger(__name__)

_DEPTH_EPS = 1e-12
_HOMOGENEOUS_EPS = 1e-12


# ---------------------------------------------------------------------------
# Tracks


@dataclass(frozen=True)
class Track:
    """A chain of keypoint observations of one scene point.

    frames: (k,) int64 observing frame ids, strictly increasing.
    kps: (k,) int64 keypoint indices within each frame.
    xy: (k, 2) pixel positions of the observations.
    """

    frames: np.ndarray
    kps: np.ndarray
    xy: np.ndarray

    def observation(self, frame: int) -> int | None:
        idx = np.searchsorted(self.frames, frame)
        if idx < len(self.frames) and self.frames[idx] == frame:
            return int(idx)
        return None


class _UnionFind:
    def __init__(self) -> None:
        self.parent: dict[tuple[int, int], tuple[int, int]] = {}

    def find(self, a: tuple[int, int]) -> tuple[int, int]:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def add(self, a: tuple[int, int]) -> None:
        if a not in self.parent:
            self.parent[a] = a

    def union(self, a: tuple[int, int], b: tuple[int, int]) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def build_tracks(match_sets: Sequence[MatchSet]) -> list[Track]:
    """Chain pairwise matches into multi-frame tracks.

    Observations are joined transitively over (frame, keypoint) nodes. Any
    component that ends up observing the same frame through two different
    keypoints is inconsistent and discarded entirely; single-observation
    components are dropped. Tracks are ordered by their smallest
    (frame, keypoint) node.
    """
    uf = _UnionFind()
    coords: dict[tuple[int, int], np.ndarray] = {}
    for ms in match_sets:
        for k in range(len(ms)):
            a = (ms.frame_i, int(ms.kp_i[k]))
            b = (ms.frame_j, int(ms.kp_j[k]))
            uf.add(a)
            uf.add(b)
            uf.union(a, b)
            coords[a] = ms.xy_i[k]
            coords[b] = ms.xy_j[k]

    groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for node in uf.parent:
        groups.setdefault(uf.find(node), []).append(node)

    tracks: list[Track] = []
    for members in groups.values():
        members.sort()
        frames = [m[0] for m in members]
        if len(set(frames)) != len(frames):
            continue
        if len(members) < 2:
            continue
        tracks.append(
            Track(
                np.array(frames, dtype=np.int64),
                np.array([m[1] for m in members], dtype=np.int64),
                np.stack([coords[m] for m in members]),
            )
        )
    tracks.sort(key=lambda t: (int(t.frames[0]), int(t.kps[0])))
    logger.info("built %d tracks from %d match sets", len(tracks), len(match_sets))
    return tracks


# ---------------------------------------------------------------------------
# Fragments and configuration


@dataclass
class Fragment:
    """A contiguous reconstruction: per-frame poses plus triangulated points.

    points maps track index -> (3,) world position. ba_warning is set when a
    bundle adjustment could not take a single step.
    """

    fragment_id: int
    poses: dict[int, Pose] = field(default_factory=dict)
    points: dict[int, np.ndarray] = field(default_factory=dict)
    registration_order: list[int] = field(default_factory=list)
    ba_warning: bool = False

    @property
    def frames(self) -> list[int]:
        return sorted(self.poses)

    def __len__(self) -> int:
        return len(self.poses)


@dataclass
class PnpConfig:
    """RANSAC settings for 2D-3D registration."""

    pixel_threshold: float = 4.0
    confidence: float = 0.9999
    max_iterations: int = 1000
    min_iterations: int = 100
    seed: int = 0


@dataclass
class SfmConfig:
    """Reconstruction thresholds.

    Seed pairs need init_min_inliers two-view inliers and a median
    triangulation angle of at least init_min_angle_deg. Triangulated points
    must reproject within max_reprojection_px in every observing view, have
    positive depth everywhere, and subtend at least
    min_triangulation_angle_deg between every pair of observing rays. Bundle
    adjustment runs every ba_every registrations and once at fragment close.
    """

    init_min_inliers: int = 50
    init_min_angle_deg: float = 2.0
    max_reprojection_px: float = 4.0
    min_triangulation_angle_deg: float = 1.0
    min_pnp_points: int = 6
    ba_every: int = 5
    ba_max_iterations: int = 50
    ba_rel_tol: float = 1e-8
    pnp: PnpConfig = field(default_factory=PnpConfig)


@dataclass
class PairEstimate:
    """Two-view motion with its inlier correspondences in normalized coords."""

    frame_i: int
    frame_j: int
    motion: RelativeMotion
    x1n: np.ndarray
    x2n: np.ndarray

    @property
    def inlier_count(self) -> int:
        return self.x1n.shape[0]


# ---------------------------------------------------------------------------
# Seed pair selection


def _median_triangulation_angle_deg(est: PairEstimate) -> float:
    R = quat_to_matrix(est.motion.q)
    t = est.motion.t
    X, d1, d2, ok = _triangulate_many(R, t, est.x1n, est.x2n)
    ok = ok & (d1 > 0.0) & (d2 > 0.0)
    if not ok.any():
        return 0.0
    Xv = X[ok]
    c2 = -R.T @ t
    r1 = Xv
    r2 = Xv - c2
    n1 = np.linalg.norm(r1, axis=1)
    n2 = np.linalg.norm(r2, axis=1)
    good = (n1 > 0) & (n2 > 0)
    if not good.any():
        return 0.0
    cosang = np.einsum("ij,ij->i", r1[good], r2[good]) / (n1[good] * n2[good])
    angles = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return float(np.median(angles))


def select_init_pair(candidates: Sequence[PairEstimate], cfg: SfmConfig) -> PairEstimate:
    """Pick the seed pair for a new fragment.

    Qualifying pairs have at least init_min_inliers inliers and a median
    triangulation angle of init_min_angle_deg or more; among them the pair
    with the most inliers wins, ties broken by smallest (frame_i, frame_j).

    Raises:
        NoInitPair: no candidate qualifies.
    """
    best: PairEstimate | None = None
    best_key: tuple[int, int, int] | None = None
    for est in candidates:
        if est.inlier_count < cfg.init_min_inliers:
            continue
        if _median_triangulation_angle_deg(est) < cfg.init_min_angle_deg:
            continue
        key = (-est.inlier_count, est.frame_i, est.frame_j)
        if best_key is None or key < best_key:
            best, best_key = est, key
    if best is None:
        raise NoInitPair("no pair qualifies as reconstruction seed")
    return best


# ---------------------------------------------------------------------------
# 2D-3D registration


def _pnp_dlt(x2n: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """Direct linear transform for a projection from 6+ 2D-3D pairs.

    x2n holds normalized image coordinates. Returns (R, t) with R the nearest
    rotation (det +1) to the recovered matrix and the sign fixed so that the
    majority of the points have positive depth, or None when the system is
    numerically degenerate.
    """
    n = X.shape[0]
    c3 = X.mean(axis=0)
    d3 = np.linalg.norm(X - c3, axis=1).mean()
    if d3 < 1e-12:
        return None
    s3 = math.sqrt(3.0) / d3
    c2 = x2n.mean(axis=0)
    d2 = np.linalg.norm(x2n - c2, axis=1).mean()
    s2 = math.sqrt(2.0) / d2 if d2 > 1e-12 else 1.0

    Xn = (X - c3) * s3
    xn = (x2n - c2) * s2

    A = np.zeros((2 * n, 12))
    Xh = np.hstack([Xn, np.ones((n, 1))])
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, 0:1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xn[:, 1:2] * Xh
    try:
        _, _, Vt = np.linalg.svd(A, full_matrices=A.shape[0] < 12)
    except np.linalg.LinAlgError:
        return None
    P = Vt[-1].reshape(3, 4)

    H2inv = np.array([[1.0 / s2, 0.0, c2[0]], [0.0, 1.0 / s2, c2[1]], [0.0, 0.0, 1.0]])
    H3 = np.array(
        [
            [s3, 0.0, 0.0, -s3 * c3[0]],
            [0.0, s3, 0.0, -s3 * c3[1]],
            [0.0, 0.0, s3, -s3 * c3[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    P = H2inv @ P @ H3

    norm3 = np.linalg.norm(P[2, :3])
    if norm3 < 1e-12:
        return None
    P = P / norm3
    depths = X @ P[2, :3] + P[2, 3]
    if (depths < 0).sum() > (depths > 0).sum():
        P = -P

    M = P[:, :3]
    U, s, Vt = np.linalg.svd(M)
    if s[0] < 1e-12:
        return None
    D = np.diag([1.0, 1.0, float(np.sign(np.linalg.det(U @ Vt)))])
    R = U @ D @ Vt
    scale = s.mean()
    t = P[:, 3] / scale
    return R, t


def _reprojection_errors(R: np.ndarray, t: np.ndarray, X: np.ndarray, uv: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Per-point pixel reprojection error; points behind the camera get +inf."""
    Xc = X @ R.T + t
    z = Xc[:, 2]
    err = np.full(X.shape[0], np.inf)
    front = z > _DEPTH_EPS
    if front.any():
        u = K.fx * Xc[front, 0] / z[front] + K.cx
        v = K.fy * Xc[front, 1] / z[front] + K.cy
        err[front] = np.hypot(u - uv[front, 0], v - uv[front, 1])
    return err


def _refine_pose(
    R: np.ndarray, t: np.ndarray, X: np.ndarray, uv: np.ndarray, K: CameraIntrinsics, iterations: int = 30
) -> tuple[np.ndarray, np.ndarray]:
    """Levenberg-Marquardt pose polish minimizing pixel reprojection error."""

    def cost_of(Rc: np.ndarray, tc: np.ndarray) -> float:
        e = _reprojection_errors(Rc, tc, X, uv, K)
        if not np.isfinite(e).all():
            return float("inf")
        return float(np.sum(e * e))

    lam = 1e-3
    cost = cost_of(R, t)
    for _ in range(iterations):
        Xc = X @ R.T + t
        z = Xc[:, 2]
        if (z <= _DEPTH_EPS).any():
            break
        n = X.shape[0]
        Jproj = np.zeros((n, 2, 3))
        Jproj[:, 0, 0] = K.fx / z
        Jproj[:, 0, 2] = -K.fx * Xc[:, 0] / (z * z)
        Jproj[:, 1, 1] = K.fy / z
        Jproj[:, 1, 2] = -K.fy * Xc[:, 1] / (z * z)
        V = Xc - t
        Jrot = np.zeros((n, 3, 3))
        Jrot[:, 0, 1] = V[:, 2]
        Jrot[:, 0, 2] = -V[:, 1]
        Jrot[:, 1, 0] = -V[:, 2]
        Jrot[:, 1, 2] = V[:, 0]
        Jrot[:, 2, 0] = V[:, 1]
        Jrot[:, 2, 1] = -V[:, 0]
        J = np.zeros((2 * n, 6))
        J[:, 0:3] = (Jproj @ Jrot).reshape(2 * n, 3)
        J[:, 3:6] = Jproj.reshape(2 * n, 3)
        u = K.fx * Xc[:, 0] / z + K.cx
        v = K.fy * Xc[:, 1] / z + K.cy
        r = np.stack([u - uv[:, 0], v - uv[:, 1]], axis=1).reshape(-1)

        JtJ = J.T @ J
        g = J.T @ r
        stepped = False
        for _ in range(8):
            H = JtJ + lam * np.diag(np.diag(JtJ))
            try:
                delta = np.linalg.solve(H, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            Rn = quat_to_matrix(quat_multiply(quat_from_rotvec(delta[0:3]), matrix_to_quat(R)))
            tn = t + delta[3:6]
            new_cost = cost_of(Rn, tn)
            if new_cost < cost:
                R, t, cost = Rn, tn, new_cost
                lam = max(lam / 10.0, 1e-12)
                stepped = True
                break
            lam *= 10.0
        if not stepped:
            break
    return R, t


def register_image(
    uv: np.ndarray,
    X: np.ndarray,
    K: CameraIntrinsics,
    cfg: PnpConfig,
    seed: int | None = None,
) -> tuple[Pose, np.ndarray]:
    """Estimate a camera pose from 2D-3D correspondences with RANSAC.

    Args:
        uv: (n, 2) observed pixel positions.
        X: (n, 3) triangulated world points.
        seed: RNG seed; defaults to cfg.seed.

    Returns:
        (pose, inlier_mask) where the pose was refined on the consensus set
        of the best polished hypothesis.

    Raises:
        RegistrationFailed: fewer than 6 correspondences, or no model with at
            least 6 inliers was found.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    n = uv.shape[0]
    if n < 6:
        raise RegistrationFailed(f"need at least 6 correspondences, got {n}")

    x2n = K.normalize(uv)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    best_model: tuple[np.ndarray, np.ndarray] | None = None
    best_count = 0
    it = 0
    target = cfg.max_iterations
    while it < target:
        it += 1
        sample = rng.choice(n, size=6, replace=False)
        model = _pnp_dlt(x2n[sample], X[sample])
        if model is None:
            continue
        # The projective DLT has five more degrees of freedom than a
        # calibrated pose, so its estimate degrades badly on thin or
        # shallow point sets; a short polish on the sample itself turns a
        # coarse hypothesis into a scoreable one.
        R, t = _refine_pose(*model, X[sample], uv[sample], K, iterations=10)
        err = _reprojection_errors(R, t, X, uv, K)
        mask = err < cfg.pixel_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_model = (R, t)
            ratio = count / n
            target = min(cfg.max_iterations, max(cfg.min_iterations, adaptive_trials(ratio, cfg.confidence, 6)))

    if best_model is None or best_count < 6:
        raise RegistrationFailed(f"only {best_count} registration inliers")

    R, t = best_model
    err = _reprojection_errors(R, t, X, uv, K)
    mask = err < cfg.pixel_threshold
    R, t = _refine_pose(R, t, X[mask], uv[mask], K)
    err = _reprojection_errors(R, t, X, uv, K)
    mask = err < cfg.pixel_threshold
    if int(mask.sum()) < 6:
        raise RegistrationFailed(f"only {int(mask.sum())} inliers after refinement")
    return Pose.from_rt(R, t), mask


# ---------------------------------------------------------------------------
# Multi-view triangulation


def _triangulate_multiview(x_norm: np.ndarray, Rs: np.ndarray, ts: np.ndarray) -> np.ndarray | None:
    """DLT point from k >= 2 normalized observations and camera poses."""
    k = x_norm.shape[0]
    A = np.zeros((2 * k, 4))
    P = np.concatenate([Rs, ts[:, :, None]], axis=2)
    A[0::2] = x_norm[:, 0:1] * P[:, 2] - P[:, 0]
    A[1::2] = x_norm[:, 1:2] * P[:, 2] - P[:, 1]
    try:
        _, _, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError:
        return None
    Xh = Vt[-1]
    if abs(Xh[3]) < _HOMOGENEOUS_EPS:
        return None
    return Xh[:3] / Xh[3]


def _min_pairwise_angle_deg(X: np.ndarray, centers: np.ndarray) -> float:
    rays = X[None, :] - centers
    norms = np.linalg.norm(rays, axis=1)
    if (norms < 1e-12).any():
        return 0.0
    rays = rays / norms[:, None]
    dots = rays @ rays.T
    iu = np.triu_indices(centers.shape[0], k=1)
    cosmax = np.clip(dots[iu], -1.0, 1.0)
    return float(np.degrees(np.arccos(cosmax).min()))


def triangulate_tracks(
    fragment: Fragment,
    tracks: Sequence[Track],
    intrinsics: Mapping[int, CameraIntrinsics],
    cfg: SfmConfig,
    track_ids: Iterable[int] | None = None,
) -> list[int]:
    """Triangulate point-less tracks against the fragment's registered poses.

    Only tracks without a current point are attempted; an existing point is
    left untouched no matter how its observation set has grown since, so a
    later-registered near-duplicate view cannot retroactively kill a point
    that was accepted from well-separated views. A candidate is solved over
    all of its registered observations and accepted only when every depth is
    positive, every reprojection error is at most cfg.max_reprojection_px,
    and the minimum pairwise ray angle reaches
    cfg.min_triangulation_angle_deg; otherwise the point stays absent.

    Args:
        track_ids: indices into `tracks` to attempt; all tracks by default.

    Returns:
        Sorted indices of tracks active in the fragment after the pass,
        restricted to the attempted candidates.
    """
    ids = range(len(tracks)) if track_ids is None else sorted(set(track_ids))
    kept: list[int] = []
    for tid in ids:
        if tid in fragment.points:
            kept.append(tid)
            continue
        track = tracks[tid]
        sel = [k for k, f in enumerate(track.frames) if int(f) in fragment.poses]
        if len(sel) < 2:
            continue
        frames = [int(track.frames[k]) for k in sel]
        uv = track.xy[sel]
        Rs = np.stack([quat_to_matrix(fragment.poses[f].q) for f in frames])
        ts = np.stack([fragment.poses[f].t for f in frames])
        xn = np.stack([intrinsics[f].normalize(uv[k]) for k, f in enumerate(frames)])

        X = _triangulate_multiview(xn, Rs, ts)
        ok = X is not None
        if ok:
            Xc = Rs @ X + ts
            ok = bool((Xc[:, 2] > 0.0).all())
        if ok:
            for k, f in enumerate(frames):
                Kf = intrinsics[f]
                u = Kf.fx * Xc[k, 0] / Xc[k, 2] + Kf.cx
                v = Kf.fy * Xc[k, 1] / Xc[k, 2] + Kf.cy
                if math.hypot(u - uv[k, 0], v - uv[k, 1]) > cfg.max_reprojection_px:
                    ok = False
                    break
        if ok:
            centers = np.stack([fragment.poses[f].center() for f in frames])
            ok = _min_pairwise_angle_deg(X, centers) >= cfg.min_triangulation_angle_deg
        if ok:
            fragment.points[tid] = X
            kept.append(tid)
    return kept


def prune_points(
    fragment: Fragment,
    tracks: Sequence[Track],
    intrinsics: Mapping[int, CameraIntrinsics],
    cfg: SfmConfig,
    check_angle: bool = False,
) -> int:
    """Drop active points that violate the acceptance gates.

    Bundle adjustment can move poses out from under a point, and a mistaken
    track merge yields a point no pose fits; both show up as reprojection or
    cheirality violations against the current geometry. The pairwise-angle
    gate is optional because an angle violation appears whenever a
    near-duplicate view joins an otherwise healthy track, which is not a
    defect of the point; it is enforced once at fragment close so closed
    fragments carry only points that pass every gate.

    Returns:
        Number of points removed.
    """
    removed = 0
    for tid in list(fragment.points):
        track = tracks[tid]
        sel = [k for k, f in enumerate(track.frames) if int(f) in fragment.poses]
        X = fragment.points[tid]
        ok = len(sel) >= 2
        if ok:
            frames = [int(track.frames[k]) for k in sel]
            uv = track.xy[sel]
            Rs = np.stack([quat_to_matrix(fragment.poses[f].q) for f in frames])
            ts = np.stack([fragment.poses[f].t for f in frames])
            Xc = Rs @ X + ts
            ok = bool((Xc[:, 2] > 0.0).all())
        if ok:
            for k, f in enumerate(frames):
                Kf = intrinsics[f]
                u = Kf.fx * Xc[k, 0] / Xc[k, 2] + Kf.cx
                v = Kf.fy * Xc[k, 1] / Xc[k, 2] + Kf.cy
                if math.hypot(u - uv[k, 0], v - uv[k, 1]) > cfg.max_reprojection_px:
                    ok = False
                    break
        if ok and check_angle:
            centers = np.stack([fragment.poses[f].center() for f in frames])
            ok = _min_pairwise_angle_deg(X, centers) >= cfg.min_triangulation_angle_deg
        if not ok:
            del fragment.points[tid]
            removed += 1
    return removed


# ---------------------------------------------------------------------------
# Bundle adjustment


@dataclass
class BaReport:
    cost_initial: float
    cost_final: float
    iterations: int
    accepted_steps: int
    warning: bool = False


class BundleSystem:
    """Reprojection least squares over a fragment's cameras and points.

    Parameters are local increments around a stored base state: every free
    camera contributes a rotation vector (applied by left multiplication)
    plus a translation part, and every point a position increment. Gauge
    freedom is removed by freezing the first registered camera entirely and
    the norm of the second camera's translation, which moves on its sphere
    through a two-parameter tangent retraction. The packed parameter vector
    is all active camera parameters in registration order followed by all
    point increments in sorted track-id order; the base state corresponds to
    the zero vector.
    """

    def __init__(
        self,
        fragment: Fragment,
        tracks: Sequence[Track],
        intrinsics: Mapping[int, CameraIntrinsics],
    ) -> None:
        self.cam_frames = list(fragment.registration_order)
        self.point_ids = sorted(fragment.points)
        cam_index = {f: c for c, f in enumerate(self.cam_frames)}
        nc, npt = len(self.cam_frames), len(self.point_ids)
        self.R = np.stack([quat_to_matrix(fragment.poses[f].q) for f in self.cam_frames])
        self.t = np.stack([fragment.poses[f].t for f in self.cam_frames])
        self.X = (
            np.stack([fragment.points[p] for p in self.point_ids])
            if npt
            else np.zeros((0, 3))
        )

        obs_cam, obs_pt, obs_uv, obs_k = [], [], [], []
        for p, tid in enumerate(self.point_ids):
            track = tracks[tid]
            for k, f in enumerate(track.frames):
                f = int(f)
                if f not in cam_index:
                    continue
                obs_cam.append(cam_index[f])
                obs_pt.append(p)
                obs_uv.append(track.xy[k])
                K = intrinsics[f]
                obs_k.append((K.fx, K.fy, K.cx, K.cy))
        self.obs_cam = np.array(obs_cam, dtype=np.int64)
        self.obs_pt = np.array(obs_pt, dtype=np.int64)
        self.obs_uv = np.array(obs_uv, dtype=np.float64).reshape(-1, 2)
        ks = np.array(obs_k, dtype=np.float64).reshape(-1, 4)
        self.obs_fx, self.obs_fy = ks[:, 0], ks[:, 1]
        self.obs_cx, self.obs_cy = ks[:, 2], ks[:, 3]

        # Second camera keeps its translation norm unless it is degenerate.
        self.t1_norm = float(np.linalg.norm(self.t[1])) if nc >= 2 else 0.0
        self.fix_t1_norm = nc >= 2 and self.t1_norm > 1e-12
        self._update_t1_basis()

        self.active = np.ones((nc, 6), dtype=bool)
        self.active[0] = False
        if self.fix_t1_norm:
            self.active[1, 5] = False

        self._cam_slots = np.full((nc, 6), -1, dtype=np.int64)
        self._cam_slots[self.active] = np.arange(int(self.active.sum()))
        self.n_cam_params = int(self.active.sum())
        self.n_params = self.n_cam_params + 3 * npt

        # Observation pairs sharing a point, for the Schur complement.
        by_point: dict[int, list[int]] = {}
        for m, p in enumerate(self.obs_pt):
            by_point.setdefault(int(p), []).append(m)
        pa, pb = [], []
        for members in by_point.values():
            for a in members:
                for b in members:
                    pa.append(a)
                    pb.append(b)
        self._pair_a = np.array(pa, dtype=np.int64)
        self._pair_b = np.array(pb, dtype=np.int64)

    def _update_t1_basis(self) -> None:
        if not self.fix_t1_norm:
            self.t1_dir = np.zeros(3)
            self.t1_basis = np.zeros((3, 2))
            return
        u = self.t[1] / self.t1_norm
        aux = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(u, aux)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(u, e1)
        self.t1_dir = u
        self.t1_basis = np.stack([e1, e2], axis=1)

    def x0(self) -> np.ndarray:
        return np.zeros(self.n_params)

    def _unpack(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64).reshape(self.n_params)
        nc = len(self.cam_frames)
        d = np.zeros((nc, 6))
        d[self.active] = x[: self.n_cam_params]
        R = np.empty_like(self.R)
        t = np.empty_like(self.t)
        for c in range(nc):
            w = d[c, :3]
            if w.any():
                R[c] = quat_to_matrix(quat_multiply(quat_from_rotvec(w), matrix_to_quat(self.R[c])))
            else:
                R[c] = self.R[c]
            if c == 1 and self.fix_t1_norm:
                u = self.t1_dir + self.t1_basis @ d[c, 3:5]
                t[c] = self.t1_norm * u / np.linalg.norm(u)
            else:
                t[c] = self.t[c] + d[c, 3:6]
        X = self.X + x[self.n_cam_params :].reshape(-1, 3)
        return R, t, X

    def residuals(self, x: np.ndarray) -> np.ndarray:
        """Stacked pixel reprojection residuals (2m,) at increment x.

        Observations whose point falls behind the camera yield NaN entries.
        """
        R, t, X = self._unpack(x)
        Xc = np.einsum("mij,mj->mi", R[self.obs_cam], X[self.obs_pt]) + t[self.obs_cam]
        z = Xc[:, 2]
        zsafe = np.where(z > _DEPTH_EPS, z, np.nan)
        u = self.obs_fx * Xc[:, 0] / zsafe + self.obs_cx
        v = self.obs_fy * Xc[:, 1] / zsafe + self.obs_cy
        r = np.stack([u - self.obs_uv[:, 0], v - self.obs_uv[:, 1]], axis=1)
        return r.reshape(-1)

    def cost(self, x: np.ndarray) -> float:
        r = self.residuals(x)
        if not np.isfinite(r).all():
            return float("inf")
        return 0.5 * float(r @ r)

    def _blocks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-observation Jacobian blocks and residuals at the base state.

        Returns (Jc (m,2,6) padded camera blocks with inactive columns
        zeroed, Jp (m,2,3) point blocks, r (m,2) residuals).
        """
        R = self.R[self.obs_cam]
        Xc = np.einsum("mij,mj->mi", R, self.X[self.obs_pt]) + self.t[self.obs_cam]
        z = Xc[:, 2]
        m = Xc.shape[0]

        Jproj = np.zeros((m, 2, 3))
        Jproj[:, 0, 0] = self.obs_fx / z
        Jproj[:, 0, 2] = -self.obs_fx * Xc[:, 0] / (z * z)
        Jproj[:, 1, 1] = self.obs_fy / z
        Jproj[:, 1, 2] = -self.obs_fy * Xc[:, 1] / (z * z)

        V = Xc - self.t[self.obs_cam]
        Jrot = np.zeros((m, 3, 3))
        Jrot[:, 0, 1] = V[:, 2]
        Jrot[:, 0, 2] = -V[:, 1]
        Jrot[:, 1, 0] = -V[:, 2]
        Jrot[:, 1, 2] = V[:, 0]
        Jrot[:, 2, 0] = V[:, 1]
        Jrot[:, 2, 1] = -V[:, 0]

        Jc = np.zeros((m, 2, 6))
        Jc[:, :, 0:3] = Jproj @ Jrot
        Jc[:, :, 3:6] = Jproj
        if self.fix_t1_norm:
            sel = self.obs_cam == 1
            if sel.any():
                B = np.zeros((3, 3))
                B[:, 0:2] = self.t1_norm * self.t1_basis
                Jc[sel, :, 3:6] = Jc[sel][:, :, 3:6] @ B
        Jc = Jc * self.active[self.obs_cam][:, None, :]

        Jp = Jproj @ R

        u = self.obs_fx * Xc[:, 0] / z + self.obs_cx
        v = self.obs_fy * Xc[:, 1] / z + self.obs_cy
        r = np.stack([u - self.obs_uv[:, 0], v - self.obs_uv[:, 1]], axis=1)
        return Jc, Jp, r

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """Dense residual Jacobian (2m, n_params).

        Exact at the base state (x = 0); for nonzero x the derivative is
        taken in the chart centered at the retracted state.
        """
        x = np.asarray(x, dtype=np.float64).reshape(self.n_params)
        if x.any():
            rebased = self._copy()
            rebased.rebase(x)
            return rebased.jacobian(rebased.x0())
        Jc, Jp, _ = self._blocks()
        m = Jc.shape[0]
        J = np.zeros((2 * m, self.n_params))
        rows = np.arange(m)
        for k in range(6):
            slots = self._cam_slots[self.obs_cam, k]
            valid = slots >= 0
            J[2 * rows[valid], slots[valid]] = Jc[valid, 0, k]
            J[2 * rows[valid] + 1, slots[valid]] = Jc[valid, 1, k]
        for k in range(3):
            cols = self.n_cam_params + 3 * self.obs_pt + k
            J[2 * rows, cols] = Jp[:, 0, k]
            J[2 * rows + 1, cols] = Jp[:, 1, k]
        return J

    def _copy(self) -> "BundleSystem":
        import copy as _copy

        return _copy.deepcopy(self)

    def solve_step(self, lam: float) -> np.ndarray:
        """One damped normal-equation solve via the point Schur complement.

        Raises:
            SingularNormalEquations: a point block or the reduced camera
                system cannot be solved.
        """
        Jc, Jp, r = self._blocks()
        nc, npt = len(self.cam_frames), len(self.point_ids)

        U = np.zeros((nc, 6, 6))
        np.add.at(U, self.obs_cam, np.einsum("mij,mik->mjk", Jc, Jc))
        Vb = np.zeros((npt, 3, 3))
        np.add.at(Vb, self.obs_pt, np.einsum("mij,mik->mjk", Jp, Jp))
        W = np.einsum("mij,mik->mjk", Jc, Jp)
        g_c = np.zeros((nc, 6))
        np.add.at(g_c, self.obs_cam, np.einsum("mij,mi->mj", Jc, r))
        g_p = np.zeros((npt, 3))
        np.add.at(g_p, self.obs_pt, np.einsum("mij,mi->mj", Jp, r))

        # The damping diagonal is floored so parameters with empty or
        # degenerate blocks (a camera whose points were all dropped, or
        # gauge-free directions of a weakly connected fragment) still yield a
        # positive-definite system instead of a singular one.
        di = np.arange(6)
        Ud = U.copy()
        Ud[:, di, di] += lam * np.maximum(U[:, di, di], 1e-8)
        dj = np.arange(3)
        Vd = Vb.copy()
        Vd[:, dj, dj] += lam * np.maximum(Vb[:, dj, dj], 1e-8)

        try:
            Vinv = np.linalg.inv(Vd)
        except np.linalg.LinAlgError as exc:
            raise SingularNormalEquations("singular point block") from exc
        if not np.isfinite(Vinv).all():
            raise SingularNormalEquations("non-finite point block inverse")

        S = np.zeros((nc, nc, 6, 6))
        S[np.arange(nc), np.arange(nc)] = Ud
        pa, pb = self._pair_a, self._pair_b
        if pa.size:
            contrib = np.einsum(
                "pij,pjk,plk->pil", W[pa], Vinv[self.obs_pt[pa]], W[pb]
            )
            flat = self.obs_cam[pa] * nc + self.obs_cam[pb]
            np.add.at(S.reshape(nc * nc, 6, 6), flat, -contrib)

        y = np.einsum("pij,pj->pi", Vinv, g_p)
        rhs = -g_c
        np.add.at(rhs, self.obs_cam, np.einsum("mij,mj->mi", W, y[self.obs_pt]))

        Sfull = S.transpose(0, 2, 1, 3).reshape(6 * nc, 6 * nc)
        bfull = rhs.reshape(6 * nc)
        ix = self.active.reshape(-1)
        A = Sfull[np.ix_(ix, ix)]
        b = bfull[ix]
        try:
            dc_active = np.linalg.solve(A, b)
        except np.linalg.LinAlgError as exc:
            raise SingularNormalEquations("singular reduced camera system") from exc
        if not np.isfinite(dc_active).all():
            raise SingularNormalEquations("non-finite camera step")

        dc = np.zeros((nc, 6))
        dc[self.active] = dc_active

        wtdc = np.zeros((npt, 3))
        np.add.at(wtdc, self.obs_pt, np.einsum("mij,mi->mj", W, dc[self.obs_cam]))
        dp = np.einsum("pij,pj->pi", Vinv, -g_p - wtdc)

        x = np.zeros(self.n_params)
        x[: self.n_cam_params] = dc[self.active]
        x[self.n_cam_params :] = dp.reshape(-1)
        return x

    def rebase(self, x: np.ndarray) -> None:
        """Absorb the increment x into the base state."""
        self.R, self.t, self.X = self._unpack(x)
        self._update_t1_basis()

    def write_back(self, fragment: Fragment) -> None:
        for c, f in enumerate(self.cam_frames):
            fragment.poses[f] = Pose.from_rt(self.R[c], self.t[c])
        for p, tid in enumerate(self.point_ids):
            fragment.points[tid] = self.X[p].copy()


def bundle_adjust(
    fragment: Fragment,
    tracks: Sequence[Track],
    intrinsics: Mapping[int, CameraIntrinsics],
    cfg: SfmConfig,
) -> BaReport:
    """Jointly refine a fragment's poses and points.

    Levenberg-Marquardt with multiplicative diagonal damping (initial 1e-3,
    scaled by 10 on rejection and by 1/10 on acceptance with floor 1e-12);
    steps are accepted only on strict cost decrease. When no step is ever
    accepted the fragment is left unmodified and its ba_warning flag is set.
    """
    if len(fragment.points) == 0 or len(fragment.poses) < 2:
        return BaReport(0.0, 0.0, 0, 0)
    system = BundleSystem(fragment, tracks, intrinsics)
    cost = system.cost(system.x0())
    initial = cost
    lam = 1e-3
    accepted = 0
    iterations = 0
    for _ in range(cfg.ba_max_iterations):
        if cost < 1e-24:
            break
        iterations += 1
        stepped = False
        rel = 0.0
        while lam <= 1e12:
            try:
                dx = system.solve_step(lam)
            except SingularNormalEquations:
                lam *= 10.0
                continue
            new_cost = system.cost(dx)
            if new_cost < cost:
                system.rebase(dx)
                rel = (cost - new_cost) / max(cost, 1e-300)
                cost = new_cost
                lam = max(lam / 10.0, 1e-12)
                accepted += 1
                stepped = True
                break
            lam *= 10.0
        if not stepped:
            break
        if rel < cfg.ba_rel_tol:
            break
    if accepted == 0:
        fragment.ba_warning = True
        logger.warning("bundle adjustment made no progress on fragment %d", fragment.fragment_id)
        return BaReport(initial, initial, iterations, 0, warning=True)
    system.write_back(fragment)
    return BaReport(initial, cost, iterations, accepted)


# ---------------------------------------------------------------------------
# Incremental reconstruction


def _pair_estimates(
    intrinsics: Mapping[int, CameraIntrinsics],
    matches: Mapping[tuple[int, int], MatchSet],
    estimates: Mapping[tuple[int, int], RobustEstimate],
) -> list[PairEstimate]:
    """Init-pair candidates from already-filtered match sets; the rows of a
    match set are taken as that pair's surviving correspondences."""
    out: list[PairEstimate] = []
    for (i, j), est in sorted(estimates.items()):
        ms = matches.get((i, j))
        if ms is None or len(ms) == 0 or i not in intrinsics or j not in intrinsics:
            continue
        corrs = ms.correspondences()
        out.append(
            PairEstimate(
                i,
                j,
                est.motion,
                intrinsics[i].normalize(corrs[:, 0:2]),
                intrinsics[j].normalize(corrs[:, 2:4]),
            )
        )
    return out


def reconstruct(
    intrinsics: Mapping[int, CameraIntrinsics],
    match_sets: Sequence[MatchSet],
    estimates: Mapping[tuple[int, int], RobustEstimate],
    cfg: SfmConfig,
) -> list[Fragment]:
    """Grow pose fragments from verified pairwise matches.

    match_sets are expected to be reduced to two-view inliers already; their
    rows feed both track building and init-pair quality scoring.
    Fragments are seeded with the best qualifying two-view pair among frames
    not yet reconstructed, extended by 2D-3D registration of whichever frame
    sees the most active points (at least cfg.min_pnp_points, ties to the
    smaller frame id), and bundle adjusted every cfg.ba_every registrations
    and at close. A frame whose registration fails is set aside and retried
    after the next successful registration and again after each closing
    adjustment, since refined geometry can turn a failing frame registrable.
    Seeding draws only on frames outside every existing fragment, but growth
    may register a frame that another fragment already holds, so fragments
    can overlap; downstream motion assembly resolves overlap by preferring
    the largest fragment covering a pair. Points that violate the
    reprojection or cheirality gates are dropped after every adjustment, and
    a closing pass additionally enforces the pairwise-angle gate so returned
    fragments carry only points passing all gates. The returned fragments
    are sorted by descending frame count and renumbered in that order.
    """
    matches = {(ms.frame_i, ms.frame_j): ms for ms in match_sets}
    tracks = build_tracks(match_sets)
    pair_estimates = _pair_estimates(intrinsics, matches, estimates)

    tracks_by_frame: dict[int, list[int]] = {}
    for tid, track in enumerate(tracks):
        for f in track.frames:
            tracks_by_frame.setdefault(int(f), []).append(tid)

    used: set[int] = set()
    fragments: list[Fragment] = []
    while True:
        candidates = [
            pe for pe in pair_estimates if pe.frame_i not in used and pe.frame_j not in used
        ]
        try:
            seed_pair = select_init_pair(candidates, cfg)
        except NoInitPair:
            break

        frag = Fragment(fragment_id=len(fragments))
        i, j = seed_pair.frame_i, seed_pair.frame_j
        frag.poses[i] = Pose.identity()
        frag.poses[j] = Pose(seed_pair.motion.q, seed_pair.motion.t)
        frag.registration_order = [i, j]
        touched = set(tracks_by_frame.get(i, [])) | set(tracks_by_frame.get(j, []))
        triangulate_tracks(frag, tracks, intrinsics, cfg, track_ids=touched)
        logger.info(
            "fragment %d seeded with pair (%d, %d): %d points",
            frag.fragment_id, i, j, len(frag.points),
        )

        failed: set[int] = set()
        since_ba = 0
        while True:
            grew = 0
            while True:
                best_frame = None
                best_count = 0
                for frame, tids in tracks_by_frame.items():
                    if frame in frag.poses or frame in failed:
                        continue
                    if frame not in intrinsics:
                        continue
                    count = sum(1 for tid in tids if tid in frag.points)
                    if count > best_count or (count == best_count and best_frame is not None and count > 0 and frame < best_frame):
                        best_frame, best_count = frame, count
                if best_frame is None or best_count < cfg.min_pnp_points:
                    break

                uv_rows, X_rows, obs_tids = [], [], []
                for tid in tracks_by_frame[best_frame]:
                    if tid not in frag.points:
                        continue
                    k = tracks[tid].observation(best_frame)
                    uv_rows.append(tracks[tid].xy[k])
                    X_rows.append(frag.points[tid])
                    obs_tids.append(tid)
                try:
                    pose, _ = register_image(
                        np.array(uv_rows),
                        np.array(X_rows),
                        intrinsics[best_frame],
                        cfg.pnp,
                        seed=pair_seed(cfg.pnp.seed, 0, best_frame),
                    )
                except RegistrationFailed:
                    logger.info("frame %d failed to register, setting aside", best_frame)
                    failed.add(best_frame)
                    continue
                frag.poses[best_frame] = pose
                frag.registration_order.append(best_frame)
                failed.clear()
                grew += 1
                triangulate_tracks(
                    frag, tracks, intrinsics, cfg, track_ids=tracks_by_frame[best_frame]
                )
                since_ba += 1
                if since_ba >= cfg.ba_every:
                    bundle_adjust(frag, tracks, intrinsics, cfg)
                    prune_points(frag, tracks, intrinsics, cfg)
                    all_touched = set()
                    for f in frag.poses:
                        all_touched.update(tracks_by_frame.get(f, []))
                    triangulate_tracks(frag, tracks, intrinsics, cfg, track_ids=all_touched)
                    since_ba = 0

            bundle_adjust(frag, tracks, intrinsics, cfg)
            prune_points(frag, tracks, intrinsics, cfg)
            all_touched = set()
            for f in frag.poses:
                all_touched.update(tracks_by_frame.get(f, []))
            triangulate_tracks(frag, tracks, intrinsics, cfg, track_ids=all_touched)
            since_ba = 0
            # Frames set aside during growth get one more look after each
            # closing adjustment, since the refined geometry can turn a
            # failing registration into a passing one. The fragment closes
            # once a whole pass registers nothing.
            if grew == 0 or not failed:
                break
            failed.clear()
        pruned = prune_points(frag, tracks, intrinsics, cfg, check_angle=True)
        if pruned:
            logger.info(
                "fragment %d: dropped %d points on the closing gate pass",
                frag.fragment_id, pruned,
            )
        used.update(frag.poses)
        fragments.append(frag)
        logger.info(
            "fragment %d closed: %d frames, %d points",
            frag.fragment_id, len(frag.poses), len(frag.points),
        )

    fragments.sort(key=lambda f: -len(f.poses))
    for idx, frag in enumerate(fragments):
        frag.fragment_id = idx
    return fragments
