"""Camera model, poses, and two-view epipolar geometry.

Conventions used throughout the package:

- Pixel coordinates are continuous, origin at the top-left image corner, x
  right, y down. A width-W image spans [0, W] horizontally.
- A pose is camera-from-world: ``x_cam = R(q) @ x_world + t``.
- A relative motion (i -> j) maps camera-i coordinates to camera-j
  coordinates: ``x_j = R @ x_i + t``.
- Quaternions are ``(w, x, y, z)``, unit norm, hemisphere ``w >= 0``.
- Correspondences are float arrays of shape (n, 4) with columns
  ``(x1, y1, x2, y2)``; "normalized" coordinates mean K^-1-mapped ideal
  camera coordinates.
- An essential matrix is a plain (3, 3) array satisfying
  ``x2_hat^T E x1_hat = 0`` for normalized homogeneous points, scaled to
  Frobenius norm sqrt(2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheiralityAmbiguity,
    DegenerateConfiguration,
    DegenerateTranslation,
    InsufficientCorrespondences,
    NonPositiveDepth,
    ParallelRays,
    ZeroGradient,
)

_DEPTH_EPS = 1e-12
_TRANSLATION_EPS = 1e-12
_RAY_ANGLE_EPS = 1e-9
_SAMPSON_DENOM_EPS = 1e-18
_NULLSPACE_RATIO_MAX = 0.95


# ---------------------------------------------------------------------------
# Quaternions


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm and canonicalized to the w >= 0 hemisphere."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    if q[0] < 0.0 or (q[0] == 0.0 and _first_nonzero_negative(q[1:])):
        q = -q
    return q


def _first_nonzero_negative(v: np.ndarray) -> bool:
    for x in v:
        if x != 0.0:
            return bool(x < 0.0)
    return False


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b (apply b's rotation first)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_rotvec(w: np.ndarray) -> np.ndarray:
    """Quaternion for a rotation vector (axis * angle)."""
    w = np.asarray(w, dtype=np.float64)
    angle = np.linalg.norm(w)
    if angle < 1e-300:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle
    return quat_normalize(np.concatenate(([math.cos(half)], math.sin(half) / angle * w)))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) of a rotation matrix, stable for all traces."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix [v]_x."""
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rotation_angle_rad(R: np.ndarray) -> float:
    """Rotation angle of R, with the trace argument clamped to [-1, 1]."""
    c = (np.trace(R) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; the principal point must lie inside the image."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError("focal lengths must be positive")
        if not (0.0 < self.cx < self.width and 0.0 < self.cy < self.height):
            raise ValueError("principal point must lie strictly inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def normalize(self, px: np.ndarray) -> np.ndarray:
        """Map pixel coordinates (..., 2) to ideal camera coordinates."""
        px = np.asarray(px, dtype=np.float64)
        out = np.empty_like(px)
        out[..., 0] = (px[..., 0] - self.cx) / self.fx
        out[..., 1] = (px[..., 1] - self.cy) / self.fy
        return out

    def denormalize(self, xn: np.ndarray) -> np.ndarray:
        """Map ideal camera coordinates (..., 2) to pixels."""
        xn = np.asarray(xn, dtype=np.float64)
        out = np.empty_like(xn)
        out[..., 0] = xn[..., 0] * self.fx + self.cx
        out[..., 1] = xn[..., 1] * self.fy + self.cy
        return out

    @property
    def focal_mean(self) -> float:
        """Geometric mean of the focal lengths, used to scale pixel thresholds."""
        return math.sqrt(self.fx * self.fy)


@dataclass
class Pose:
    """Camera-from-world rigid transform ``x_cam = R(q) x_world + t``."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self) -> None:
        self.q = quat_normalize(np.asarray(self.q, dtype=np.float64))
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(matrix_to_quat(R), t)

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T t."""
        return -self.rotation().T @ self.t

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Transform world points (..., 3) into camera coordinates."""
        X = np.asarray(X, dtype=np.float64)
        return X @ self.rotation().T + self.t


@dataclass
class RelativeMotion:
    """Motion from camera i to camera j: ``x_j = R(q) x_i + t``."""

    q: np.ndarray
    t: np.ndarray
    frame_i: int = 0
    frame_j: int = 1

    def __post_init__(self) -> None:
        self.q = quat_normalize(np.asarray(self.q, dtype=np.float64))
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)


# ---------------------------------------------------------------------------
# Projection and relative motion


def project(K: CameraIntrinsics, pose: Pose, X: np.ndarray) -> np.ndarray:
    """Project a world point to pixel coordinates.

    Raises:
        NonPositiveDepth: if the camera-frame depth is <= 1e-12.
    """
    xc = pose.rotation() @ np.asarray(X, dtype=np.float64) + pose.t
    if xc[2] <= _DEPTH_EPS:
        raise NonPositiveDepth(f"depth {xc[2]:.3e} not positive")
    return np.array([K.fx * xc[0] / xc[2] + K.cx, K.fy * xc[1] / xc[2] + K.cy])


def relative_motion(pose_i: Pose, pose_j: Pose, frame_i: int = 0, frame_j: int = 1) -> RelativeMotion:
    """Relative motion i -> j from two camera-from-world poses.

    R_rel = R_j R_i^T and t_rel = t_j - R_rel t_i, so that composing the
    result with pose_i reproduces pose_j exactly.
    """
    Ri = pose_i.rotation()
    Rj = pose_j.rotation()
    R_rel = Rj @ Ri.T
    t_rel = pose_j.t - R_rel @ pose_i.t
    return RelativeMotion(matrix_to_quat(R_rel), t_rel, frame_i, frame_j)


# ---------------------------------------------------------------------------
# Essential matrix


def essential_from_motion(rel: RelativeMotion) -> np.ndarray:
    """E = [t]_x R, scaled to Frobenius norm sqrt(2).

    Raises:
        DegenerateTranslation: if ||t|| <= 1e-12 (pure rotation has no
            essential matrix).
    """
    t = rel.t
    if np.linalg.norm(t) <= _TRANSLATION_EPS:
        raise DegenerateTranslation("translation norm too small for an essential matrix")
    E = skew(t) @ rel.rotation()
    return E * (math.sqrt(2.0) / np.linalg.norm(E))


def project_to_essential(M: np.ndarray) -> np.ndarray:
    """Nearest essential matrix: singular values replaced by (s, s, 0), then
    rescaled to Frobenius norm sqrt(2)."""
    U, s, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    sbar = 0.5 * (s[0] + s[1])
    if sbar <= 0.0:
        raise DegenerateConfiguration("essential projection collapsed to zero")
    E = U @ np.diag([sbar, sbar, 0.0]) @ Vt
    return E * (math.sqrt(2.0) / np.linalg.norm(E))


def _hartley_transform(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Similarity transform taking points to zero centroid, mean norm sqrt(2)."""
    centroid = x.mean(axis=0)
    d = np.linalg.norm(x - centroid, axis=1).mean()
    scale = math.sqrt(2.0) / d if d > 0.0 else 1.0
    T = np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )
    xt = (x - centroid) * scale
    return xt, T


def eight_point(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Normalized eight-point essential matrix from >= 8 correspondences.

    Args:
        x1: (n, 2) normalized camera coordinates in the first view.
        x2: (n, 2) matching coordinates in the second view.

    Returns:
        (3, 3) essential matrix with x2_hat^T E x1_hat = 0, Frobenius norm
        sqrt(2).

    Raises:
        InsufficientCorrespondences: n < 8.
        DegenerateConfiguration: the design-matrix nullspace is not a stable
            one-dimensional space (ratio of the two smallest of the nine
            column-space singular values above 0.95, treating 0/0 as 1).
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    n = x1.shape[0]
    if n < 8 or x2.shape[0] != n:
        raise InsufficientCorrespondences(f"need >= 8 correspondences, got {n}")

    x1t, T1 = _hartley_transform(x1)
    x2t, T2 = _hartley_transform(x2)

    A = np.empty((n, 9))
    A[:, 0] = x2t[:, 0] * x1t[:, 0]
    A[:, 1] = x2t[:, 0] * x1t[:, 1]
    A[:, 2] = x2t[:, 0]
    A[:, 3] = x2t[:, 1] * x1t[:, 0]
    A[:, 4] = x2t[:, 1] * x1t[:, 1]
    A[:, 5] = x2t[:, 1]
    A[:, 6] = x1t[:, 0]
    A[:, 7] = x1t[:, 1]
    A[:, 8] = 1.0

    # The minimal case needs the full right basis for the nullspace row; for
    # n >= 9 the reduced factorization already carries all nine right vectors.
    _, s, Vt = np.linalg.svd(A, full_matrices=n < 9)
    svals = np.zeros(9)
    svals[: s.shape[0]] = s
    # A stable solution needs exactly one near-zero singular value among the
    # nine; two comparable smallest values mean the nullspace direction is
    # arbitrary.
    second_smallest, smallest = svals[7], svals[8]
    if second_smallest <= 1e-12 * max(svals[0], 1e-300):
        raise DegenerateConfiguration("design matrix rank below 8")
    if smallest / second_smallest > _NULLSPACE_RATIO_MAX:
        raise DegenerateConfiguration("unstable nullspace in eight-point system")

    E_tilde = Vt[-1].reshape(3, 3)
    E = T2.T @ E_tilde @ T1
    return project_to_essential(E)


def sampson_distance(E: np.ndarray, corr: np.ndarray) -> float | np.ndarray:
    """First-order (Sampson) squared epipolar distance.

    Accepts a single correspondence (4,) or a batch (n, 4) in normalized
    camera coordinates. For a single correspondence a vanishing denominator
    raises ZeroGradient; in the batch form those entries come back as +inf so
    callers can treat them as outliers.
    """
    corr = np.asarray(corr, dtype=np.float64)
    single = corr.ndim == 1
    c = corr.reshape(-1, 4)
    d = _sampson_many(np.asarray(E, dtype=np.float64), c[:, :2], c[:, 2:])
    if single:
        if not np.isfinite(d[0]):
            raise ZeroGradient("Sampson denominator below 1e-18")
        return float(d[0])
    return d


def _sampson_many(E: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Vectorized Sampson distances; non-finite where the gradient vanishes."""
    ones = np.ones((x1.shape[0], 1))
    p1 = np.hstack([x1, ones])
    p2 = np.hstack([x2, ones])
    Ex1 = p1 @ E.T
    Etx2 = p2 @ E
    num = np.einsum("ij,ij->i", p2, Ex1) ** 2
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    out = np.full(x1.shape[0], np.inf)
    ok = den >= _SAMPSON_DENOM_EPS
    out[ok] = num[ok] / den[ok]
    return out


# ---------------------------------------------------------------------------
# Decomposition and triangulation


def triangulate(rel: RelativeMotion, c: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Linear (DLT) two-view triangulation of one correspondence.

    Args:
        rel: relative motion i -> j.
        c: correspondence (x1, y1, x2, y2) in normalized camera coordinates.

    Returns:
        (point in camera-i coordinates, depth in i, depth in j).

    Raises:
        ParallelRays: ray directions within 1e-9 rad of each other.
    """
    c = np.asarray(c, dtype=np.float64)
    R = rel.rotation()
    t = rel.t

    d1 = np.array([c[0], c[1], 1.0])
    d2 = R.T @ np.array([c[2], c[3], 1.0])
    cosang = abs(float(d1 @ d2) / (np.linalg.norm(d1) * np.linalg.norm(d2)))
    if math.acos(min(1.0, cosang)) <= _RAY_ANGLE_EPS:
        raise ParallelRays("triangulation rays are parallel")

    # Projection matrices in camera-i coordinates: P1 = [I | 0], P2 = [R | t].
    P2 = np.hstack([R, t.reshape(3, 1)])
    A = np.empty((4, 4))
    A[0] = [-1.0, 0.0, c[0], 0.0]
    A[1] = [0.0, -1.0, c[1], 0.0]
    A[2] = c[2] * P2[2] - P2[0]
    A[3] = c[3] * P2[2] - P2[1]
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-300:
        raise ParallelRays("triangulated point at infinity")
    X = Xh[:3] / Xh[3]
    depth_i = float(X[2])
    depth_j = float((R @ X + t)[2])
    return X, depth_i, depth_j


def _triangulate_many(
    R: np.ndarray, t: np.ndarray, x1: np.ndarray, x2: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batched linear triangulation under motion (R, t).

    Args:
        x1, x2: (n, 2) normalized camera coordinates.

    Returns:
        (points (n, 3) in camera-i coordinates, depths_i, depths_j,
        valid mask). Invalid entries (parallel rays or points at infinity)
        have undefined point values.
    """
    n = x1.shape[0]
    d1 = np.hstack([x1, np.ones((n, 1))])
    d2 = np.hstack([x2, np.ones((n, 1))]) @ R
    num = np.abs(np.einsum("ij,ij->i", d1, d2))
    den = np.linalg.norm(d1, axis=1) * np.linalg.norm(d2, axis=1)
    cosang = np.minimum(num / den, 1.0)
    valid = np.arccos(cosang) > _RAY_ANGLE_EPS

    P2 = np.hstack([R, t.reshape(3, 1)])
    A = np.zeros((n, 4, 4))
    A[:, 0, 0] = -1.0
    A[:, 0, 2] = x1[:, 0]
    A[:, 1, 1] = -1.0
    A[:, 1, 2] = x1[:, 1]
    A[:, 2] = x2[:, 0, None] * P2[2] - P2[0]
    A[:, 3] = x2[:, 1, None] * P2[2] - P2[1]
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[:, -1, :]
    w = Xh[:, 3]
    valid &= np.abs(w) > 1e-300
    w_safe = np.where(valid, w, 1.0)
    X = Xh[:, :3] / w_safe[:, None]
    depth_i = X[:, 2]
    depth_j = X @ R[2] + t[2]
    return X, depth_i, depth_j, valid


def decompose_essential(
    E: np.ndarray,
    corrs: np.ndarray,
    K1: CameraIntrinsics,
    K2: CameraIntrinsics,
    frame_i: int = 0,
    frame_j: int = 1,
) -> RelativeMotion:
    """Recover the relative motion from an essential matrix.

    The four (R, +-t) candidates are ranked by how many of the supplied inlier
    correspondences (pixel coordinates) triangulate with positive depth in
    both views; the winner is returned with unit-norm translation.

    Raises:
        CheiralityAmbiguity: the best and second-best candidate tie.
    """
    corrs = np.asarray(corrs, dtype=np.float64).reshape(-1, 4)
    x1 = K1.normalize(corrs[:, :2])
    x2 = K2.normalize(corrs[:, 2:])

    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=np.float64))
    if np.linalg.det(U) < 0.0:
        U = -U
    if np.linalg.det(Vt) < 0.0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R1 = U @ W @ Vt
    R2 = U @ W.T @ Vt
    t = U[:, 2]
    t = t / np.linalg.norm(t)

    candidates = [(R1, t), (R1, -t), (R2, t), (R2, -t)]
    votes = []
    for R, tc in candidates:
        _, di, dj, valid = _triangulate_many(R, tc, x1, x2)
        votes.append(int(np.count_nonzero(valid & (di > 0.0) & (dj > 0.0))))

    order = sorted(range(4), key=lambda i: votes[i], reverse=True)
    if votes[order[0]] == votes[order[1]]:
        raise CheiralityAmbiguity(f"cheirality vote tie: {votes}")
    R, tc = candidates[order[0]]
    return RelativeMotion(matrix_to_quat(R), tc, frame_i, frame_j)


# ---------------------------------------------------------------------------
# Error metrics


def pose_errors(est: RelativeMotion, gt: RelativeMotion) -> tuple[float, float]:
    """(rotation error in milliradians, translation error in meters).

    Rotation error is 1000 * acos(clamp((trace(R_gt^T R_est) - 1) / 2));
    translation error is the Euclidean distance between translation vectors.
    """
    R_rel = gt.rotation().T @ est.rotation()
    rot_mrad = 1000.0 * rotation_angle_rad(R_rel)
    trans_m = float(np.linalg.norm(est.t - gt.t))
    return rot_mrad, trans_m
