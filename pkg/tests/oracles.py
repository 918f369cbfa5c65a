"""Independent reference implementations backing the test suite.

Everything here is written from first principles with plain numpy so the
package code under test is never in the loop: rotations come from
Rodrigues' formula, projection goes through an explicit 4x4 homogeneous
matrix, retrieval is a quadratic scan over all index pairs, and the
reductions are python-loop sums. Tests freeze their expected values
against these functions.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# Rotations and rigid transforms


def rodrigues(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation matrix about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.eye(3)
    k = axis / n
    K = np.array(
        [
            [0.0, -k[2], k[1]],
            [k[2], 0.0, -k[0]],
            [-k[1], k[0], 0.0],
        ]
    )
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def random_rotation(rng: np.random.Generator, max_angle: float = math.pi) -> np.ndarray:
    axis = rng.normal(size=3)
    angle = rng.uniform(-max_angle, max_angle)
    return rodrigues(axis, angle)


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle in radians recovered from the trace."""
    c = (np.trace(R) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


def homogeneous_matrix(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = np.asarray(t, dtype=np.float64)
    return M


def project_homogeneous(
    R: np.ndarray, t: np.ndarray, fx: float, fy: float, cx: float, cy: float, X: np.ndarray
) -> np.ndarray:
    """Pixel projection via an explicit 4x4 homogeneous matrix product.

    Args:
        X: (n, 3) world points.

    Returns:
        (n, 2) pixel coordinates.
    """
    M = homogeneous_matrix(R, t)
    Xh = np.column_stack([X, np.ones(len(X))])
    Y = (M @ Xh.T).T
    u = fx * Y[:, 0] / Y[:, 2] + cx
    v = fy * Y[:, 1] / Y[:, 2] + cy
    return np.column_stack([u, v])


def transform_points(R: np.ndarray, t: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Apply X -> R X + t to (n, 3) points."""
    return X @ np.asarray(R, dtype=np.float64).T + np.asarray(t, dtype=np.float64)


# ---------------------------------------------------------------------------
# Two-view geometry


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def essential_from_rt(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """E = [t]x R for the camera-2-from-camera-1 motion (R, t)."""
    return skew(np.asarray(t, dtype=np.float64)) @ np.asarray(R, dtype=np.float64)


def epipolar_residuals(E: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """|x2_h^T E x1_h| per correspondence, x1/x2 normalized (n, 2)."""
    x1h = np.column_stack([x1, np.ones(len(x1))])
    x2h = np.column_stack([x2, np.ones(len(x2))])
    out = np.empty(len(x1))
    for k in range(len(x1)):
        out[k] = abs(float(x2h[k] @ E @ x1h[k]))
    return out


def essential_distance(E1: np.ndarray, E2: np.ndarray) -> float:
    """Frobenius distance between unit-normalized essentials, sign-free."""
    A = E1 / np.linalg.norm(E1)
    B = E2 / np.linalg.norm(E2)
    return float(min(np.linalg.norm(A - B), np.linalg.norm(A + B)))


def synthetic_pair(
    rng: np.random.Generator,
    n: int,
    rotation_deg: float = 12.0,
    baseline: float = 1.0,
    noise_px: float = 0.0,
    focal: float = 1000.0,
):
    """Random relative pose with n correspondences seen by both cameras.

    Camera 1 is the identity; camera 2 is displaced by a rotation of up to
    rotation_deg and a translation of norm `baseline` chosen mostly sideways
    so triangulation angles stay healthy. Points are drawn in front of
    camera 1 and rejection-sampled until they are in front of camera 2 too.

    Returns:
        (R, t, x1, x2, X): the motion, normalized image coordinates (n, 2)
        in each camera, and the points in camera-1 coordinates.
    """
    axis = rng.normal(size=3)
    angle = math.radians(rotation_deg) * rng.uniform(0.2, 1.0)
    R = rodrigues(axis, angle)
    t_dir = rng.normal(size=3)
    t_dir[2] *= 0.2
    t_dir /= np.linalg.norm(t_dir)
    t = baseline * t_dir

    pts = []
    while len(pts) < n:
        cand = np.column_stack(
            [
                rng.uniform(-4.0, 4.0, size=n),
                rng.uniform(-3.0, 3.0, size=n),
                rng.uniform(6.0, 18.0, size=n),
            ]
        )
        in_front = transform_points(R, t, cand)[:, 2] > 0.5
        pts.extend(cand[in_front])
    X = np.array(pts[:n])
    X2 = transform_points(R, t, X)
    x1 = X[:, :2] / X[:, 2:3]
    x2 = X2[:, :2] / X2[:, 2:3]
    if noise_px > 0.0:
        x1 = x1 + rng.normal(0.0, noise_px / focal, size=x1.shape)
        x2 = x2 + rng.normal(0.0, noise_px / focal, size=x2.shape)
    return R, t, x1, x2, X


def plant_outliers(
    rng: np.random.Generator, x1: np.ndarray, x2: np.ndarray, fraction: float
):
    """Replace a uniform random subset of x2 rows with uniform junk.

    Returns:
        (x1, x2_corrupted, outlier_mask) where the mask marks planted rows.
    """
    n = len(x1)
    k = int(round(fraction * n))
    idx = rng.choice(n, size=k, replace=False)
    x2c = x2.copy()
    x2c[idx] = rng.uniform(-0.5, 0.5, size=(k, 2))
    mask = np.zeros(n, dtype=bool)
    mask[idx] = True
    return x1, x2c, mask


def ransac_trials(ratio: float, confidence: float, sample_size: int) -> int:
    """Direct evaluation of the adaptive trial-count formula."""
    if ratio >= 1.0:
        return 1
    good = ratio**sample_size
    if good <= 0.0:
        return 10**9
    return int(math.ceil(math.log(1.0 - confidence) / math.log(1.0 - good)))


# ---------------------------------------------------------------------------
# Numerical differentiation


def central_jacobian(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian of f at x, one column per input."""
    x = np.asarray(x, dtype=np.float64)
    f0 = np.asarray(f(x), dtype=np.float64)
    J = np.zeros((f0.size, x.size))
    for k in range(x.size):
        dx = np.zeros_like(x)
        dx[k] = eps
        fp = np.asarray(f(x + dx), dtype=np.float64)
        fm = np.asarray(f(x - dx), dtype=np.float64)
        J[:, k] = (fp - fm) / (2.0 * eps)
    return J


# ---------------------------------------------------------------------------
# Interpolation and reductions


def bilinear_reference(corners: np.ndarray, fx: float, fy: float) -> float:
    """Bilinear blend of 4 corner values at fractional offsets (fx, fy).

    corners is [[v00, v10], [v01, v11]] with v10 one step in x.
    """
    top = corners[0][0] * (1.0 - fx) + corners[0][1] * fx
    bot = corners[1][0] * (1.0 - fx) + corners[1][1] * fx
    return float(top * (1.0 - fy) + bot * fy)


def grid_mean(values) -> float:
    """Python-loop mean of an arbitrary nested grid."""
    total = 0.0
    count = 0
    for row in np.asarray(values, dtype=np.float64).reshape(-1, 1):
        total += float(row[0])
        count += 1
    return total / count


def mean_of(values) -> float:
    total = 0.0
    for v in values:
        total += float(v)
    return total / len(values)


# ---------------------------------------------------------------------------
# Pose error metrics


def pose_error_pair(
    R_est: np.ndarray, t_est: np.ndarray, R_gt: np.ndarray, t_gt: np.ndarray
) -> tuple[float, float]:
    """(rotation error in mrad, translation error in meters)."""
    rot = rotation_angle(R_est @ R_gt.T) * 1000.0
    trans = float(np.linalg.norm(np.asarray(t_est) - np.asarray(t_gt)))
    return rot, trans


# ---------------------------------------------------------------------------
# Retrieval


def normalized_distance(a: np.ndarray, b: np.ndarray) -> float:
    an = a / np.linalg.norm(a)
    bn = b / np.linalg.norm(b)
    return float(np.linalg.norm(an - bn))


def brute_force_proposals(
    vectors: list[np.ndarray], max_distance: float, min_separation: int
) -> list[tuple[int, int]]:
    """All (i, j) with j - i strictly above min_separation and normalized
    distance at most max_distance, by exhaustive scan in index order."""
    out = []
    n = len(vectors)
    for i in range(n):
        for j in range(n):
            if j - i > min_separation:
                if normalized_distance(vectors[i], vectors[j]) <= max_distance:
                    out.append((i, j))
    return out


# ---------------------------------------------------------------------------
# Triangulation


def two_ray_midpoint(
    R: np.ndarray, t: np.ndarray, x1: np.ndarray, x2: np.ndarray
) -> np.ndarray:
    """Closest-point-of-approach triangulation for one correspondence.

    Rays start at the camera centers in camera-1 coordinates; x1/x2 are
    normalized image points. Returns the midpoint of the shortest segment.
    """
    d1 = np.array([x1[0], x1[1], 1.0])
    d1 /= np.linalg.norm(d1)
    c2 = -np.asarray(R).T @ np.asarray(t)
    d2 = np.asarray(R).T @ np.array([x2[0], x2[1], 1.0])
    d2 /= np.linalg.norm(d2)
    c1 = np.zeros(3)
    w0 = c1 - c2
    a = float(d1 @ d1)
    b = float(d1 @ d2)
    c = float(d2 @ d2)
    d = float(d1 @ w0)
    e = float(d2 @ w0)
    denom = a * c - b * b
    s = (b * e - c * d) / denom
    u = (a * e - b * d) / denom
    p1 = c1 + s * d1
    p2 = c2 + u * d2
    return (p1 + p2) / 2.0


# ---------------------------------------------------------------------------
# Similarity alignment


def umeyama_alignment(
    src: np.ndarray, dst: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares similarity (s, R, t) mapping src points onto dst.

    Classical closed form via the SVD of the centered cross-covariance,
    with the determinant sign fixed so R is a proper rotation.

    Returns:
        (s, R, t) minimizing sum ||s R src_k + t - dst_k||^2.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    a = src - mu_s
    b = dst - mu_d
    cov = b.T @ a / len(src)
    U, S, Vt = np.linalg.svd(cov)
    d = np.ones(src.shape[1])
    if np.linalg.det(U) * np.linalg.det(Vt) < 0.0:
        d[-1] = -1.0
    R = U @ np.diag(d) @ Vt
    var_s = (a * a).sum() / len(src)
    s = float((S * d).sum() / var_s)
    t = mu_d - s * R @ mu_s
    return s, R, t


def alignment_residual_rms(src: np.ndarray, dst: np.ndarray) -> float:
    """RMS distance between dst and the best similarity mapping of src."""
    s, R, t = umeyama_alignment(src, dst)
    mapped = (s * (np.asarray(src) @ R.T)) + t
    diff = mapped - np.asarray(dst)
    return float(np.sqrt((diff * diff).sum(axis=1).mean()))
