"""Synthetic street scenes with exact ground truth.

A vehicle-mounted, backward-facing camera drives piecewise-straight legs
with optional 90-degree arcs, timestamp jumps, and revisited stretches that
copy earlier poses. Facade landmarks spawned along the route drive keypoint
detections, dense warps, and periodic position embeddings, so every derived
product has a closed-form reference. The camera convention: with heading h
and world up z, the camera axes are rows x = z cross h, y = -z, z = -h, so
the optical axis points backward along the travel direction and image y runs
toward the ground.

Embeddings are sin/cos features of the ground position with periods chosen
so that two views about 20 m apart sit near chord distance 0.35 and views
30 m apart sit near 0.51 after L2 normalization.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import fileio
from .fileio import FrameManifest, FrameRecord, MotionRecord, SourceTag, warp_filename
from .geom import CameraIntrinsics, Pose, RelativeMotion, relative_motion
from .matchcore import CropId, CropRect, DenseWarp, KeypointSet, derive_crops
from .retrieval import Embedding, FramePair, RetrievalConfig, propose_pairs

logger = logging.getLogger(__name__)

# Wavelengths chosen so the normalized embedding distance for a one-axis
# displacement d crosses 0.35 near d = 3.05 m and, by numeric scan, never
# falls back below 0.35 out to 1500 m. Revisit offsets of 2 m land inside
# the radius and the 4 m curated-only offset lands outside it.
_EMBED_SCALES = (4.5, 5.7, 7.5, 9.9)


@dataclass
class NoiseConfig:
    """Observation noise levels; zero everything for exact geometry."""

    keypoint_px: float = 0.3
    warp_px: float = 0.5
    outlier_fraction: float = 0.03
    embedding: float = 0.005


@dataclass
class SceneConfig:
    """Scene layout and sensor model.

    turns lists (start_frame, total_degrees) arcs spread uniformly over
    turn_frames steps. time_jumps lists (frame, gap_seconds) applied to the
    timestamp step into that frame. revisits lists
    (start, length, source_start, lateral_m): frames [start, start+length)
    copy the poses of [source_start, ...) shifted laterally, and the walk
    continues from the last copied pose. teleports lists
    (frame, dx, dy, dtheta_deg) discontinuities applied before that frame's
    step. manual_pairs are curated pair suggestions whose warps are rendered
    alongside the automatic ones.
    """

    n_frames: int = 100
    step_m: float = 10.0
    nominal_dt_s: float = 1.2
    width: int = 1024
    height: int = 768
    fx: float = 600.0
    fy: float = 600.0
    cx: float = 512.0
    cy: float = 384.0
    crop_height: int = 600
    camera_height_m: float = 2.0
    landmarks_per_frame: int = 40
    lateral_range_m: tuple[float, float] = (7.0, 30.0)
    landmark_height_m: tuple[float, float] = (0.0, 12.0)
    keypoint_depth_m: tuple[float, float] = (4.0, 70.0)
    turn_frames: int = 6
    turns: tuple[tuple[int, float], ...] = ()
    time_jumps: tuple[tuple[int, float], ...] = ()
    revisits: tuple[tuple[int, int, int, float], ...] = ()
    teleports: tuple[tuple[int, float, float, float], ...] = ()
    manual_pairs: tuple[tuple[int, int], ...] = ()
    warp_grid: int = 64
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0


@dataclass
class Scene:
    """Ground-truth world state before rendering."""

    config: SceneConfig
    manifest: FrameManifest
    poses: dict[int, Pose]
    headings: dict[int, float]
    landmarks: np.ndarray
    copied_from: dict[int, int]
    cuts: list[int]


@dataclass
class RenderedScene:
    """Scene plus every observation product the pipeline consumes."""

    scene: Scene
    keypoints: dict[int, KeypointSet]
    keypoint_landmarks: dict[int, np.ndarray]
    embeddings: list[Embedding]
    warps: dict[tuple[int, int], dict[tuple[CropId, CropId], tuple[DenseWarp, DenseWarp]]]
    proposals: list[FramePair]
    gt_motions: list[MotionRecord]


def _heading_vec(theta: float) -> np.ndarray:
    return np.array([math.cos(theta), math.sin(theta), 0.0])


def _spawn_landmarks(
    rng: np.random.Generator,
    center: np.ndarray,
    h: np.ndarray,
    walls: np.ndarray,
    cfg: SceneConfig,
) -> np.ndarray:
    """One group of facade landmarks flanking the route around `center`.

    `walls` gives the left/right facade distance for this stretch of street;
    the caller keeps it coherent across neighbouring groups so overlapping
    groups agree on where the facades stand.  A small jitter keeps the walls
    from being perfectly flat.
    """
    n = cfg.landmarks_per_frame
    normal = np.array([-h[1], h[0]])
    along = rng.uniform(-15.0, 15.0, size=n)
    side = rng.choice([-1.0, 1.0], size=n)
    dist = np.where(side > 0, walls[0], walls[1]) + rng.normal(0.0, 0.5, size=n)
    height = rng.uniform(*cfg.landmark_height_m, size=n)
    ground = center[None, :] + along[:, None] * h[None, :] + (side * dist)[:, None] * normal[None, :]
    return np.column_stack([ground, height])


def _pose_from_state(pos: np.ndarray, theta: float, height: float) -> Pose:
    h = _heading_vec(theta)
    z_cam = -h
    y_cam = np.array([0.0, 0.0, -1.0])
    x_cam = np.cross(np.array([0.0, 0.0, 1.0]), h)
    R = np.stack([x_cam, y_cam, z_cam])
    C = np.array([pos[0], pos[1], height])
    return Pose.from_rt(R, -R @ C)


def generate_scene(cfg: SceneConfig) -> Scene:
    """Walk the trajectory and spawn landmarks.

    Revisited frames copy the pose of their source frame (plus the lateral
    offset, applied along the source heading's left normal) and do not spawn
    new landmarks; the walk resumes from the last copied pose.
    """
    copy_of: dict[int, tuple[int, float]] = {}
    for start, length, src, lateral in cfg.revisits:
        for k in range(length):
            copy_of[start + k] = (src + k, lateral)
    turn_step: dict[int, float] = {}
    for start, total in cfg.turns:
        for k in range(cfg.turn_frames):
            turn_step[start + k] = math.radians(total) / cfg.turn_frames
    teleport = {f: (dx, dy, math.radians(dth)) for f, dx, dy, dth in cfg.teleports}
    jumps = dict(cfg.time_jumps)

    positions: dict[int, np.ndarray] = {}
    thetas: dict[int, float] = {}
    poses: dict[int, Pose] = {}
    pos = np.zeros(2)
    theta = 0.0
    ts = 1_700_000_000.0
    records: list[FrameRecord] = []
    cuts: list[int] = []
    K = CameraIntrinsics(
        fx=cfg.fx, fy=cfg.fy, cx=cfg.cx, cy=cfg.cy, width=cfg.width, height=cfg.height
    )
    for f in range(cfg.n_frames):
        if f > 0:
            gap = jumps.get(f, cfg.nominal_dt_s)
            ts += gap
            if gap > 60.0:
                cuts.append(f)
        if f in copy_of:
            src, lateral = copy_of[f]
            theta = thetas[src]
            normal = np.array([-math.sin(theta), math.cos(theta)])
            pos = positions[src] + lateral * normal
        else:
            if f in teleport:
                dx, dy, dth = teleport[f]
                pos = pos + np.array([dx, dy])
                theta += dth
            if f > 0:
                theta += turn_step.get(f, 0.0)
                pos = pos + cfg.step_m * np.array([math.cos(theta), math.sin(theta)])
        positions[f] = pos.copy()
        thetas[f] = theta
        poses[f] = _pose_from_state(pos, theta, cfg.camera_height_m)
        records.append(
            FrameRecord(
                frame=f,
                image_id=f"img_{f:05d}",
                timestamp=ts,
                width=cfg.width,
                height=cfg.height,
                intrinsics=K,
                full_crop=CropRect(0.0, 0.0, float(cfg.width), float(cfg.crop_height), f, CropId.FULL),
            )
        )

    # Facade distances are street state, not group state: consecutive groups
    # overlap, so letting each draw its own walls would interleave depth
    # planes in every view.  Walls drift slowly along a street, reset at
    # teleports, and follow the source street across revisited stretches.
    landmark_rows = []
    wall_rng = np.random.default_rng([cfg.seed, 5])
    frame_walls: dict[int, np.ndarray] = {}
    walls = wall_rng.uniform(*cfg.lateral_range_m, size=2)
    for f in range(cfg.n_frames):
        if f in copy_of:
            # A laterally offset copy sees the same world facades, so its
            # wall distances shift by the offset: closer on the side the
            # route moved toward, farther on the other. Carrying the
            # adjusted state keeps the facade lines seamless when the walk
            # resumes past the copied stretch.
            src, lateral = copy_of[f]
            walls = frame_walls[src] + np.array([-lateral, lateral])
            frame_walls[f] = walls.copy()
            continue
        if f in teleport:
            walls = wall_rng.uniform(*cfg.lateral_range_m, size=2)
        elif f > 0:
            # Drift bounds are hard physical limits rather than the spawn
            # range, so offset-adjusted walls are not yanked back inside.
            walls = np.clip(walls + wall_rng.normal(0.0, 0.2, size=2), 3.0, 40.0)
        frame_walls[f] = walls.copy()
        rng = np.random.default_rng([cfg.seed, 0, f])
        h = _heading_vec(thetas[f])[:2]
        landmark_rows.append(_spawn_landmarks(rng, positions[f], h, walls, cfg))

    # The camera looks backward, so frames at the start of a continuity
    # segment (frame 0 and each teleport landing) would otherwise stare into
    # unpopulated space; back-fill landmark groups behind those starts out to
    # the keypoint depth limit.
    depth_groups = int(math.ceil((cfg.keypoint_depth_m[1] + 15.0) / cfg.step_m))
    starts = [0] + sorted(teleport)
    for s_idx, f0 in enumerate(starts):
        h = _heading_vec(thetas[f0])[:2]
        for k in range(1, depth_groups + 1):
            rng = np.random.default_rng(
                [cfg.seed, 0, cfg.n_frames + s_idx * depth_groups + k - 1]
            )
            center = positions[f0] - k * cfg.step_m * h
            landmark_rows.append(_spawn_landmarks(rng, center, h, frame_walls[f0], cfg))
    landmarks = np.vstack(landmark_rows) if landmark_rows else np.zeros((0, 3))

    copied = {f: src for f, (src, _) in copy_of.items()}
    return Scene(cfg, FrameManifest(records), poses, thetas, landmarks, copied, cuts)


# ---------------------------------------------------------------------------
# Observation products


def _project_landmarks(scene: Scene, frame: int, zmin: float, zmax: float, margin: float):
    """Landmark projections into one frame: (ids, pixel (n,2), depth (n,))."""
    cfg = scene.config
    pose = scene.poses[frame]
    K = scene.manifest[frame].intrinsics
    R = pose.rotation()
    Xc = scene.landmarks @ R.T + pose.t
    z = Xc[:, 2]
    front = np.flatnonzero((z > zmin) & (z < zmax))
    u = K.fx * Xc[front, 0] / z[front] + K.cx
    v = K.fy * Xc[front, 1] / z[front] + K.cy
    crop = scene.manifest[frame].full_crop
    keep = (
        (u > crop.x - margin)
        & (u < crop.x + crop.w + margin)
        & (v > crop.y - margin)
        & (v < crop.y + crop.h + margin)
    )
    return front[keep], np.column_stack([u[keep], v[keep]]), z[front][keep]


def _visibility_mask(crop: CropRect, G: int, px: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Boolean mask of projections a real camera could actually see.

    Landmarks sample opaque facades, so a projection hides whatever lies
    clearly behind it. Two complementary occlusion rules: a projection is
    dropped when a landmark more than 2 m nearer projects within 6 px (the
    nearer point stands for a surface patch covering that sight line), and
    within one warp-grid cell projections far behind the cell's nearest one
    (beyond 30% + 2 m) are dropped, since the front surface the cell samples
    covers the whole cell at warp resolution. Both slacks absorb the depth
    spread a slanted facade legitimately shows between neighbouring points.
    Occluded projections still act as occluders themselves: the surface a
    hidden landmark samples does not stop existing.
    """
    n = len(z)
    keep = np.ones(n, dtype=bool)
    if n == 0:
        return keep
    for lo in range(0, n, 512):
        hi = min(lo + 512, n)
        d2 = (
            (px[lo:hi, 0:1] - px[None, :, 0]) ** 2
            + (px[lo:hi, 1:2] - px[None, :, 1]) ** 2
        )
        nearer = z[None, :] < z[lo:hi, None] - 2.0
        keep[lo:hi] &= ~((d2 < 36.0) & nearer).any(axis=1)

    cu = np.floor((px[:, 0] - crop.x) * G / crop.w).astype(np.int64)
    cv = np.floor((px[:, 1] - crop.y) * G / crop.h).astype(np.int64)
    inb = (cu >= 0) & (cu < G) & (cv >= 0) & (cv < G)
    cell = cv * G + cu
    zmin = np.full(G * G, np.inf)
    np.minimum.at(zmin, cell[inb], z[inb])
    front = np.ones(n)
    front[inb] = zmin[cell[inb]]
    keep &= ~(inb & (z > front * 1.3 + 2.0))
    return keep


def render_keypoints(scene: Scene) -> tuple[dict[int, KeypointSet], dict[int, np.ndarray]]:
    """Noisy keypoint detections, one per visible landmark, ordered by
    landmark id. Returns (keypoints, landmark ids per keypoint index).

    Candidates are the landmarks that survive the visibility rules of
    _visibility_mask within the frame's depth window and a 5 px interior
    margin. A detection is then suppressed when any other visible landmark
    projects within 6 px of it, including ones just outside the frame or
    beyond the depth limits: near-coincident projections are
    indistinguishable to any matcher, so a detector reporting both would
    only manufacture ambiguity. Hidden landmarks suppress nothing; a real
    image shows no trace of them.
    """
    cfg = scene.config
    kps: dict[int, KeypointSet] = {}
    owners: dict[int, np.ndarray] = {}
    zmin, zmax = cfg.keypoint_depth_m
    for f in range(cfg.n_frames):
        rng = np.random.default_rng([cfg.seed, 1, f])
        crop = scene.manifest[f].full_crop
        all_ids, all_px, all_z = _project_landmarks(scene, f, zmin=0.5, zmax=1e9, margin=10.0)
        vis = _visibility_mask(crop, cfg.warp_grid, all_px, all_z)
        all_ids, all_px, all_z = all_ids[vis], all_px[vis], all_z[vis]
        inner = (
            (all_px[:, 0] > crop.x + 5.0)
            & (all_px[:, 0] < crop.x + crop.w - 5.0)
            & (all_px[:, 1] > crop.y + 5.0)
            & (all_px[:, 1] < crop.y + crop.h - 5.0)
            & (all_z > zmin)
            & (all_z < zmax)
        )
        ids = all_ids[inner]
        px = all_px[inner]
        d2 = (
            (px[:, 0:1] - all_px[None, :, 0]) ** 2
            + (px[:, 1:2] - all_px[None, :, 1]) ** 2
        )
        crowded = (d2 < 36.0) & (all_ids[None, :] != ids[:, None])
        keep = ~crowded.any(axis=1)
        ids = ids[keep]
        px = px[keep]
        px = px + rng.normal(0.0, cfg.noise.keypoint_px, size=px.shape)
        px[:, 0] = np.clip(px[:, 0], crop.x, crop.x + crop.w)
        px[:, 1] = np.clip(px[:, 1], crop.y, crop.y + crop.h)
        score = rng.uniform(0.5, 1.0, size=len(ids))
        kps[f] = KeypointSet(f, np.column_stack([px, score]))
        owners[f] = ids
    return kps, owners


def render_embeddings(scene: Scene) -> list[Embedding]:
    """Periodic position features, norm sqrt(8) before noise.

    The normalized distance for a displacement d along one axis follows
    sqrt(sum_s (2 - 2 cos(d / s)) / 8) over the four wavelengths, crossing
    0.35 near d = 3.05 m and staying above it for larger separations.
    """
    cfg = scene.config
    out = []
    for f in range(cfg.n_frames):
        rng = np.random.default_rng([cfg.seed, 3, f])
        pose = scene.poses[f]
        C = pose.center()
        parts = []
        for s in _EMBED_SCALES:
            for coord in (C[0], C[1]):
                parts.extend([math.sin(coord / s), math.cos(coord / s)])
        vec = np.array(parts)
        vec = vec + rng.normal(0.0, cfg.noise.embedding, size=vec.shape[0])
        out.append(Embedding(f, vec))
    return out


def _bilinear_map(grid: np.ndarray, gu: np.ndarray, gv: np.ndarray) -> np.ndarray:
    """Sample a (G, G) map at fractional grid coordinates with edge clamp."""
    G = grid.shape[0]
    gu = np.clip(gu, 0.0, G - 1.0)
    gv = np.clip(gv, 0.0, G - 1.0)
    u0 = np.minimum(np.floor(gu).astype(np.int64), G - 2)
    v0 = np.minimum(np.floor(gv).astype(np.int64), G - 2)
    fu = gu - u0
    fv = gv - v0
    top = grid[v0, u0] * (1 - fu) + grid[v0, u0 + 1] * fu
    bot = grid[v0 + 1, u0] * (1 - fu) + grid[v0 + 1, u0 + 1] * fu
    return top * (1 - fv) + bot * fv


_FIT_WEIGHT = 1.0e4


def _membrane_fit(
    x0: np.ndarray, corners: np.ndarray, weights: np.ndarray, z: np.ndarray, G: int
) -> tuple[np.ndarray, np.ndarray]:
    """Solve (Laplacian + w BtB) d = w Bt z by conjugate gradients.

    B bilinearly samples the (G, G) node grid at the constraint positions
    encoded by corners/weights (4 node indices and weights per constraint);
    the Laplacian uses mirrored boundaries. The fit weight is large, so the
    solved surface reproduces each constraint depth almost exactly unless
    constraints contradict each other. Returns the solved grid and the
    per-constraint absolute fit residual.
    """

    def sample(x: np.ndarray) -> np.ndarray:
        return (x[corners] * weights).sum(axis=0)

    def scatter(r: np.ndarray) -> np.ndarray:
        out = np.zeros(G * G)
        np.add.at(out, corners.ravel(), (weights * r[None, :]).ravel())
        return out

    def apply_a(x: np.ndarray) -> np.ndarray:
        V = x.reshape(G, G)
        lap = np.zeros((G, G))
        lap[1:] += V[1:] - V[:-1]
        lap[:-1] += V[:-1] - V[1:]
        lap[:, 1:] += V[:, 1:] - V[:, :-1]
        lap[:, :-1] += V[:, :-1] - V[:, 1:]
        return lap.ravel() + _FIT_WEIGHT * scatter(sample(x))

    rhs = _FIT_WEIGHT * scatter(z)
    x = x0.ravel().copy()
    r = rhs - apply_a(x)
    p = r.copy()
    rr = float(r @ r)
    tol2 = 1e-20 * float(rhs @ rhs)
    for _ in range(1200):
        if rr <= tol2:
            break
        ap = apply_a(p)
        alpha = rr / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x.reshape(G, G), np.abs(sample(x) - z)


def _frame_depth_maps(scene: Scene, frame: int) -> tuple[np.ndarray, np.ndarray]:
    """Depth and depth-uncertainty maps over the frame's full crop grid.

    Node depths solve a membrane fit: Laplacian smoothness plus a strong
    soft constraint per projected landmark asking the bilinear sample at its
    projection to reproduce its own depth, with the same clamped sampling
    rule warp consumers use. Keypoints are emitted at exactly those
    projections, so wherever constraints are mutually consistent the sampled
    warp sends a keypoint onto its true partner.

    The uncertainty map is a per-node depth error scale in metres: the
    residual of unsatisfiable constraints (landmarks at different depths in
    one cell, the projective signature of an occlusion boundary), spread one
    node outward. There the interpolated flow is genuinely unreliable, which
    a dense matcher reports as low confidence rather than as a confident
    wrong value. Constraints come only from landmarks the camera can see:
    hidden ones are culled by _visibility_mask, so a surface behind a wall
    neither bends the fit nor raises the uncertainty.
    """
    cfg = scene.config
    G = cfg.warp_grid
    crop = scene.manifest[frame].full_crop
    ids, px, z = _project_landmarks(scene, frame, zmin=1.0, zmax=150.0, margin=6.0)
    vis = _visibility_mask(crop, G, px, z)
    inside = (
        vis
        & (px[:, 0] > crop.x)
        & (px[:, 0] < crop.x + crop.w)
        & (px[:, 1] > crop.y)
        & (px[:, 1] < crop.y + crop.h)
    )
    ids, px, z = ids[inside], px[inside], z[inside]
    if len(ids) == 0:
        return np.full((G, G), 30.0), np.zeros((G, G))

    gu = np.clip((px[:, 0] - crop.x) * G / crop.w - 0.5, 0.0, G - 1.0)
    gv = np.clip((px[:, 1] - crop.y) * G / crop.h - 0.5, 0.0, G - 1.0)
    u0 = np.minimum(np.floor(gu).astype(np.int64), G - 2)
    v0 = np.minimum(np.floor(gv).astype(np.int64), G - 2)
    fu = gu - u0
    fv = gv - v0
    corners = np.stack(
        [v0 * G + u0, v0 * G + u0 + 1, (v0 + 1) * G + u0, (v0 + 1) * G + u0 + 1]
    )
    weights = np.stack(
        [(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv]
    )

    # Inverse-distance interpolation as the conjugate-gradient start point.
    cols = (np.arange(G) + 0.5) * crop.w / G + crop.x
    rows = (np.arange(G) + 0.5) * crop.h / G + crop.y
    nu, nv = np.meshgrid(cols, rows)
    nodes = np.column_stack([nu.ravel(), nv.ravel()])
    d2 = (
        (nodes[:, 0:1] - px[None, :, 0]) ** 2
        + (nodes[:, 1:2] - px[None, :, 1]) ** 2
    )
    k = min(6, len(ids))
    idx = np.argpartition(d2, k - 1, axis=1)[:, :k]
    w = 1.0 / (np.take_along_axis(d2, idx, axis=1) + 1.0)
    x0 = (w * z[idx]).sum(axis=1) / w.sum(axis=1)

    depth, err = _membrane_fit(x0, corners, weights, z, G)

    # Conflicting constraints leave a residual on their shared cell; spread
    # it one node outward so the whole disputed neighborhood is flagged.
    conflict = np.zeros(G * G)
    np.maximum.at(
        conflict, corners.ravel(), np.broadcast_to(err, corners.shape).ravel()
    )
    padded = np.pad(conflict.reshape(G, G), 1, mode="constant")
    conflict = np.stack(
        [padded[r : r + G, c : c + G] for r in range(3) for c in range(3)]
    ).max(axis=0)

    return depth, conflict


def _soft_inside(val: np.ndarray, lo: float, hi: float, margin: float) -> np.ndarray:
    a = np.clip((val - lo + margin) / (2.0 * margin), 0.0, 1.0)
    b = np.clip((hi - val + margin) / (2.0 * margin), 0.0, 1.0)
    return a * b


def _render_warp(
    scene: Scene,
    maps_a: tuple[np.ndarray, np.ndarray],
    maps_b: tuple[np.ndarray, np.ndarray],
    frame_a: int,
    frame_b: int,
    crop_a: CropRect,
    crop_b: CropRect,
) -> DenseWarp:
    """Ground-truth warp from crop_a of frame_a into crop_b of frame_b.

    Each grid node is lifted to a world point using the interpolated depth
    map of frame_a and reprojected into frame_b. Certainty starts at 0.95,
    decays with the pixel shift one depth-uncertainty step would cause at
    that node, decays further near the destination frustum boundary, and is
    zero for targets behind the destination camera or hidden behind the
    destination's own visible surface (the lifted point lands well beyond
    the depth frame_b's map reports there, allowing for both maps'
    uncertainty). Gaussian pixel noise and uniform outlier cells are then
    applied, outliers only where the geometric certainty already exceeds
    0.5 so they survive certainty gating downstream.
    """
    cfg = scene.config
    G = cfg.warp_grid
    depth_map, sigma_map = maps_a
    Ka = scene.manifest[frame_a].intrinsics
    Kb = scene.manifest[frame_b].intrinsics
    full_a = scene.manifest[frame_a].full_crop
    full_b = scene.manifest[frame_b].full_crop

    cols = (np.arange(G) + 0.5) * crop_a.w / G + crop_a.x
    rows = (np.arange(G) + 0.5) * crop_a.h / G + crop_a.y
    u, v = np.meshgrid(cols, rows)
    u = u.ravel()
    v = v.ravel()

    gu = (u - full_a.x) * G / full_a.w - 0.5
    gv = (v - full_a.y) * G / full_a.h - 0.5
    depth = _bilinear_map(depth_map, gu, gv)
    sigma = _bilinear_map(sigma_map, gu, gv)

    xn = (u - Ka.cx) / Ka.fx
    yn = (v - Ka.cy) / Ka.fy
    dirs = np.column_stack([xn, yn, np.ones_like(xn)])
    pose_a = scene.poses[frame_a]
    pose_b = scene.poses[frame_b]
    M = pose_b.rotation() @ pose_a.rotation().T
    offset = pose_b.t - M @ pose_a.t
    m = dirs @ M.T
    Yc = depth[:, None] * m + offset[None, :]
    zb = Yc[:, 2]
    safe = np.where(zb > 0.5, zb, 1.0)
    ub = Kb.fx * Yc[:, 0] / safe + Kb.cx
    vb = Kb.fy * Yc[:, 1] / safe + Kb.cy

    # First-order pixel shift caused by one depth-uncertainty step, the
    # pair-specific size of the flow error where interpolation is unreliable.
    dub = Kb.fx * (m[:, 0] * zb - Yc[:, 0] * m[:, 2]) / (safe * safe)
    dvb = Kb.fy * (m[:, 1] * zb - Yc[:, 1] * m[:, 2]) / (safe * safe)
    shift = np.hypot(dub, dvb) * sigma

    cert = 0.95 * np.exp(-((shift / 2.5) ** 2))
    cert = cert * _soft_inside(ub, crop_b.x, crop_b.x + crop_b.w, 40.0)
    cert = cert * _soft_inside(vb, crop_b.y, crop_b.y + crop_b.h, 40.0)
    # Targets that leave the destination crop get exactly zero: a clipped
    # target position carries no correspondence information.
    inside = (
        (ub >= crop_b.x)
        & (ub <= crop_b.x + crop_b.w)
        & (vb >= crop_b.y)
        & (vb <= crop_b.y + crop_b.h)
    )
    # Landing far behind what frame_b sees at that pixel means the point is
    # occluded in the destination view, the remaining way a true flow can
    # exist without a visible counterpart.
    gub = np.clip((ub - full_b.x) * G / full_b.w - 0.5, 0.0, G - 1.0)
    gvb = np.clip((vb - full_b.y) * G / full_b.h - 0.5, 0.0, G - 1.0)
    seen_b = _bilinear_map(maps_b[0], gub, gvb)
    sigma_b = _bilinear_map(maps_b[1], gub, gvb)
    occluded = zb - seen_b > np.maximum(2.0, 0.15 * zb) + sigma_b + sigma
    cert = np.where(inside & (zb > 0.5) & ~occluded, cert, 0.0)

    rng = np.random.default_rng(
        [cfg.seed, 2, frame_a, frame_b, _CROP_INDEX[crop_a.crop_id], _CROP_INDEX[crop_b.crop_id]]
    )
    ub = ub + rng.normal(0.0, cfg.noise.warp_px, size=ub.shape)
    vb = vb + rng.normal(0.0, cfg.noise.warp_px, size=vb.shape)

    tx = np.clip((ub - crop_b.x) / crop_b.w, 0.0, 1.0)
    ty = np.clip((vb - crop_b.y) / crop_b.h, 0.0, 1.0)
    tx = np.where(zb > 0.5, tx, 0.5)
    ty = np.where(zb > 0.5, ty, 0.5)

    outlier = (rng.random(size=cert.shape) < cfg.noise.outlier_fraction) & (cert > 0.5)
    tx = np.where(outlier, rng.random(size=tx.shape), tx)
    ty = np.where(outlier, rng.random(size=ty.shape), ty)

    grid = np.stack([tx, ty, np.clip(cert, 0.0, 1.0)], axis=-1).reshape(G, G, 3)
    return DenseWarp(crop_a, crop_b, grid)


_CROP_INDEX = {CropId.FULL: 0, CropId.LEFT: 1, CropId.RIGHT: 2}


def render_scene(cfg: SceneConfig) -> RenderedScene:
    """Generate a scene and every product the pipeline consumes.

    Warps are rendered for consecutive pairs, for retrieval proposals
    computed from the rendered embeddings, and for configured manual pairs;
    each pair gets both directions of all nine crop combinations.
    """
    scene = generate_scene(cfg)
    keypoints, owners = render_keypoints(scene)
    embeddings = render_embeddings(scene)
    proposals = propose_pairs(embeddings, cfg.retrieval)

    pair_set = {(f, f + 1) for f in range(cfg.n_frames - 1)}
    pair_set.update((p.frame_i, p.frame_j) for p in proposals)
    pair_set.update((min(i, j), max(i, j)) for i, j in cfg.manual_pairs)

    maps = {f: _frame_depth_maps(scene, f) for f in range(cfg.n_frames)}
    crops = {f: derive_crops(scene.manifest[f].full_crop) for f in range(cfg.n_frames)}

    warps: dict[tuple[int, int], dict[tuple[CropId, CropId], tuple[DenseWarp, DenseWarp]]] = {}
    for i, j in sorted(pair_set):
        combo: dict[tuple[CropId, CropId], tuple[DenseWarp, DenseWarp]] = {}
        for ca in (CropId.FULL, CropId.LEFT, CropId.RIGHT):
            for cb in (CropId.FULL, CropId.LEFT, CropId.RIGHT):
                wij = _render_warp(scene, maps[i], maps[j], i, j, crops[i][ca], crops[j][cb])
                wji = _render_warp(scene, maps[j], maps[i], j, i, crops[j][cb], crops[i][ca])
                combo[(ca, cb)] = (wij, wji)
        warps[(i, j)] = combo

    gt = [
        MotionRecord(f, f + 1, relative_motion(scene.poses[f], scene.poses[f + 1], f, f + 1), SourceTag.GT)
        for f in range(cfg.n_frames - 1)
    ]
    logger.info(
        "rendered scene: %d frames, %d landmarks, %d warp pairs",
        cfg.n_frames, len(scene.landmarks), len(warps),
    )
    return RenderedScene(scene, keypoints, owners, embeddings, warps, proposals, gt)


def write_scene(rendered: RenderedScene, out_dir: str) -> None:
    """Write every product of a rendered scene under out_dir."""
    cfg = rendered.scene.config
    os.makedirs(out_dir, exist_ok=True)
    fileio.write_manifest(os.path.join(out_dir, "manifest.json"), rendered.scene.manifest)

    for f, kps in rendered.keypoints.items():
        fileio.write_keypoints(os.path.join(out_dir, fileio.keypoint_filename(f)), kps)
    for emb in rendered.embeddings:
        fileio.write_embedding(os.path.join(out_dir, fileio.embedding_filename(emb.frame)), emb)

    warp_dir = os.path.join(out_dir, "warps")
    os.makedirs(warp_dir, exist_ok=True)
    index: dict[str, dict] = {}
    for (i, j), combos in rendered.warps.items():
        for (ca, cb), (wij, wji) in combos.items():
            name_ij = warp_filename(i, j, ca, cb)
            name_ji = warp_filename(j, i, cb, ca)
            fileio.write_warp(os.path.join(warp_dir, name_ij), wij)
            fileio.write_warp(os.path.join(warp_dir, name_ji), wji)
            index[name_ij] = fileio.WarpStore.index_entry(wij.src_crop, wij.dst_crop)
            index[name_ji] = fileio.WarpStore.index_entry(wji.src_crop, wji.dst_crop)
    with open(os.path.join(warp_dir, "warp_index.json"), "w") as fh:
        json.dump(index, fh, indent=1)

    fileio.write_motions(os.path.join(out_dir, "motions_gt.csv"), rendered.gt_motions)
    fileio.write_pairs(os.path.join(out_dir, "pairs_proposed.json"), rendered.proposals)
    fileio.write_manual_pairs(
        os.path.join(out_dir, "manual_pairs.csv"),
        [(min(i, j), max(i, j), CropId.ANY.value, CropId.ANY.value) for i, j in cfg.manual_pairs],
    )

    meta = {
        "cuts": rendered.scene.cuts,
        "revisits": [list(r) for r in cfg.revisits],
        "suggested_manual_pairs": [[min(i, j), max(i, j), "ANY", "ANY"] for i, j in cfg.manual_pairs],
        "keypoint_landmarks": {str(f): ids.tolist() for f, ids in rendered.keypoint_landmarks.items()},
    }
    with open(os.path.join(out_dir, "scene_meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)


# ---------------------------------------------------------------------------
# Presets


def preset_config(name: str, seed: int = 0, **overrides) -> SceneConfig:
    """Named scene layouts.

    continuous: one uninterrupted drive with a single turn.
    one-cut: a teleport plus a 76 s timestamp jump splits the drive in two,
        with nothing connecting the halves.
    revisit-loop: a mid-drive hop onto a 2 m-offset revisit of an early
        stretch, which retrieval bridges, plus one time-jump cut onto a
        4 m-offset revisit outside the retrieval radius, so only a curated
        manual pair can bridge it.
    paper-like: a longer drive with the same hop-plus-cut structure.
    """
    if name == "continuous":
        cfg = SceneConfig(n_frames=100, turns=((40, 90.0),), seed=seed)
    elif name == "one-cut":
        cfg = SceneConfig(
            n_frames=60,
            time_jumps=((30, 76.0),),
            teleports=((30, 500.0, 500.0, 90.0),),
            seed=seed,
        )
    elif name == "revisit-loop":
        cfg = SceneConfig(
            n_frames=112,
            turns=((16, 90.0), (72, 90.0)),
            time_jumps=((86, 76.0),),
            revisits=((40, 12, 4, 2.0), (86, 26, 54, -4.0)),
            manual_pairs=((60, 92),),
            seed=seed,
        )
    elif name == "paper-like":
        cfg = SceneConfig(
            n_frames=240,
            turns=((30, 90.0), (100, 90.0), (168, 90.0)),
            time_jumps=((60, 90.0), (182, 80.0)),
            revisits=((60, 14, 6, 0.5), (182, 14, 164, 0.5)),
            manual_pairs=((166, 184),),
            seed=seed,
        )
    else:
        raise ValueError(f"unknown preset {name!r}")
    return replace(cfg, **overrides) if overrides else cfg
