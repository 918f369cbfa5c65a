"""End-to-end visual localisation: two methods plus assembly and scoring.

Method I estimates each consecutive pair directly from a dense warp. Method
II matches keypoints through warps over crop combinations, verifies pairs
with robust two-view estimation, reconstructs pose fragments, and assembles
consecutive motions from fragment poses where possible; variant A uses
sequential plus retrieval pairs, variant B adds curated manual pairs.

Every output motion uses the convention x_j = R x_i + t for consecutive
frames (i, i+1), translation in meters.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import (
    CoverageMismatch,
    EstimationError,
    GeometryError,
    MissingEstimate,
    MissingWarp,
)
from .fileio import FrameManifest, MotionRecord, SourceTag
from .geom import (
    CameraIntrinsics,
    Pose,
    RelativeMotion,
    pose_errors,
    quat_to_matrix,
    relative_motion,
)
from .matchcore import (
    CROP_COMBINATIONS,
    CropId,
    DenseWarp,
    KeypointSet,
    MatchConfig,
    MatchSet,
    _sample_warp_many,
    match_single_crop,
    merge_match_sets,
)
from .retrieval import Embedding, FramePair, PairSource, RetrievalConfig, filter_pairs, propose_pairs
from .robust import RansacConfig, RobustEstimate, estimate_relative_pose
from .sfm import Fragment, SfmConfig, reconstruct

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class AssemblyConfig:
    """How consecutive motions are produced from partial results.

    Fragment translations are rescaled so the median consecutive baseline
    equals target_median_translation_m. Pairs spanning a timestamp gap above
    time_jump_s with no shared fragment get identity rotation and zero
    translation. Everything else falls back to the pair's two-view estimate
    with the translation set to target_median_translation_m along the
    recovered direction, signed so the motion points forward along
    forward_axis. identity_fallback controls whether a failed two-view
    estimate yields an identity record or an error.
    """

    target_median_translation_m: float = 10.0
    time_jump_s: float = 60.0
    forward_axis: tuple[float, float, float] = (0.0, 0.0, -1.0)
    identity_fallback: bool = True


@dataclass
class PipelineConfig:
    match: MatchConfig = field(default_factory=MatchConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    sfm: SfmConfig = field(default_factory=SfmConfig)
    assembly: AssemblyConfig = field(default_factory=AssemblyConfig)
    method1_samples: int = 5000
    method1_certainty_floor: float = 0.1
    threads: int = 1


# ---------------------------------------------------------------------------
# Warp sources


class DictWarpSource:
    """In-memory warp lookup with the same access surface as WarpStore.

    Wraps a mapping (frame_i, frame_j) -> {(crop_i, crop_j): (warp i->j,
    warp j->i)} with frame_i < frame_j.
    """

    def __init__(self, warps: Mapping[tuple[int, int], Mapping[tuple[CropId, CropId], tuple[DenseWarp, DenseWarp]]]):
        self._warps = warps

    def has_pair(self, frame_i: int, frame_j: int) -> bool:
        return (frame_i, frame_j) in self._warps

    def get(self, src: int, dst: int, crop_src: CropId, crop_dst: CropId) -> DenseWarp:
        if (src, dst) in self._warps:
            combos = self._warps[(src, dst)]
            if (crop_src, crop_dst) in combos:
                return combos[(crop_src, crop_dst)][0]
        if (dst, src) in self._warps:
            combos = self._warps[(dst, src)]
            if (crop_dst, crop_src) in combos:
                return combos[(crop_dst, crop_src)][1]
        raise MissingWarp(f"no warp {src}->{dst} {crop_src.value}x{crop_dst.value}")

    def pair_warps(self, frame_i: int, frame_j: int, combos=None):
        out = {}
        for ca, cb in CROP_COMBINATIONS if combos is None else combos:
            out[(ca, cb)] = (
                self.get(frame_i, frame_j, ca, cb),
                self.get(frame_j, frame_i, cb, ca),
            )
        return out


# ---------------------------------------------------------------------------
# Method I


def _forward_signed(motion: RelativeMotion, axis: np.ndarray, norm: float) -> RelativeMotion:
    """Rescale t to `norm` and flip its sign unless the implied displacement
    of camera j (seen from camera i) points along `axis`; an exactly
    perpendicular displacement keeps its sign."""
    R = quat_to_matrix(motion.q)
    t = motion.t.astype(np.float64)
    scale = np.linalg.norm(t)
    if scale > 0.0:
        t = t / scale * norm
    d = -R.T @ t
    if float(d @ axis) < 0.0:
        t = -t
    return RelativeMotion(motion.q, t, motion.frame_i, motion.frame_j)


def _identity_record(i: int, j: int) -> MotionRecord:
    return MotionRecord(
        i, j, RelativeMotion(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), i, j), SourceTag.TIME_JUMP_ZERO
    )


def _method_one_pair(
    manifest: FrameManifest,
    warps,
    f: int,
    cfg: PipelineConfig,
) -> MotionRecord:
    rec_i, rec_j = manifest[f], manifest[f + 1]
    warp = warps.get(f, f + 1, CropId.FULL, CropId.FULL)
    side = max(2, int(round(np.sqrt(cfg.method1_samples))))
    sc = warp.src_crop
    xs = (np.arange(side) + 0.5) * sc.w / side
    ys = (np.arange(side) + 0.5) * sc.h / side
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    pred, cert = _sample_warp_many(warp, pts)
    keep = cert >= cfg.method1_certainty_floor
    src = pts[keep] + np.array([sc.x, sc.y])
    dst = pred[keep] + np.array([warp.dst_crop.x, warp.dst_crop.y])
    corrs = np.hstack([src, dst])
    try:
        est = estimate_relative_pose(
            corrs, rec_i.intrinsics, rec_j.intrinsics, cfg.ransac, f, f + 1
        )
    except (EstimationError, GeometryError) as exc:
        logger.info("pair (%d, %d) direct estimate failed: %s", f, f + 1, exc)
        if not cfg.assembly.identity_fallback:
            raise MissingEstimate(f"direct estimation failed for pair ({f}, {f + 1})") from exc
        return _identity_record(f, f + 1)
    motion = _forward_signed(
        est.motion,
        np.array(cfg.assembly.forward_axis, dtype=np.float64),
        cfg.assembly.target_median_translation_m,
    )
    return MotionRecord(f, f + 1, motion, SourceTag.TWO_VIEW)


def run_method_one(manifest: FrameManifest, warps, cfg: PipelineConfig) -> list[MotionRecord]:
    """Per-pair direct estimation over a uniform grid of warp samples.

    Grid points whose warp certainty clears cfg.method1_certainty_floor
    become correspondences for robust two-view estimation; the translation
    is normalized to the configured length and signed forward. Pairs that
    fail to estimate produce identity records tagged TIME_JUMP_ZERO.
    """
    pairs = list(range(len(manifest) - 1))
    records = _parallel_map(
        (lambda f: _method_one_pair(manifest, warps, f, cfg)), pairs, cfg.threads
    )
    return [records[f] for f in pairs]


def _parallel_map(fn: Callable, keys: Sequence, threads: int) -> dict:
    """Apply fn over keys, in a pool when threads > 1; results keyed by input
    so collection order never affects output."""
    if threads <= 1:
        return {k: fn(k) for k in keys}
    out = {}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for k, result in zip(keys, pool.map(fn, keys)):
            out[k] = result
    return out


# ---------------------------------------------------------------------------
# Method II


@dataclass
class MethodTwoResult:
    records: list[MotionRecord]
    fragments: list[Fragment]
    pairs: list[FramePair]
    estimates: dict[tuple[int, int], RobustEstimate | None]


def _expand_crops(restriction: CropId) -> tuple[CropId, ...]:
    if restriction is CropId.ANY:
        return (CropId.FULL, CropId.LEFT, CropId.RIGHT)
    return (restriction,)


def _match_pair(
    manifest: FrameManifest,
    warps,
    keypoints: Mapping[int, KeypointSet],
    pair: FramePair,
    crop_restrictions: Mapping[tuple[int, int], tuple[CropId, CropId]],
    cfg: PipelineConfig,
) -> MatchSet:
    i, j = pair.frame_i, pair.frame_j
    ci, cj = crop_restrictions.get((i, j), (CropId.ANY, CropId.ANY))
    combos = [(a, b) for a in _expand_crops(ci) for b in _expand_crops(cj)]
    pair_warps = warps.pair_warps(i, j, combos)
    size_i, size_j = manifest[i].size, manifest[j].size
    parts = [
        match_single_crop(
            pair_warps[c][0], pair_warps[c][1], keypoints[i], keypoints[j], size_i, size_j, cfg.match
        )
        for c in combos
    ]
    return merge_match_sets(i, j, parts)


def plan_pairs(
    manifest: FrameManifest,
    embeddings: Sequence[Embedding],
    warps,
    cfg: PipelineConfig,
    manual_pairs: Sequence[tuple[int, int, CropId, CropId]] = (),
    use_retrieval: bool = True,
) -> tuple[dict[tuple[int, int], FramePair], dict[tuple[int, int], tuple[CropId, CropId]]]:
    """Decide which frame pairs to match and with which crop restrictions.

    The pair set is the union of consecutive pairs, retrieval proposals
    that pass the warp-certainty filter (when use_retrieval), and manual
    pairs. Manual pairs skip the descriptor distance gate but still must
    pass the warp-certainty filter. Sources keep the priority SEQUENTIAL
    over RETRIEVED over MANUAL when a pair qualifies several ways.

    Returns:
        (pairs keyed by (frame_i, frame_j), crop restrictions for manual
        pairs, both crops ANY when unrestricted).
    """
    n = len(manifest)
    pairs: dict[tuple[int, int], FramePair] = {
        (f, f + 1): FramePair(f, f + 1, PairSource.SEQUENTIAL) for f in range(n - 1)
    }

    if use_retrieval:
        proposals = propose_pairs(embeddings, cfg.retrieval)
        full_warps = {
            (p.frame_i, p.frame_j): warps.get(p.frame_i, p.frame_j, CropId.FULL, CropId.FULL)
            for p in proposals
        }
        for p in filter_pairs(proposals, full_warps, cfg.retrieval):
            pairs.setdefault((p.frame_i, p.frame_j), p)

    crop_restrictions: dict[tuple[int, int], tuple[CropId, CropId]] = {}
    manual_candidates = []
    for i, j, ci, cj in manual_pairs:
        key = (min(i, j), max(i, j))
        if key in pairs:
            continue
        manual_candidates.append(FramePair(key[0], key[1], PairSource.MANUAL))
        crop_restrictions[key] = (ci, cj) if (i, j) == key else (cj, ci)
    if manual_candidates:
        manual_warps = {
            (p.frame_i, p.frame_j): warps.get(p.frame_i, p.frame_j, CropId.FULL, CropId.FULL)
            for p in manual_candidates
        }
        for p in filter_pairs(manual_candidates, manual_warps, cfg.retrieval):
            pairs[(p.frame_i, p.frame_j)] = p
    return pairs, crop_restrictions


def match_pairs(
    manifest: FrameManifest,
    keypoints: Mapping[int, KeypointSet],
    warps,
    pairs: Mapping[tuple[int, int], FramePair],
    crop_restrictions: Mapping[tuple[int, int], tuple[CropId, CropId]],
    cfg: PipelineConfig,
) -> dict[tuple[int, int], MatchSet]:
    """Keypoint matches for every planned pair, in parallel when configured."""
    keys = sorted(pairs)
    return _parallel_map(
        (lambda key: _match_pair(manifest, warps, keypoints, pairs[key], crop_restrictions, cfg)),
        keys,
        cfg.threads,
    )


def estimate_pairs(
    manifest: FrameManifest,
    match_sets: Mapping[tuple[int, int], MatchSet],
    cfg: PipelineConfig,
) -> dict[tuple[int, int], RobustEstimate | None]:
    """Robust two-view estimates per matched pair; None marks a failure."""

    def process(key: tuple[int, int]) -> RobustEstimate | None:
        ms = match_sets[key]
        if len(ms) < 8:
            return None
        try:
            return estimate_relative_pose(
                ms.correspondences(),
                manifest[key[0]].intrinsics,
                manifest[key[1]].intrinsics,
                cfg.ransac,
                key[0],
                key[1],
            )
        except (EstimationError, GeometryError) as exc:
            logger.info("pair %s two-view estimate failed: %s", key, exc)
            return None

    return _parallel_map(process, sorted(match_sets), cfg.threads)


def inlier_match_sets(
    match_sets: Mapping[tuple[int, int], MatchSet],
    estimates: Mapping[tuple[int, int], RobustEstimate | None],
) -> list[MatchSet]:
    """Match sets reduced to two-view inliers; failed pairs are dropped."""
    out = []
    for key in sorted(match_sets):
        est = estimates.get(key)
        if est is None:
            continue
        ms, mask = match_sets[key], est.inlier_mask
        out.append(
            MatchSet(
                ms.frame_i,
                ms.frame_j,
                ms.kp_i[mask],
                ms.kp_j[mask],
                ms.xy_i[mask],
                ms.xy_j[mask],
                ms.certainty[mask],
            )
        )
    return out


def run_method_two(
    manifest: FrameManifest,
    keypoints: Mapping[int, KeypointSet],
    warps,
    embeddings: Sequence[Embedding],
    cfg: PipelineConfig,
    manual_pairs: Sequence[tuple[int, int, CropId, CropId]] = (),
    use_retrieval: bool = True,
) -> MethodTwoResult:
    """Match, verify, reconstruct, and assemble consecutive motions.

    Pairs come from plan_pairs; matches are reduced to two-view inliers
    before track building; fragments from the incremental reconstruction
    feed the assembly rules together with the consecutive two-view
    estimates.
    """
    pairs, crop_restrictions = plan_pairs(manifest, embeddings, warps, cfg, manual_pairs, use_retrieval)
    logger.info("method two: %d pairs to match", len(pairs))
    match_sets = match_pairs(manifest, keypoints, warps, pairs, crop_restrictions, cfg)
    estimates = estimate_pairs(manifest, match_sets, cfg)

    good = {k: e for k, e in estimates.items() if e is not None}
    fragments = reconstruct(manifest.intrinsics_map(), inlier_match_sets(match_sets, estimates), good, cfg.sfm)

    two_view: dict[tuple[int, int], RelativeMotion | None] = {}
    for f in range(len(manifest) - 1):
        est = estimates.get((f, f + 1))
        two_view[(f, f + 1)] = None if est is None else est.motion

    records = assemble(manifest, fragments, two_view, cfg.assembly)
    return MethodTwoResult(records, fragments, sorted(pairs.values(), key=lambda p: (p.frame_i, p.frame_j)), estimates)


# ---------------------------------------------------------------------------
# Assembly


def _fragment_scale(manifest: FrameManifest, frag: Fragment, target: float) -> float:
    norms = []
    for f in range(len(manifest) - 1):
        if f in frag.poses and (f + 1) in frag.poses:
            rel = relative_motion(frag.poses[f], frag.poses[f + 1])
            norms.append(float(np.linalg.norm(rel.t)))
    if not norms:
        return 1.0
    med = float(np.median(norms))
    if med <= 0.0:
        return 1.0
    return target / med


def assemble(
    manifest: FrameManifest,
    fragments: Sequence[Fragment],
    two_view: Mapping[tuple[int, int], RelativeMotion | None],
    cfg: AssemblyConfig,
) -> list[MotionRecord]:
    """Produce one motion record per consecutive pair.

    Precedence per pair (i, i+1): a fragment containing both frames (the
    largest, ties to the smaller fragment_id) with its translation rescaled
    by the fragment's median-baseline factor; else a zero motion when the
    timestamp gap exceeds cfg.time_jump_s; else the pair's two-view estimate,
    forward-signed with translation length target_median_translation_m. A
    two-view entry of None means estimation was attempted and failed: with
    cfg.identity_fallback it degrades to a zero motion, otherwise it is an
    error. A missing entry is always an error.

    Raises:
        MissingEstimate: a pair has no fragment, no time-jump exemption, and
            no two-view entry (or a failed one with identity_fallback off).
    """
    scales = {frag.fragment_id: _fragment_scale(manifest, frag, cfg.target_median_translation_m) for frag in fragments}
    axis = np.array(cfg.forward_axis, dtype=np.float64)
    records: list[MotionRecord] = []
    for f in range(len(manifest) - 1):
        pair = (f, f + 1)
        holder = None
        for frag in fragments:
            if f in frag.poses and f + 1 in frag.poses:
                if holder is None or (len(frag.poses), -frag.fragment_id) > (len(holder.poses), -holder.fragment_id):
                    holder = frag
        if holder is not None:
            rel = relative_motion(holder.poses[f], holder.poses[f + 1], f, f + 1)
            scaled = RelativeMotion(rel.q, rel.t * scales[holder.fragment_id], f, f + 1)
            records.append(MotionRecord(f, f + 1, scaled, SourceTag.FRAGMENT, holder.fragment_id))
            continue
        if manifest.timestamp_gap(f, f + 1) > cfg.time_jump_s:
            records.append(_identity_record(f, f + 1))
            continue
        if pair not in two_view:
            raise MissingEstimate(f"no estimate available for consecutive pair {pair}")
        motion = two_view[pair]
        if motion is None:
            if not cfg.identity_fallback:
                raise MissingEstimate(f"two-view estimation failed for pair {pair}")
            records.append(_identity_record(f, f + 1))
            continue
        records.append(
            MotionRecord(
                f, f + 1, _forward_signed(motion, axis, cfg.target_median_translation_m), SourceTag.TWO_VIEW
            )
        )
    return records


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalRow:
    frame_i: int
    frame_j: int
    rotation_mrad: float
    translation_m: float
    source: SourceTag


@dataclass
class EvalReport:
    mean_rotation_mrad: float
    mean_translation_m: float
    rows: list[EvalRow]


def evaluate(estimated: Sequence[MotionRecord], truth: Sequence[MotionRecord]) -> EvalReport:
    """Arithmetic-mean rotation (milliradians) and translation (meters)
    errors over exactly the pairs present in both tables.

    Raises:
        CoverageMismatch: the two tables cover different pair sets.
    """
    est = {(r.frame_i, r.frame_j): r for r in estimated}
    gt = {(r.frame_i, r.frame_j): r for r in truth}
    if set(est) != set(gt):
        only_est = sorted(set(est) - set(gt))[:4]
        only_gt = sorted(set(gt) - set(est))[:4]
        raise CoverageMismatch(
            f"pair sets differ: extra estimated {only_est}, missing {only_gt}"
        )
    rows = []
    for key in sorted(est):
        rot, trans = pose_errors(est[key].motion, gt[key].motion)
        rows.append(EvalRow(key[0], key[1], rot, trans, est[key].source))
    if not rows:
        return EvalReport(0.0, 0.0, [])
    return EvalReport(
        float(np.mean([r.rotation_mrad for r in rows])),
        float(np.mean([r.translation_m for r in rows])),
        rows,
    )
