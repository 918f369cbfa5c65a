"""On-disk formats for scenes, warps, matches, and motion tables.

Binary layouts are little-endian with a 4-byte magic and a u32 version:
warp files (.vlw) store a (H, W, 3) float32 grid, keypoint files (.vlk) a
(n, 3) float32 array of (x, y, score), embedding files (.vle) a float32
vector. Warp files carry no crop metadata themselves; the warps directory
holds a warp_index.json sidecar mapping each file to its frame pair and crop
rectangles. The matches table has a header row; motion and manual-pair
tables are bare rows. Motion tables serialize floats with repr-exact
precision so reruns can be compared byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FormatError, MissingWarp
from .geom import CameraIntrinsics, Pose, RelativeMotion
from .matchcore import CropId, CropRect, DenseWarp, KeypointSet, MatchSet
from .retrieval import Embedding, FramePair, PairSource

_WARP_MAGIC = b"VLCW"
_KEYPOINT_MAGIC = b"VLCK"
_EMBEDDING_MAGIC = b"VLCE"
_VERSION = 1


# ---------------------------------------------------------------------------
# Frames


@dataclass
class FrameRecord:
    """One captured frame: identity, timing, geometry."""

    frame: int
    image_id: str
    timestamp: float
    width: int
    height: int
    intrinsics: CameraIntrinsics
    full_crop: CropRect

    @property
    def size(self) -> tuple[float, float]:
        return float(self.width), float(self.height)


@dataclass
class FrameManifest:
    """Ordered frame table for one sequence.

    Frame ids must be exactly 0..n-1 and timestamps non-decreasing.
    """

    frames: list[FrameRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.frames = sorted(self.frames, key=lambda f: f.frame)
        ids = [f.frame for f in self.frames]
        if ids != list(range(len(ids))):
            raise FormatError(f"frame ids must be dense 0..n-1, got {ids[:8]}...")
        ts = [f.timestamp for f in self.frames]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise FormatError("timestamps must be non-decreasing")

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, frame: int) -> FrameRecord:
        return self.frames[frame]

    def intrinsics_map(self) -> dict[int, CameraIntrinsics]:
        return {f.frame: f.intrinsics for f in self.frames}

    def timestamp_gap(self, frame_i: int, frame_j: int) -> float:
        return self.frames[frame_j].timestamp - self.frames[frame_i].timestamp


class SourceTag(str, Enum):
    """Provenance of an output relative motion."""

    FRAGMENT = "FRAGMENT"
    TIME_JUMP_ZERO = "TIME_JUMP_ZERO"
    TWO_VIEW = "TWO_VIEW"
    GT = "GT"


@dataclass
class MotionRecord:
    """Relative motion of one consecutive frame pair, with provenance."""

    frame_i: int
    frame_j: int
    motion: RelativeMotion
    source: SourceTag
    fragment_id: int | None = None


# ---------------------------------------------------------------------------
# Binary blobs


def _read_header(blob: bytes, magic: bytes, path: str) -> memoryview:
    if len(blob) < 8 or blob[:4] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    (version,) = np.frombuffer(blob[4:8], dtype="<u4")
    if int(version) != _VERSION:
        raise FormatError(f"{path}: unsupported version {int(version)}")
    return memoryview(blob)[8:]


def write_warp(path: str, warp: DenseWarp) -> None:
    H, W = warp.grid.shape[:2]
    with open(path, "wb") as fh:
        fh.write(_WARP_MAGIC)
        fh.write(np.array([_VERSION, H, W], dtype="<u4").tobytes())
        fh.write(warp.grid.astype("<f4").tobytes())


def read_warp(path: str, src_crop: CropRect, dst_crop: CropRect) -> DenseWarp:
    with open(path, "rb") as fh:
        blob = fh.read()
    body = _read_header(blob, _WARP_MAGIC, path)
    if len(body) < 8:
        raise FormatError(f"{path}: truncated header")
    H, W = np.frombuffer(body[:8], dtype="<u4")
    expected = int(H) * int(W) * 3 * 4
    if len(body) - 8 != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, got {len(body) - 8}")
    grid = np.frombuffer(body[8:], dtype="<f4").astype(np.float64).reshape(int(H), int(W), 3)
    return DenseWarp(src_crop, dst_crop, grid)


def write_keypoints(path: str, kps: KeypointSet) -> None:
    with open(path, "wb") as fh:
        fh.write(_KEYPOINT_MAGIC)
        fh.write(np.array([_VERSION, len(kps)], dtype="<u4").tobytes())
        fh.write(kps.points.astype("<f4").tobytes())


def read_keypoints(path: str, frame: int) -> KeypointSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    body = _read_header(blob, _KEYPOINT_MAGIC, path)
    if len(body) < 4:
        raise FormatError(f"{path}: truncated header")
    (count,) = np.frombuffer(body[:4], dtype="<u4")
    expected = int(count) * 3 * 4
    if len(body) - 4 != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, got {len(body) - 4}")
    pts = np.frombuffer(body[4:], dtype="<f4").astype(np.float64).reshape(int(count), 3)
    return KeypointSet(frame, pts)


def write_embedding(path: str, emb: Embedding) -> None:
    with open(path, "wb") as fh:
        fh.write(_EMBEDDING_MAGIC)
        fh.write(np.array([_VERSION, emb.vector.size], dtype="<u4").tobytes())
        fh.write(emb.vector.astype("<f4").tobytes())


def read_embedding(path: str, frame: int) -> Embedding:
    with open(path, "rb") as fh:
        blob = fh.read()
    body = _read_header(blob, _EMBEDDING_MAGIC, path)
    if len(body) < 4:
        raise FormatError(f"{path}: truncated header")
    (dim,) = np.frombuffer(body[:4], dtype="<u4")
    if len(body) - 4 != int(dim) * 4:
        raise FormatError(f"{path}: expected {int(dim) * 4} payload bytes")
    vec = np.frombuffer(body[4:], dtype="<f4").astype(np.float64)
    return Embedding(frame, vec)


# ---------------------------------------------------------------------------
# CSV tables


def write_matches(path: str, ms: MatchSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kp_i", "kp_j", "x_i", "y_i", "x_j", "y_j", "certainty"])
        for k in range(len(ms)):
            w.writerow(
                [int(ms.kp_i[k]), int(ms.kp_j[k])]
                + [f"{v:.9g}" for v in (*ms.xy_i[k], *ms.xy_j[k], ms.certainty[k])]
            )


def read_matches(path: str, frame_i: int, frame_j: int) -> MatchSet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    n = len(rows)
    kp_i = np.array([int(r["kp_i"]) for r in rows], dtype=np.int64)
    kp_j = np.array([int(r["kp_j"]) for r in rows], dtype=np.int64)
    xy_i = np.array([[float(r["x_i"]), float(r["y_i"])] for r in rows]).reshape(n, 2)
    xy_j = np.array([[float(r["x_j"]), float(r["y_j"])] for r in rows]).reshape(n, 2)
    cert = np.array([float(r["certainty"]) for r in rows])
    return MatchSet(frame_i, frame_j, kp_i, kp_j, xy_i, xy_j, cert)


def motions_csv_text(records: Sequence[MotionRecord]) -> str:
    """Render a motion table to CSV text with repr-exact floats.

    Rows are (frame_i, frame_j, qw, qx, qy, qz, tx, ty, tz, source_tag)
    with no header; fragment ids are in-memory diagnostics only.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for rec in records:
        q, t = rec.motion.q, rec.motion.t
        w.writerow(
            [rec.frame_i, rec.frame_j]
            + [f"{v:.17g}" for v in (*q, *t)]
            + [rec.source.value]
        )
    return buf.getvalue()


def write_motions(path: str, records: Sequence[MotionRecord]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(motions_csv_text(records))


def read_motions(path: str) -> list[MotionRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    out = []
    for r in rows:
        if len(r) != 10:
            raise FormatError(f"{path}: expected 10 columns, got {len(r)}")
        vals = [float(v) for v in r[2:9]]
        motion = RelativeMotion(
            q=np.array(vals[:4]),
            t=np.array(vals[4:]),
            frame_i=int(r[0]),
            frame_j=int(r[1]),
        )
        out.append(MotionRecord(int(r[0]), int(r[1]), motion, SourceTag(r[9])))
    return out


def write_estimates(path: str, estimates: Mapping[tuple[int, int], tuple[RelativeMotion, int] | None]) -> None:
    """Persist per-pair two-view outcomes; failed pairs keep an ok=0 row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_i", "frame_j", "ok", "qw", "qx", "qy", "qz", "tx", "ty", "tz", "inliers"])
        for (i, j), entry in sorted(estimates.items()):
            if entry is None:
                w.writerow([i, j, 0, 1, 0, 0, 0, 0, 0, 0, 0])
                continue
            motion, inliers = entry
            w.writerow(
                [i, j, 1]
                + [f"{v:.17g}" for v in (*motion.q, *motion.t)]
                + [inliers]
            )


def read_estimates(path: str) -> dict[tuple[int, int], tuple[RelativeMotion, int] | None]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out: dict[tuple[int, int], tuple[RelativeMotion, int] | None] = {}
    for r in rows:
        i, j = int(r["frame_i"]), int(r["frame_j"])
        if int(r["ok"]) == 0:
            out[(i, j)] = None
            continue
        motion = RelativeMotion(
            q=np.array([float(r["qw"]), float(r["qx"]), float(r["qy"]), float(r["qz"])]),
            t=np.array([float(r["tx"]), float(r["ty"]), float(r["tz"])]),
            frame_i=i,
            frame_j=j,
        )
        out[(i, j)] = (motion, int(r["inliers"]))
    return out


def write_manual_pairs(path: str, rows: Sequence[tuple[int, int, str, str]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for r in rows:
            w.writerow(list(r))


def append_manual_pair(path: str, row: tuple[int, int, str, str]) -> None:
    with open(path, "a", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(list(row))


def read_manual_pairs(path: str) -> list[tuple[int, int, CropId, CropId]]:
    if not os.path.exists(path):
        return []
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    out = []
    for r in rows:
        try:
            if len(r) != 4:
                raise ValueError("expected 4 columns")
            out.append((int(r[0]), int(r[1]), CropId(r[2]), CropId(r[3])))
        except ValueError as exc:
            raise FormatError(f"{path}: bad manual pair row {r}") from exc
    return out


# ---------------------------------------------------------------------------
# JSON documents


def _crop_to_json(c: CropRect) -> list[float]:
    return [c.x, c.y, c.w, c.h]


def write_manifest(path: str, manifest: FrameManifest) -> None:
    doc = [
        {
            "frame": f.frame,
            "image_id": f.image_id,
            "timestamp": f.timestamp,
            "width": f.width,
            "height": f.height,
            "fx": f.intrinsics.fx,
            "fy": f.intrinsics.fy,
            "cx": f.intrinsics.cx,
            "cy": f.intrinsics.cy,
            "crop": _crop_to_json(f.full_crop),
        }
        for f in manifest.frames
    ]
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def read_manifest(path: str) -> FrameManifest:
    with open(path) as fh:
        doc = json.load(fh)
    frames = []
    for row in doc:
        try:
            x, y, w, h = row["crop"]
            frames.append(
                FrameRecord(
                    frame=int(row["frame"]),
                    image_id=str(row["image_id"]),
                    timestamp=float(row["timestamp"]),
                    width=int(row["width"]),
                    height=int(row["height"]),
                    intrinsics=CameraIntrinsics(
                        fx=float(row["fx"]), fy=float(row["fy"]),
                        cx=float(row["cx"]), cy=float(row["cy"]),
                        width=int(row["width"]), height=int(row["height"]),
                    ),
                    full_crop=CropRect(x, y, w, h, int(row["frame"]), CropId.FULL),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: bad frame row {row}") from exc
    return FrameManifest(frames)


def write_fragments(path: str, fragments: Sequence) -> None:
    doc = []
    for frag in fragments:
        doc.append(
            {
                "fragment_id": frag.fragment_id,
                "frames": [
                    {
                        "frame": f,
                        "qw": frag.poses[f].q[0],
                        "qx": frag.poses[f].q[1],
                        "qy": frag.poses[f].q[2],
                        "qz": frag.poses[f].q[3],
                        "tx": frag.poses[f].t[0],
                        "ty": frag.poses[f].t[1],
                        "tz": frag.poses[f].t[2],
                    }
                    for f in sorted(frag.poses)
                ],
                "point_count": len(frag.points),
            }
        )
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def read_fragments(path: str) -> list[dict]:
    with open(path) as fh:
        return json.load(fh)


def write_pairs(path: str, pairs: Sequence[FramePair]) -> None:
    doc = [{"frame_i": p.frame_i, "frame_j": p.frame_j, "source": p.source.value} for p in pairs]
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def read_pairs(path: str) -> list[FramePair]:
    with open(path) as fh:
        doc = json.load(fh)
    return [FramePair(int(r["frame_i"]), int(r["frame_j"]), PairSource(r["source"])) for r in doc]


# ---------------------------------------------------------------------------
# Warp store


def warp_filename(src: int, dst: int, crop_src: CropId, crop_dst: CropId) -> str:
    return f"warp_{src}_{dst}_{crop_src.value}_{crop_dst.value}.vlw"


def keypoint_filename(frame: int) -> str:
    return f"kp_{frame}.vlk"


def embedding_filename(frame: int) -> str:
    return f"emb_{frame}.vle"


def load_keypoints(directory: str, n_frames: int) -> dict[int, KeypointSet]:
    return {
        f: read_keypoints(os.path.join(directory, keypoint_filename(f)), f)
        for f in range(n_frames)
    }


def load_embeddings(directory: str, n_frames: int) -> list[Embedding]:
    return [
        read_embedding(os.path.join(directory, embedding_filename(f)), f)
        for f in range(n_frames)
    ]


class WarpStore:
    """Lazy loader over a directory of warp files plus its index sidecar.

    The index (warp_index.json) maps each warp filename to its source and
    destination frames and crop rectangles. Grids are read from disk on
    first access and cached.
    """

    def __init__(self, directory: str):
        self.directory = directory
        index_path = os.path.join(directory, "warp_index.json")
        try:
            with open(index_path) as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise FormatError(f"missing warp index {index_path}") from exc
        self._index: dict[tuple[int, int, CropId, CropId], dict] = {}
        for name, meta in raw.items():
            try:
                key = (
                    int(meta["src_frame"]),
                    int(meta["dst_frame"]),
                    CropId(meta["src_crop_id"]),
                    CropId(meta["dst_crop_id"]),
                )
            except (KeyError, ValueError) as exc:
                raise FormatError(f"{index_path}: bad entry {name}") from exc
            self._index[key] = {"file": name, **meta}
        self._cache: dict[tuple[int, int, CropId, CropId], DenseWarp] = {}

    @staticmethod
    def index_entry(src: CropRect, dst: CropRect) -> dict:
        return {
            "src_frame": src.frame,
            "dst_frame": dst.frame,
            "src_crop_id": src.crop_id.value,
            "dst_crop_id": dst.crop_id.value,
            "src_rect": _crop_to_json(src),
            "dst_rect": _crop_to_json(dst),
        }

    def has_pair(self, frame_i: int, frame_j: int) -> bool:
        return (frame_i, frame_j, CropId.FULL, CropId.FULL) in self._index

    def get(self, src: int, dst: int, crop_src: CropId, crop_dst: CropId) -> DenseWarp:
        key = (src, dst, crop_src, crop_dst)
        if key in self._cache:
            return self._cache[key]
        meta = self._index.get(key)
        if meta is None:
            raise MissingWarp(f"no warp {src}->{dst} {crop_src.value}x{crop_dst.value}")
        sx, sy, sw, sh = meta["src_rect"]
        dx, dy, dw, dh = meta["dst_rect"]
        warp = read_warp(
            os.path.join(self.directory, meta["file"]),
            CropRect(sx, sy, sw, sh, src, crop_src),
            CropRect(dx, dy, dw, dh, dst, crop_dst),
        )
        self._cache[key] = warp
        return warp

    def pair_warps(self, frame_i: int, frame_j: int, combos=None):
        """Both directional warps for each crop combination of a pair.

        Returns a mapping (crop_i, crop_j) -> (warp i->j, warp j->i)
        suitable for match_multicrop.
        """
        from .matchcore import CROP_COMBINATIONS

        out = {}
        for ca, cb in CROP_COMBINATIONS if combos is None else combos:
            out[(ca, cb)] = (
                self.get(frame_i, frame_j, ca, cb),
                self.get(frame_j, frame_i, cb, ca),
            )
        return out

    def drop_cache(self) -> None:
        self._cache.clear()
