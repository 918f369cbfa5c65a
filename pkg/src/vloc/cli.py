"""Command-line entry points for the localisation pipeline.

Subcommands either run one stage against a data directory (match, retrieve,
estimate, sfm, assemble, evaluate), run a whole method end to end
(run-method1, run-method2), generate synthetic input data (synth), or serve
the curation API (serve). Stages communicate only through files, so any
stage can be rerun in isolation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import re
import sys

import numpy as np

from . import fileio, pipeline, synth
from .errors import FormatError, VlocError
from .fileio import WarpStore
from .geom import Pose, RelativeMotion
from .matchcore import MatchSet
from .pipeline import PipelineConfig
from .retrieval import propose_pairs
from .server import create_server
from .sfm import Fragment, reconstruct
from .synth import preset_config

logger = logging.getLogger(__name__)

_MATCH_FILE = re.compile(r"matches_(\d+)_(\d+)\.csv$")


# ---------------------------------------------------------------------------
# Configuration plumbing


def _merge_dataclass(obj, overrides: dict):
    """Recursive dataclass update from a JSON-shaped dict.

    Lists become tuples (recursively) so overrides can target tuple-typed
    fields; unknown keys are an error rather than silently ignored.
    """
    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, val in overrides.items():
        if key not in names:
            raise FormatError(f"unknown config key {key!r} for {type(obj).__name__}")
        cur = getattr(obj, key)
        if dataclasses.is_dataclass(cur) and isinstance(val, dict):
            updates[key] = _merge_dataclass(cur, val)
        else:
            updates[key] = _tuplify(val)
    return dataclasses.replace(obj, **updates)


def _tuplify(val):
    if isinstance(val, list):
        return tuple(_tuplify(v) for v in val)
    return val


def _load_overrides(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return doc


def _pipeline_config(args) -> PipelineConfig:
    cfg = _merge_dataclass(PipelineConfig(), _load_overrides(args.config))
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg,
            ransac=dataclasses.replace(cfg.ransac, seed=args.seed),
            sfm=dataclasses.replace(
                cfg.sfm, pnp=dataclasses.replace(cfg.sfm.pnp, seed=args.seed)
            ),
        )
    if args.threads is not None:
        cfg = dataclasses.replace(cfg, threads=args.threads)
    return cfg


# ---------------------------------------------------------------------------
# Shared data loading


def _load_inputs(data_dir: str):
    manifest = fileio.read_manifest(os.path.join(data_dir, "manifest.json"))
    store = WarpStore(os.path.join(data_dir, "warps"))
    return manifest, store


def _load_matches(data_dir: str) -> dict[tuple[int, int], MatchSet]:
    out = {}
    for name in sorted(os.listdir(data_dir)):
        m = _MATCH_FILE.match(name)
        if m:
            i, j = int(m.group(1)), int(m.group(2))
            out[(i, j)] = fileio.read_matches(os.path.join(data_dir, name), i, j)
    return out


def _fragments_from_json(doc: list[dict]) -> list[Fragment]:
    fragments = []
    for row in doc:
        poses = {}
        for fr in row["frames"]:
            poses[int(fr["frame"])] = Pose(
                q=np.array([fr["qw"], fr["qx"], fr["qy"], fr["qz"]], dtype=np.float64),
                t=np.array([fr["tx"], fr["ty"], fr["tz"]], dtype=np.float64),
            )
        fragments.append(
            Fragment(
                fragment_id=int(row["fragment_id"]),
                poses=poses,
                points={},
                registration_order=sorted(poses),
            )
        )
    return fragments


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    cfg = preset_config(args.preset, seed=args.seed if args.seed is not None else 0)
    overrides = _load_overrides(args.config)
    if overrides:
        cfg = _merge_dataclass(cfg, overrides)
    rendered = synth.render_scene(cfg)
    synth.write_scene(rendered, args.data_dir)
    logger.info("wrote synthetic scene (%d frames) to %s", cfg.n_frames, args.data_dir)
    return 0


def cmd_retrieve(args) -> int:
    manifest, _ = _load_inputs(args.data_dir)
    cfg = _pipeline_config(args)
    embeddings = fileio.load_embeddings(args.data_dir, len(manifest))
    proposals = propose_pairs(embeddings, cfg.retrieval)
    fileio.write_pairs(os.path.join(args.data_dir, "pairs_proposed.json"), proposals)
    logger.info("proposed %d pairs", len(proposals))
    return 0


def cmd_match(args) -> int:
    manifest, store = _load_inputs(args.data_dir)
    cfg = _pipeline_config(args)
    keypoints = fileio.load_keypoints(args.data_dir, len(manifest))
    embeddings = fileio.load_embeddings(args.data_dir, len(manifest))
    manual = fileio.read_manual_pairs(os.path.join(args.data_dir, "manual_pairs.csv"))
    pairs, restrictions = pipeline.plan_pairs(manifest, embeddings, store, cfg, manual)
    for name in os.listdir(args.data_dir):
        if _MATCH_FILE.match(name):
            os.remove(os.path.join(args.data_dir, name))
    match_sets = pipeline.match_pairs(manifest, keypoints, store, pairs, restrictions, cfg)
    for (i, j), ms in sorted(match_sets.items()):
        fileio.write_matches(os.path.join(args.data_dir, f"matches_{i}_{j}.csv"), ms)
    logger.info("matched %d pairs", len(match_sets))
    return 0


def cmd_estimate(args) -> int:
    manifest, _ = _load_inputs(args.data_dir)
    cfg = _pipeline_config(args)
    match_sets = _load_matches(args.data_dir)
    estimates = pipeline.estimate_pairs(manifest, match_sets, cfg)
    fileio.write_estimates(
        os.path.join(args.data_dir, "estimates.csv"),
        {
            key: None if est is None else (est.motion, est.inlier_count)
            for key, est in estimates.items()
        },
    )
    ok = sum(1 for e in estimates.values() if e is not None)
    logger.info("estimated %d/%d pairs", ok, len(estimates))
    return 0


def cmd_sfm(args) -> int:
    manifest, _ = _load_inputs(args.data_dir)
    cfg = _pipeline_config(args)
    match_sets = _load_matches(args.data_dir)
    estimates = pipeline.estimate_pairs(manifest, match_sets, cfg)
    good = {k: e for k, e in estimates.items() if e is not None}
    fragments = reconstruct(
        manifest.intrinsics_map(),
        pipeline.inlier_match_sets(match_sets, estimates),
        good,
        cfg.sfm,
    )
    fileio.write_fragments(os.path.join(args.data_dir, "fragments.json"), fragments)
    logger.info("reconstructed %d fragments", len(fragments))
    return 0


def cmd_assemble(args) -> int:
    manifest, _ = _load_inputs(args.data_dir)
    cfg = _pipeline_config(args)
    fragments = _fragments_from_json(
        fileio.read_fragments(os.path.join(args.data_dir, "fragments.json"))
    )
    stored = fileio.read_estimates(os.path.join(args.data_dir, "estimates.csv"))
    two_view: dict[tuple[int, int], RelativeMotion | None] = {}
    for f in range(len(manifest) - 1):
        if (f, f + 1) in stored:
            entry = stored[(f, f + 1)]
            two_view[(f, f + 1)] = None if entry is None else entry[0]
    records = pipeline.assemble(manifest, fragments, two_view, cfg.assembly)
    fileio.write_motions(os.path.join(args.data_dir, args.out), records)
    logger.info("assembled %d motions to %s", len(records), args.out)
    return 0


def cmd_evaluate(args) -> int:
    est = fileio.read_motions(os.path.join(args.data_dir, args.est))
    gt = fileio.read_motions(os.path.join(args.data_dir, args.gt))
    report = pipeline.evaluate(est, gt)
    print(
        json.dumps(
            {
                "mean_rotation_mrad": report.mean_rotation_mrad,
                "mean_translation_m": report.mean_translation_m,
                "pairs": len(report.rows),
            }
        )
    )
    return 0


def cmd_run_method1(args) -> int:
    manifest, store = _load_inputs(args.data_dir)
    cfg = _pipeline_config(args)
    records = pipeline.run_method_one(manifest, store, cfg)
    fileio.write_motions(os.path.join(args.data_dir, args.out), records)
    logger.info("method one wrote %d motions to %s", len(records), args.out)
    return 0


def cmd_run_method2(args) -> int:
    manifest, store = _load_inputs(args.data_dir)
    cfg = _pipeline_config(args)
    keypoints = fileio.load_keypoints(args.data_dir, len(manifest))
    embeddings = fileio.load_embeddings(args.data_dir, len(manifest))
    manual = []
    if not args.no_manual:
        manual = fileio.read_manual_pairs(os.path.join(args.data_dir, "manual_pairs.csv"))
    result = pipeline.run_method_two(
        manifest,
        keypoints,
        store,
        embeddings,
        cfg,
        manual_pairs=manual,
        use_retrieval=not args.no_retrieval,
    )
    fileio.write_motions(os.path.join(args.data_dir, args.out), result.records)
    fileio.write_fragments(os.path.join(args.data_dir, "fragments.json"), result.fragments)
    logger.info(
        "method two wrote %d motions (%d fragments) to %s",
        len(result.records), len(result.fragments), args.out,
    )
    return 0


def cmd_serve(args) -> int:
    static_dir = args.static_dir
    if static_dir is None and os.path.isdir(os.path.join("frontend", "dist")):
        static_dir = os.path.join("frontend", "dist")
    server = create_server(args.data_dir, static_dir, args.host, args.port)
    logger.info("serving %s on http://%s:%d", args.data_dir, args.host, args.port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_common(sp, out_default: str | None = None) -> None:
    sp.add_argument("--data-dir", required=True, help="directory of sequence files")
    sp.add_argument("--config", default=None, help="JSON file of config overrides")
    sp.add_argument("--seed", type=int, default=None, help="estimation seed override")
    sp.add_argument("--threads", type=int, default=None, help="worker thread count")
    if out_default is not None:
        sp.add_argument("--out", default=out_default, help="output motion table filename")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vloc", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic sequence")
    sp.add_argument(
        "--preset",
        required=True,
        choices=["continuous", "one-cut", "revisit-loop", "paper-like"],
    )
    _add_common(sp)
    sp.set_defaults(fn=cmd_synth)

    for name, fn, helptext in [
        ("retrieve", cmd_retrieve, "propose loop-closure pairs from embeddings"),
        ("match", cmd_match, "match keypoints for all planned pairs"),
        ("estimate", cmd_estimate, "robust two-view estimation per matched pair"),
        ("sfm", cmd_sfm, "incremental reconstruction into fragments"),
    ]:
        sp = sub.add_parser(name, help=helptext)
        _add_common(sp)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("assemble", help="produce consecutive motions from stage outputs")
    _add_common(sp, out_default="motions.csv")
    sp.set_defaults(fn=cmd_assemble)

    sp = sub.add_parser("evaluate", help="score a motion table against ground truth")
    _add_common(sp)
    sp.add_argument("--est", default="motions.csv", help="estimated motion table filename")
    sp.add_argument("--gt", default="motions_gt.csv", help="ground-truth motion table filename")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("run-method1", help="direct sequential estimation end to end")
    _add_common(sp, out_default="motions.csv")
    sp.set_defaults(fn=cmd_run_method1)

    sp = sub.add_parser("run-method2", help="full matching + reconstruction end to end")
    _add_common(sp, out_default="motions.csv")
    sp.add_argument("--no-retrieval", action="store_true", help="skip retrieval pairs")
    sp.add_argument("--no-manual", action="store_true", help="ignore manual_pairs.csv")
    sp.set_defaults(fn=cmd_run_method2)

    sp = sub.add_parser("serve", help="serve the curation API and UI bundle")
    _add_common(sp)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.add_argument("--static-dir", default=None, help="built UI bundle directory")
    sp.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except VlocError as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
