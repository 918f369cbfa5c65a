"""Shared fixtures: synthetic scenes rendered once per test session."""

import pytest

from vloc.pipeline import (
    DictWarpSource,
    PipelineConfig,
    estimate_pairs,
    match_pairs,
    plan_pairs,
)
from vloc.synth import NoiseConfig, SceneConfig, preset_config, render_scene

ZERO_NOISE = NoiseConfig(
    keypoint_px=0.0, warp_px=0.0, outlier_fraction=0.0, embedding=0.0
)


@pytest.fixture(scope="session")
def zero_noise_chain():
    """51-frame noiseless drive with one 90 degree turn: 50 consecutive
    pairs whose keypoints are exact landmark projections."""
    return render_scene(
        SceneConfig(n_frames=51, turns=((20, 90.0),), noise=ZERO_NOISE, seed=7)
    )


@pytest.fixture(scope="session")
def continuous_scene():
    """100-frame noisy continuous drive."""
    return render_scene(preset_config("continuous", seed=3))


@pytest.fixture(scope="session")
def cut_revisit_scene():
    """60 frames with a 76 s time jump at frame 30 onto a 2 m-offset revisit
    of frames 4..11; the halves share no consecutive overlap, so only
    retrieval pairs can bridge them."""
    return render_scene(
        SceneConfig(
            n_frames=60, time_jumps=((30, 76.0),), revisits=((30, 8, 4, 2.0),), seed=11
        )
    )


class PipelineProducts:
    """Planned pairs plus the match and estimate tables for one scene."""

    def __init__(self, rendered, cfg=None):
        self.cfg = cfg if cfg is not None else PipelineConfig()
        self.rendered = rendered
        self.manifest = rendered.scene.manifest
        self.warps = DictWarpSource(rendered.warps)
        self.pairs, self.crop_restrictions = plan_pairs(
            self.manifest, rendered.embeddings, self.warps, self.cfg
        )
        self.match_sets = match_pairs(
            self.manifest,
            rendered.keypoints,
            self.warps,
            self.pairs,
            self.crop_restrictions,
            self.cfg,
        )
        self.estimates = estimate_pairs(self.manifest, self.match_sets, self.cfg)

    def good_estimates(self):
        return {k: v for k, v in self.estimates.items() if v is not None}


@pytest.fixture(scope="session")
def cut_revisit_products(cut_revisit_scene):
    return PipelineProducts(cut_revisit_scene)
