"""Visual localisation from vehicle-mounted camera sequences.

Estimates the relative motion between consecutive frames either directly
from dense pairwise warps or through keypoint matching, robust two-view
geometry, and incremental reconstruction, then assembles a full motion
table with scale and time-jump handling. Includes a synthetic scene
generator for end-to-end verification and an HTTP facade for curating
manual match pairs.
"""

from .errors import (
    CheiralityAmbiguity,
    CoverageMismatch,
    DataError,
    DegenerateConfiguration,
    DegenerateTranslation,
    DimensionMismatch,
    EstimationError,
    FormatError,
    GeometryError,
    InsufficientCorrespondences,
    MatchingError,
    MissingCropCombination,
    MissingEstimate,
    MissingWarp,
    NoInitPair,
    NoModelFound,
    NonPositiveDepth,
    OutOfCrop,
    OutOfDomain,
    ParallelRays,
    RegistrationFailed,
    SingularNormalEquations,
    VlocError,
    ZeroGradient,
)
from .fileio import (
    FrameManifest,
    FrameRecord,
    MotionRecord,
    SourceTag,
    WarpStore,
    read_manifest,
    read_motions,
    write_manifest,
    write_motions,
)
from .geom import (
    CameraIntrinsics,
    Pose,
    RelativeMotion,
    decompose_essential,
    eight_point,
    essential_from_motion,
    pose_errors,
    project,
    relative_motion,
    sampson_distance,
    triangulate,
)
from .matchcore import (
    CropId,
    CropRect,
    DenseWarp,
    KeypointSet,
    MatchConfig,
    MatchSet,
    crop_transform,
    derive_crops,
    match_multicrop,
    match_single_crop,
    merge_match_sets,
    sample_warp,
)
from .pipeline import (
    AssemblyConfig,
    DictWarpSource,
    EvalReport,
    MethodTwoResult,
    PipelineConfig,
    assemble,
    evaluate,
    run_method_one,
    run_method_two,
)
from .retrieval import (
    Embedding,
    FramePair,
    PairSource,
    RetrievalConfig,
    embedding_distances,
    filter_pairs,
    propose_pairs,
)
from .robust import RansacConfig, RobustEstimate, estimate_relative_pose, pair_seed
from .sfm import (
    BaReport,
    Fragment,
    PnpConfig,
    SfmConfig,
    Track,
    build_tracks,
    bundle_adjust,
    reconstruct,
    register_image,
    triangulate_tracks,
)
from .synth import NoiseConfig, RenderedScene, Scene, SceneConfig, generate_scene, preset_config, render_scene

__all__ = [name for name in dir() if not name.startswith("_")]
