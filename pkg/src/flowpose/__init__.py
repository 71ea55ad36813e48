"""Flow-based 6DoF object pose refinement and tracking.

The package turns dense template-to-frame optical flow plus a visibility
map into weighted 2D-3D correspondences, solves them with EPnP inside a
RANSAC loop, polishes with Levenberg-Marquardt, and iterates with a
render-compare scheme. A tracking controller reuses flow to propagate
correspondences between frames and only re-registers when the surviving
inlier ratio drops. Everything is exercised against a synthetic flow
oracle with controllable noise, so the full pipeline runs and is tested
without a learned flow network.
"""

from .errors import (
    AllIterationsFailed,
    ConfigError,
    DegenerateBox,
    DegenerateConfiguration,
    DimensionMismatch,
    EmptyInput,
    EmptyRender,
    FlowPoseError,
    InitializationBehindCamera,
    InitializationFailed,
    LengthMismatch,
    NoConsensus,
    NonPositiveDepth,
    NumericalFailure,
    TooFewCorrespondences,
)
from .geometry import (
    CameraIntrinsics,
    CropCamera,
    Pose,
    backproject,
    compose,
    geodesic_deg,
    interpolate_pose,
    inverse,
    make_crop_camera,
    pose_from_crop,
    pose_in_crop,
    project,
)
from .correspondence import (
    Correspondences,
    FlowField,
    Template,
    VisibilityMap,
    build_correspondences,
    mix,
    propagate,
    read_flow,
    read_visibility,
    write_flow,
    write_visibility,
)
from .pnp import FitResult, RansacConfig, ransac_pnp, refine_lm, solve_epnp
from .onboarding import (
    ObjectModel,
    QueryDescriptor,
    TemplateSet,
    build_template_set,
    load_template_set,
    read_object_model,
    render_depth_template,
    retrieve_coarse,
    sample_so3,
    save_template_set,
    splat_depth,
    write_object_model,
)
from .refine import (
    FlowProvider,
    RefineConfig,
    RefineOutcome,
    refine_pose,
    select_best,
)
from .tracking import (
    FrameDecision,
    FrameFlowProvider,
    TrackerConfig,
    TrackerState,
    init_tracker,
    track_frame,
    track_sequence,
)
from .oracle import (
    NoiseSpec,
    OccluderSpec,
    OracleFlowProvider,
    OracleFrame,
    OracleFrameFlowProvider,
    SceneSpec,
    generate_sequence,
    make_model,
    oracle_f2f_flow,
    oracle_m2f_flow,
    read_scene_spec,
    refiner_loss,
    write_scene_spec,
)
from .metrics import (
    PoseError,
    SequenceReport,
    add_error,
    adds_error,
    auc,
    mssd_mspd,
    pose_delta,
    run_reset_protocol,
)
from .seeding import derive_rng, derive_seed

__version__ = "0.1.0"
