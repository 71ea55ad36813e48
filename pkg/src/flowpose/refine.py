"""Iterative pose refinement from template-to-frame flow.

One refinement iteration: crop the frame around the current estimate, obtain a
template of the object rendered at that estimate, ask a flow provider for the
template-to-crop flow and visibility, turn those into weighted 2D-3D
correspondences, and re-solve the pose robustly. The loop re-derives the crop
from each new estimate so the object stays centered even when the initial box
was poor.

The flow provider is an abstract interface; anything that can produce a flow
field and visibility map for (template, crop, frame) plugs in. This package
ships an analytic oracle provider (see :mod:`flowpose.oracle`); a learned
estimator would implement the same interface.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .correspondence import (
    Correspondences,
    FlowField,
    Template,
    VisibilityMap,
    build_correspondences,
)
from .errors import (
    AllIterationsFailed,
    DegenerateBox,
    DegenerateConfiguration,
    EmptyInput,
    InitializationBehindCamera,
    NoConsensus,
    NonPositiveDepth,
    NumericalFailure,
    TooFewCorrespondences,
)
from .geometry import (
    CameraIntrinsics,
    CropCamera,
    Pose,
    geodesic_deg,
    make_crop_camera,
    pose_from_crop,
    pose_in_crop,
    project,
)
from .onboarding import ObjectModel, TemplateSet, splat_depth
from .pnp import RansacConfig, ransac_pnp, refine_lm, reprojection_errors
from .seeding import derive_rng, derive_seed


class FlowProvider(abc.ABC):
    """Source of template-to-frame flow fields.

    Implementations must be pure functions of their arguments (plus any
    internal read-only state such as network weights or a stored scene):
    ``estimate`` may be called from worker threads when the caller batches
    frames, so it must not mutate shared state.
    """

    thread_safe: bool = True

    @abc.abstractmethod
    def estimate(
        self, template: Template, crop: CropCamera, frame_index: int
    ) -> tuple[FlowField, VisibilityMap]:
        """Estimate flow from ``template`` pixels into the frame crop.

        Args:
            template: Depth template rendered at the current pose estimate,
                expressed in the crop camera.
            crop: Virtual crop camera for ``frame_index``.
            frame_index: Which frame of the underlying footage to match.

        Returns:
            ``(flow, visibility)`` on the template pixel grid.
        """


@dataclass(frozen=True)
class RefineConfig:
    """Settings for the refinement loop.

    Attributes:
        iterations: Number of flow/solve rounds.
        tau_v: Visibility threshold for correspondence extraction.
        ransac: Robust solver settings shared by every iteration.
        online_rendering: Render a fresh template at the current estimate each
            iteration. When False a precomputed template set must be supplied
            and the nearest-orientation template is used instead.
        crop_size: Side of the square crop in pixels.
        pad: Crop zoom-out factor around the projected model box.
        splat_radius: Point splat radius for online rendering.
        max_correspondences: Cap on extracted correspondences per iteration.
        seed: Base seed; per-iteration generators are derived from it.
        tau_v_schedule: Optional per-iteration override of ``tau_v``.
        reproj_threshold_schedule: Optional per-iteration override of the
            inlier threshold, e.g. loose-to-tight annealing.
    """

    iterations: int = 5
    tau_v: float = 0.3
    ransac: RansacConfig = field(default_factory=RansacConfig)
    online_rendering: bool = True
    crop_size: int = 280
    pad: float = 1.2
    splat_radius: float = 1.5
    max_correspondences: int = 10000
    seed: int = 0
    tau_v_schedule: Optional[tuple] = None
    reproj_threshold_schedule: Optional[tuple] = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for sched in (self.tau_v_schedule, self.reproj_threshold_schedule):
            if sched is not None and len(sched) != self.iterations:
                raise ValueError("schedule length must equal iterations")


class IterationRecord(NamedTuple):
    pose: Pose
    quality: float
    inlier_count: int


@dataclass(frozen=True)
class RefineOutcome:
    """Result of a refinement run.

    ``quality`` is the weighted inlier fraction of the last successful
    iteration: sum of inlier weights over sum of all correspondence weights.
    It is the loop's own confidence estimate and is what downstream tracking
    thresholds against.
    """

    pose: Pose
    quality: float
    per_iteration: tuple
    final_inliers: Correspondences
    final_rms_px: float
    final_crop: CropCamera


def model_box(pose: Pose, model: ObjectModel, camera: CameraIntrinsics):
    """Axis-aligned bounding box of the projected model points.

    Returns:
        ``(x_min, y_min, x_max, y_max)`` in source pixels.

    Raises:
        NonPositiveDepth: If any model point falls behind the camera.
    """
    px = project(model.points, pose, camera)
    return (
        float(px[:, 0].min()),
        float(px[:, 1].min()),
        float(px[:, 0].max()),
        float(px[:, 1].max()),
    )


def _nearest_template(template_set: TemplateSet, crop_pose: Pose) -> Template:
    angles = np.array(
        [geodesic_deg(t.pose.rotation, crop_pose.rotation) for t in template_set.templates]
    )
    return template_set.templates[int(np.argmin(angles))]


def refine_pose(
    initial: Pose,
    box,
    camera: CameraIntrinsics,
    model: ObjectModel,
    provider: FlowProvider,
    config: RefineConfig = RefineConfig(),
    template_set: Optional[TemplateSet] = None,
    frame_index: int = 0,
) -> RefineOutcome:
    """Refine ``initial`` by repeated flow-based registration.

    Args:
        initial: Starting pose in the source camera frame.
        box: Optional detection box ``(x_min, y_min, x_max, y_max)`` in source
            pixels used for the first crop only. When None the first crop is
            derived from ``initial`` like every later iteration.
        camera: Source camera intrinsics.
        model: Object surface points.
        provider: Flow source.
        config: Loop settings.
        template_set: Required when ``config.online_rendering`` is False.
        frame_index: Frame identifier handed through to the provider.

    Returns:
        RefineOutcome with the pose of the last successful iteration.

    Raises:
        InitializationBehindCamera: ``initial`` puts part of the model at
            non-positive depth, so no crop can be built at all.
        AllIterationsFailed: No iteration produced a consensus pose.
    """
    depths = initial.apply(model.points)[:, 2]
    if np.min(depths) <= 0.0:
        raise InitializationBehindCamera(
            "initial pose places model points at non-positive depth"
        )
    if not config.online_rendering and template_set is None:
        raise ValueError("offline rendering requires a template set")

    estimate = initial
    records = []
    final_inliers = None
    final_rms = float("inf")
    final_crop = None

    for it in range(config.iterations):
        tau_v = config.tau_v if config.tau_v_schedule is None else float(config.tau_v_schedule[it])
        threshold = (
            config.ransac.reproj_threshold_px
            if config.reproj_threshold_schedule is None
            else float(config.reproj_threshold_schedule[it])
        )
        try:
            b = box if (it == 0 and box is not None) else model_box(estimate, model, camera)
            crop = make_crop_camera(b, camera, config.crop_size, config.pad)
        except (NonPositiveDepth, DegenerateBox):
            break  # estimate drifted somewhere unusable; keep last good result

        crop_pose = pose_in_crop(estimate, crop)
        if config.online_rendering:
            depth = splat_depth(model, crop_pose, crop.intrinsics, config.splat_radius)
            if not np.any(depth > 0.0):
                break
            template = Template.from_depth(crop_pose, crop.intrinsics, depth)
        else:
            template = _nearest_template(template_set, crop_pose)

        flow, visibility = provider.estimate(template, crop, frame_index)
        rng = derive_rng(config.seed, frame_index, it, 0)
        corrs = build_correspondences(
            flow, visibility, template, tau_v=tau_v,
            max_count=config.max_correspondences, rng=rng,
        )

        ransac_cfg = replace(
            config.ransac,
            reproj_threshold_px=threshold,
            seed=derive_seed(config.ransac.seed, frame_index, it, 1),
        )
        try:
            fit = ransac_pnp(corrs, crop.intrinsics, ransac_cfg)
            pose_crop = refine_lm(fit.pose, corrs.take(fit.inliers), crop.intrinsics)
        except (TooFewCorrespondences, NoConsensus, DegenerateConfiguration, NumericalFailure):
            break

        errors = reprojection_errors(corrs, pose_crop, crop.intrinsics)
        inlier_mask = errors <= threshold
        quality = float(corrs.weights[inlier_mask].sum() / corrs.weights.sum())
        inlier_errors = errors[inlier_mask]
        rms = float(np.sqrt(np.mean(inlier_errors**2))) if inlier_errors.size else float("inf")

        estimate = pose_from_crop(pose_crop, crop)
        records.append(IterationRecord(estimate, quality, int(inlier_mask.sum())))
        final_inliers = corrs.take(np.flatnonzero(inlier_mask))
        final_rms = rms
        final_crop = crop

    if not records:
        raise AllIterationsFailed("no refinement iteration reached consensus")
    return RefineOutcome(
        pose=records[-1].pose,
        quality=records[-1].quality,
        per_iteration=tuple(records),
        final_inliers=final_inliers,
        final_rms_px=final_rms,
        final_crop=final_crop,
    )


def select_best(outcomes: Sequence[RefineOutcome]) -> int:
    """Index of the outcome with the highest quality score.

    Ties go to the lower final reprojection RMS, then to the earliest entry,
    so the choice is deterministic for identical inputs.
    """
    if not outcomes:
        raise EmptyInput("select_best needs at least one outcome")
    best = 0
    for i, cand in enumerate(outcomes[1:], start=1):
        if cand.quality > outcomes[best].quality or (
            cand.quality == outcomes[best].quality
            and cand.final_rms_px < outcomes[best].final_rms_px
        ):
            best = i
    return best
