"""Frame-to-frame pose tracking with cheap propagation and full re-registration.

The tracker keeps the inlier correspondences of its last keyframe
registration. For each new frame it first tries the cheap path: carry those
correspondences forward through frame-to-frame flow and re-solve the pose
directly. Only when the surviving inlier fraction drops below ``tau_i`` does
it fall back to a full model-to-frame registration, mixing the propagated
correspondences with fresh ones so the solve stays anchored while the
template alignment recovers.

A frame where both paths fail marks the tracker lost; subsequent frames
attempt re-acquisition (a fresh registration seeded at the last good pose)
for a bounded number of frames before the loss becomes terminal.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .correspondence import Correspondences, FlowField, Template, build_correspondences, mix, propagate
from .errors import (
    AllIterationsFailed,
    DegenerateBox,
    DegenerateConfiguration,
    InitializationBehindCamera,
    InitializationFailed,
    NonPositiveDepth,
    NumericalFailure,
    TooFewCorrespondences,
)
from .geometry import CameraIntrinsics, CropCamera, Pose, make_crop_camera, pose_from_crop, pose_in_crop
from .onboarding import ObjectModel, splat_depth
from .pnp import refine_lm, reprojection_errors, solve_epnp
from .refine import FlowProvider, RefineConfig, model_box, refine_pose
from .seeding import derive_rng


class FrameFlowProvider(abc.ABC):
    """Source of frame-to-frame flow between two crops of consecutive frames.

    The returned field lives on the pixel grid of ``crop_prev`` and maps each
    of its pixels to the matching location in ``crop_next`` (both in crop
    pixel coordinates). Same purity requirement as
    :class:`flowpose.refine.FlowProvider`.
    """

    thread_safe: bool = True

    @abc.abstractmethod
    def estimate(
        self,
        frame_prev: int,
        frame_next: int,
        crop_prev: CropCamera,
        crop_next: CropCamera,
    ) -> FlowField:
        """Estimate flow from frame ``frame_prev`` into ``frame_next``."""


@dataclass(frozen=True)
class TrackerConfig:
    """Tracker settings.

    Attributes:
        tau_i: Keyframe inlier-fraction threshold that triggers full
            re-registration when undercut.
        mix_ratio: Fresh-per-propagated budget when mixing correspondence
            sets for re-registration.
        max_correspondences: Cap on the live correspondence set.
        refine: Settings for full registrations (initialization and
            re-registration). Tracking defaults to a single flow iteration
            per registration; raise ``refine.iterations`` for harder scenes.
        propagation_enabled: When False every frame runs a full registration
            (the cheap path is skipped entirely).
        reacquire_horizon: Number of consecutive lost frames during which
            re-acquisition is still attempted.
        seed: Base seed for subsampling decisions.
    """

    tau_i: float = 0.8
    mix_ratio: float = 2.0
    max_correspondences: int = 10000
    refine: RefineConfig = field(default_factory=lambda: RefineConfig(iterations=1))
    propagation_enabled: bool = True
    reacquire_horizon: int = 30
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau_i <= 1.0:
            raise ValueError("tau_i must lie in (0, 1]")
        if self.mix_ratio < 0:
            raise ValueError("mix_ratio must be non-negative")
        if self.reacquire_horizon < 0:
            raise ValueError("reacquire_horizon must be non-negative")


@dataclass(frozen=True)
class TrackerState:
    """Everything the tracker carries between frames.

    ``live_inliers`` hold pixels in the coordinates of ``crop``; both are
    replaced wholesale each frame (the state is immutable).
    ``keyframe_inlier_count`` is the live set size right after the most
    recent full registration and is the denominator of the trigger ratio.
    """

    pose: Pose
    keyframe_inlier_count: int
    live_inliers: Correspondences
    crop: CropCamera
    frame_index: int
    lost: bool
    last_quality: float


@dataclass(frozen=True)
class FrameDecision:
    """Per-frame tracking report."""

    frame_index: int
    used_registration: bool
    inlier_ratio: float
    pose: Pose
    quality: float
    dropped_in_propagation: int
    lost: bool = False


def _cap(corrs: Correspondences, limit: int, rng: np.random.Generator) -> Correspondences:
    if len(corrs) <= limit:
        return corrs
    idx = rng.choice(len(corrs), size=limit, replace=False)
    return corrs.take(np.sort(idx))


def init_tracker(
    initial: Pose,
    frame_index: int,
    model: ObjectModel,
    camera: CameraIntrinsics,
    flow_provider: FlowProvider,
    config: TrackerConfig = TrackerConfig(),
    box=None,
) -> TrackerState:
    """Start tracking with a full registration at ``frame_index``.

    Raises:
        InitializationFailed: Registration could not produce a pose.
    """
    try:
        outcome = refine_pose(
            initial, box, camera, model, flow_provider, config.refine,
            frame_index=frame_index,
        )
    except (InitializationBehindCamera, AllIterationsFailed) as exc:
        raise InitializationFailed(f"initial registration failed: {exc}") from exc
    rng = derive_rng(config.seed, frame_index, 100)
    live = _cap(outcome.final_inliers, config.max_correspondences, rng)
    return TrackerState(
        pose=outcome.pose,
        keyframe_inlier_count=len(live),
        live_inliers=live,
        crop=outcome.final_crop,
        frame_index=frame_index,
        lost=False,
        last_quality=outcome.quality,
    )


def _lost(state: TrackerState, frame_index: int, crop, ratio: float, dropped: int):
    new_state = TrackerState(
        pose=state.pose,
        keyframe_inlier_count=state.keyframe_inlier_count,
        live_inliers=Correspondences.empty(),
        crop=crop if crop is not None else state.crop,
        frame_index=frame_index,
        lost=True,
        last_quality=0.0,
    )
    decision = FrameDecision(
        frame_index=frame_index,
        used_registration=True,
        inlier_ratio=ratio,
        pose=state.pose,
        quality=0.0,
        dropped_in_propagation=dropped,
        lost=True,
    )
    return new_state, decision


def track_frame(
    state: TrackerState,
    frame_index: int,
    model: ObjectModel,
    camera: CameraIntrinsics,
    frame_flow: Optional[FrameFlowProvider],
    model_flow: FlowProvider,
    config: TrackerConfig = TrackerConfig(),
) -> tuple[TrackerState, FrameDecision]:
    """Advance the tracker by one frame.

    The cheap path re-solves the pose from propagated correspondences alone
    and accepts when the inlier count stays above ``tau_i`` times the
    keyframe count. Otherwise a full registration runs, seeded at the
    propagated-fit pose when one exists, and solves on the union of
    propagated and fresh correspondences. Never raises on tracking failure;
    a lost state/decision is returned instead.
    """
    rng = derive_rng(config.seed, frame_index, 200)
    threshold = config.refine.ransac.reproj_threshold_px
    min_inliers = config.refine.ransac.min_inliers

    try:
        b = model_box(state.pose, model, camera)
        crop = make_crop_camera(b, camera, config.refine.crop_size, config.refine.pad)
    except (NonPositiveDepth, DegenerateBox):
        return _lost(state, frame_index, None, 0.0, 0)

    propagated = Correspondences.empty()
    dropped = 0
    if config.propagation_enabled and frame_flow is not None and len(state.live_inliers) > 0:
        flow = frame_flow.estimate(state.frame_index, frame_index, state.crop, crop)
        propagated, dropped = propagate(state.live_inliers, flow)

    pose_prop = None
    prop_mask = None
    surviving = 0
    if len(propagated) >= 4:
        try:
            pose_prop = solve_epnp(propagated, crop.intrinsics)
            errors = reprojection_errors(propagated, pose_prop, crop.intrinsics)
            prop_mask = errors <= threshold
            surviving = int(prop_mask.sum())
        except (DegenerateConfiguration, NumericalFailure):
            pose_prop = None

    denom = max(state.keyframe_inlier_count, 1)
    ratio = surviving / denom

    if (
        config.propagation_enabled
        and pose_prop is not None
        and ratio >= config.tau_i
        and surviving >= max(4, min_inliers)
    ):
        # Cheap path: polish on the propagated inliers, no new flow.
        try:
            pose_crop = refine_lm(pose_prop, propagated.take(prop_mask), crop.intrinsics)
        except (NumericalFailure, NonPositiveDepth):
            pose_crop = None
        if pose_crop is not None:
            errors = reprojection_errors(propagated, pose_crop, crop.intrinsics)
            keep = errors <= threshold
            live = _cap(
                propagated.take(np.flatnonzero(keep)), config.max_correspondences, rng
            )
            quality = float(propagated.weights[keep].sum() / propagated.weights.sum())
            pose = pose_from_crop(pose_crop, crop)
            new_state = TrackerState(
                pose=pose,
                keyframe_inlier_count=state.keyframe_inlier_count,
                live_inliers=live,
                crop=crop,
                frame_index=frame_index,
                lost=False,
                last_quality=quality,
            )
            return new_state, FrameDecision(
                frame_index=frame_index,
                used_registration=False,
                inlier_ratio=ratio,
                pose=pose,
                quality=quality,
                dropped_in_propagation=dropped,
            )

    # Full registration, seeded as close to the truth as we can get.
    seed_pose = pose_from_crop(pose_prop, crop) if pose_prop is not None else state.pose
    crop_pose = pose_in_crop(seed_pose, crop)
    depth = splat_depth(model, crop_pose, crop.intrinsics, config.refine.splat_radius)
    if not np.any(depth > 0.0):
        return _lost(state, frame_index, crop, ratio, dropped)
    template = Template.from_depth(crop_pose, crop.intrinsics, depth)
    flow, visibility = model_flow.estimate(template, crop, frame_index)
    fresh = build_correspondences(
        flow, visibility, template, tau_v=config.refine.tau_v,
        max_count=config.max_correspondences, rng=derive_rng(config.seed, frame_index, 201),
    )
    merged = fresh if len(propagated) == 0 else mix(propagated, fresh, config.mix_ratio, rng)
    if len(merged) < max(4, min_inliers):
        return _lost(state, frame_index, crop, ratio, dropped)
    try:
        pose_reg = solve_epnp(merged, crop.intrinsics)
        errors = reprojection_errors(merged, pose_reg, crop.intrinsics)
        inlier_mask = errors <= threshold
        if int(inlier_mask.sum()) < max(4, min_inliers):
            return _lost(state, frame_index, crop, ratio, dropped)
        pose_crop = refine_lm(pose_reg, merged.take(inlier_mask), crop.intrinsics)
    except (DegenerateConfiguration, NumericalFailure, NonPositiveDepth, TooFewCorrespondences):
        return _lost(state, frame_index, crop, ratio, dropped)

    errors = reprojection_errors(merged, pose_crop, crop.intrinsics)
    keep = errors <= threshold
    if int(keep.sum()) < min_inliers:
        return _lost(state, frame_index, crop, ratio, dropped)
    live = _cap(merged.take(np.flatnonzero(keep)), config.max_correspondences, rng)
    quality = float(merged.weights[keep].sum() / merged.weights.sum())
    pose = pose_from_crop(pose_crop, crop)
    new_state = TrackerState(
        pose=pose,
        keyframe_inlier_count=len(live),
        live_inliers=live,
        crop=crop,
        frame_index=frame_index,
        lost=False,
        last_quality=quality,
    )
    return new_state, FrameDecision(
        frame_index=frame_index,
        used_registration=True,
        inlier_ratio=ratio,
        pose=pose,
        quality=quality,
        dropped_in_propagation=dropped,
    )


def track_sequence(
    frame_indices: Iterable[int],
    initial: Pose,
    model: ObjectModel,
    camera: CameraIntrinsics,
    model_flow: FlowProvider,
    frame_flow: Optional[FrameFlowProvider],
    config: TrackerConfig = TrackerConfig(),
    box=None,
) -> list[FrameDecision]:
    """Track through an ordered frame index sequence.

    The first index is registered from ``initial`` (raising
    InitializationFailed if that is impossible); later frames run
    :func:`track_frame`. After a loss the tracker tries a fresh registration
    at the last good pose for up to ``config.reacquire_horizon`` consecutive
    frames, then reports every remaining frame as lost.
    """
    frame_indices = list(frame_indices)
    if not frame_indices:
        return []

    state = init_tracker(
        initial, frame_indices[0], model, camera, model_flow, config, box=box
    )
    decisions = [
        FrameDecision(
            frame_index=frame_indices[0],
            used_registration=True,
            inlier_ratio=0.0,
            pose=state.pose,
            quality=state.last_quality,
            dropped_in_propagation=0,
        )
    ]
    lost_streak = 0

    for fid in frame_indices[1:]:
        if state.lost:
            lost_streak += 1
            if lost_streak <= config.reacquire_horizon:
                try:
                    state = init_tracker(state.pose, fid, model, camera, model_flow, config)
                    decisions.append(
                        FrameDecision(
                            frame_index=fid,
                            used_registration=True,
                            inlier_ratio=0.0,
                            pose=state.pose,
                            quality=state.last_quality,
                            dropped_in_propagation=0,
                        )
                    )
                    lost_streak = 0
                    continue
                except InitializationFailed:
                    pass
            state = replace(state, frame_index=fid)
            decisions.append(
                FrameDecision(
                    frame_index=fid,
                    used_registration=True,
                    inlier_ratio=0.0,
                    pose=state.pose,
                    quality=0.0,
                    dropped_in_propagation=0,
                    lost=True,
                )
            )
            continue

        state, decision = track_frame(
            state, fid, model, camera, frame_flow, model_flow, config
        )
        decisions.append(decision)
        if not decision.lost:
            lost_streak = 0
    return decisions
