"""Pose-error metrics and evaluation protocols.

ADD/ADD-S measure mean model-point deviation (ADD-S against the nearest
point, tolerating symmetry); MSSD/MSPD are the max-deviation variants
minimized over the model's discrete symmetry transforms. AUC aggregates a
sequence of errors over a 1..100 mm threshold sweep. The reset protocol
walks a tracked sequence, re-initializing with ground truth whenever the
5 cm / 5 degree bound is violated, and counts the resets.

All distances are mm, angles degrees, projections pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import EmptyInput, LengthMismatch
from .geometry import CameraIntrinsics, Pose, compose, geodesic_deg
from .onboarding import ObjectModel

TRANS_RESET_MM = 50.0
ROT_RESET_DEG = 5.0


@dataclass(frozen=True)
class PoseError:
    """Per-frame pose error bundle. Model-dependent fields are None when the
    protocol ran without a model. ``vsd_mm`` is reserved; computing it needs
    sensor depth maps this package does not model."""

    rot_deg: float
    trans_mm: float
    add_mm: Optional[float] = None
    adds_mm: Optional[float] = None
    mssd_mm: Optional[float] = None
    mspd_px: Optional[float] = None
    vsd_mm: Optional[float] = None


@dataclass(frozen=True)
class SequenceReport:
    """Aggregate of a tracked sequence under the reset protocol."""

    per_frame: tuple
    auc_add: Optional[float]
    auc_adds: Optional[float]
    cm_deg_rate: float
    resets: int


def pose_delta(est: Pose, gt: Pose) -> tuple[float, float]:
    """(geodesic rotation error deg, translation L2 error mm)."""
    return (
        geodesic_deg(est.rotation, gt.rotation),
        float(np.linalg.norm(est.translation - gt.translation)),
    )


def add_error(est: Pose, gt: Pose, model: ObjectModel) -> float:
    """Mean deviation of model points transformed by the two poses."""
    d = est.apply(model.points) - gt.apply(model.points)
    return float(np.mean(np.sqrt(np.sum(d * d, axis=1))))


def adds_error(est: Pose, gt: Pose, model: ObjectModel, chunk: int = 512) -> float:
    """Mean nearest-point deviation between the two transformed clouds.

    Chunked vectorized nearest-neighbor search; performs the same per-pair
    arithmetic as the O(n^2) double loop, so results agree bit-exactly with
    the brute-force definition.
    """
    a = est.apply(model.points)
    b = gt.apply(model.points)
    mins = np.empty(len(a))
    for lo in range(0, len(a), chunk):
        d = a[lo : lo + chunk, None, :] - b[None, :, :]
        mins[lo : lo + chunk] = np.min(np.sum(d * d, axis=2), axis=1)
    return float(np.mean(np.sqrt(mins)))


def _sym_poses(gt: Pose, model: ObjectModel):
    return [compose(gt, s) for s in model.symmetry_transforms]


def mssd_mspd(
    est: Pose, gt: Pose, model: ObjectModel, cam: CameraIntrinsics
) -> tuple[float, float]:
    """Max symmetry-aware surface distance (mm) and projection distance (px).

    Both minimize over the model's symmetry transforms composed onto the
    ground truth. A symmetry branch whose points fall behind the camera
    contributes +inf to MSPD (MSSD needs no camera and is always finite).
    """
    est_pts = est.apply(model.points)
    est_z_ok = bool(np.all(est_pts[:, 2] > 0))
    if est_z_ok:
        est_px = np.stack(
            [
                cam.fx * est_pts[:, 0] / est_pts[:, 2] + cam.cx,
                cam.fy * est_pts[:, 1] / est_pts[:, 2] + cam.cy,
            ],
            axis=1,
        )

    mssd = np.inf
    mspd = np.inf
    for sym_gt in _sym_poses(gt, model):
        gt_pts = sym_gt.apply(model.points)
        d = est_pts - gt_pts
        mssd = min(mssd, float(np.max(np.sqrt(np.sum(d * d, axis=1)))))
        if est_z_ok and np.all(gt_pts[:, 2] > 0):
            gt_px = np.stack(
                [
                    cam.fx * gt_pts[:, 0] / gt_pts[:, 2] + cam.cx,
                    cam.fy * gt_pts[:, 1] / gt_pts[:, 2] + cam.cy,
                ],
                axis=1,
            )
            dp = est_px - gt_px
            mspd = min(mspd, float(np.max(np.sqrt(np.sum(dp * dp, axis=1)))))
    return mssd, mspd


def auc(errors, max_threshold_mm: float = 100.0) -> float:
    """Mean recall over integer thresholds 1..max_threshold_mm, as percent.

    A single 50 mm error scores 51.0: it passes thresholds 50 through 100,
    51 of the 100.
    """
    errors = np.asarray(list(errors), dtype=float)
    if errors.size == 0:
        raise EmptyInput("auc needs at least one error value")
    thresholds = np.arange(1, int(max_threshold_mm) + 1, dtype=float)
    recall = np.mean(errors[None, :] <= thresholds[:, None], axis=1)
    return float(np.mean(recall) * 100.0)


def run_reset_protocol(
    est_poses: Iterable[Pose],
    gt_poses: Sequence[Pose],
    model: Optional[ObjectModel] = None,
    cam: Optional[CameraIntrinsics] = None,
    reinit_hook: Optional[Callable[[int, Pose], None]] = None,
    trans_threshold_mm: float = TRANS_RESET_MM,
    rot_threshold_deg: float = ROT_RESET_DEG,
) -> SequenceReport:
    """Walk a sequence, counting resets under the 5 cm / 5 degree rule.

    ``est_poses`` may be a lazy iterable so the protocol can drive a live
    tracker: after a violating frame the hook is called with
    ``(frame_index, gt_pose)`` of that frame, giving the producer the chance
    to re-initialize from ground truth before yielding the next estimate.
    The violating frame itself still counts as outside the 5cm-5deg bound.

    AUC fields are computed from ADD/ADD-S and need ``model``; MSPD also
    needs ``cam``. Both are None when the inputs are absent.

    Raises:
        LengthMismatch: est and gt sequences disagree in length.
        EmptyInput: zero frames.
    """
    per_frame = []
    resets = 0
    within = 0
    count = 0
    it = iter(est_poses)
    for index, gt in enumerate(gt_poses):
        try:
            est = next(it)
        except StopIteration:
            raise LengthMismatch("fewer estimates than ground-truth poses") from None
        rot, trans = pose_delta(est, gt)
        add = adds = mssd = mspd = None
        if model is not None:
            add = add_error(est, gt, model)
            adds = adds_error(est, gt, model)
            if cam is not None:
                mssd, mspd = mssd_mspd(est, gt, model, cam)
        per_frame.append(PoseError(rot, trans, add, adds, mssd, mspd))
        count += 1
        if trans > trans_threshold_mm or rot > rot_threshold_deg:
            resets += 1
            if reinit_hook is not None:
                reinit_hook(index, gt)
        else:
            within += 1
    if next(it, None) is not None:
        raise LengthMismatch("more estimates than ground-truth poses")
    if count == 0:
        raise EmptyInput("reset protocol needs at least one frame")

    auc_add = auc_adds = None
    if model is not None:
        auc_add = auc([p.add_mm for p in per_frame])
        auc_adds = auc([p.adds_mm for p in per_frame])
    return SequenceReport(
        per_frame=tuple(per_frame),
        auc_add=auc_add,
        auc_adds=auc_adds,
        cm_deg_rate=100.0 * within / count,
        resets=resets,
    )
