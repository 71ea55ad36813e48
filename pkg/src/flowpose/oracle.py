"""Synthetic scenes with analytically exact flow and visibility.

This module is the test harness for everything else: it builds procedural
point-cloud objects, moves them along slerp/lerp trajectories, renders
per-frame z-buffers, and answers flow queries exactly from the known
geometry. Providers wrapping these answers plug into the refine and tracking
interfaces, optionally degraded by Gaussian flow noise, planted outliers and
visibility flips, so robustness claims can be tested against known
corruption rates.

Conventions:
  - Flow fields and visibility answers are computed in float64; degradation
    draws come from a generator derived from (seed, frame ids) so repeated
    calls with the same arguments return identical fields.
  - Ground-truth visibility uses a 2 mm z-buffer tolerance; point-splat
    z-buffers are not watertight and a strict equality test would flicker.
  - Frame-to-frame flow stays geometrically defined for points that become
    occluded in the TARGET frame; only source-frame occlusion invalidates a
    pixel. The tracker's inlier test is what rejects stale correspondences,
    which mirrors how the real system degrades.
  - A point-splat z-buffer samples the surface sparsely, but a flow network
    sees the whole visible object. Frame-to-frame flow therefore treats any
    pixel within FILL_RADIUS_PX of a splat sample as on-surface, borrowing
    the nearest sample's depth for the lift. Without this, correspondence
    propagation would starve on splat gaps that exist only as a rendering
    artifact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .correspondence import FlowField, Template, VisibilityMap
from .errors import ConfigError, DimensionMismatch, EmptyInput
from .geometry import (
    CameraIntrinsics,
    CropCamera,
    Pose,
    backproject,
    interpolate_pose,
    make_crop_camera,
    pose_in_crop,
    project,
    rot_z,
    transfer_pixels,
)
from .onboarding import ObjectModel, splat_depth
from .refine import FlowProvider
from .seeding import derive_rng
from .tracking import FrameFlowProvider

ZBUFFER_TOL_MM = 2.0
BCE_CLAMP = 1e-7
FILL_RADIUS_PX = 2.0

DEFAULT_CAMERA = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)


@dataclass(frozen=True)
class NoiseSpec:
    """Degradation rates for oracle flow fields.

    ``flow_sigma_px`` is i.i.d. Gaussian noise added to every valid flow
    vector; ``outlier_fraction`` replaces that fraction of valid vectors
    with uniform-random in-crop targets (visibility untouched, so planted
    outlier rates translate directly into expected quality scores);
    ``vis_flip_rate`` flips the binary visibility per mask pixel.
    """

    flow_sigma_px: float = 0.0
    outlier_fraction: float = 0.0
    vis_flip_rate: float = 0.0

    def __post_init__(self):
        if self.flow_sigma_px < 0:
            raise ValueError("flow_sigma_px must be non-negative")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        if not 0.0 <= self.vis_flip_rate < 1.0:
            raise ValueError("vis_flip_rate must lie in [0, 1)")

    @property
    def active(self) -> bool:
        return self.flow_sigma_px > 0 or self.outlier_fraction > 0 or self.vis_flip_rate > 0


@dataclass(frozen=True)
class OccluderSpec:
    """A moving screen-space occluder in the frame crop.

    Active on frames ``start <= i < stop``; its position interpolates
    linearly across that window. ``x`` positions are fractions of the crop
    width (``y`` of the height). A half-plane covers every pixel with
    column <= x fraction; a disc covers a circle of ``radius_px``.
    """

    kind: str = "halfplane"
    start: int = 0
    stop: int = 0
    x_start: float = 0.5
    x_end: float = 0.5
    y_start: float = 0.5
    y_end: float = 0.5
    radius_px: float = 60.0

    def __post_init__(self):
        if self.kind not in ("halfplane", "disc"):
            raise ValueError(f"unknown occluder kind: {self.kind!r}")
        if self.stop < self.start:
            raise ValueError("occluder window must have stop >= start")

    def mask(self, frame_index: int, height: int, width: int) -> np.ndarray:
        """Boolean occlusion mask for one frame, False when inactive."""
        covered = np.zeros((height, width), dtype=bool)
        if not (self.start <= frame_index < self.stop):
            return covered
        span = max(self.stop - 1 - self.start, 1)
        t = (frame_index - self.start) / span
        fx = (1.0 - t) * self.x_start + t * self.x_end
        if self.kind == "halfplane":
            covered[:, : int(round(fx * width))] = True
        else:
            fy = (1.0 - t) * self.y_start + t * self.y_end
            cx = fx * (width - 1)
            cy = fy * (height - 1)
            yy, xx = np.mgrid[0:height, 0:width]
            covered = (xx - cx) ** 2 + (yy - cy) ** 2 <= self.radius_px**2
        return covered


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for a deterministic synthetic sequence.

    ``keyframes`` are model-to-source-camera poses; segment ``s`` is
    interpolated with ``frames_per_segment[s]`` steps (slerp rotation, lerp
    translation), so the total frame count is ``sum(frames_per_segment) + 1``
    and every keyframe appears as an exact frame pose. A scalar
    ``frames_per_segment`` applies to every segment.
    """

    model_kind: str = "cube"
    n_points: int = 800
    seed: int = 0
    keyframes: tuple = ()
    frames_per_segment: tuple = (20,)
    noise: Optional[NoiseSpec] = None
    occluder: Optional[OccluderSpec] = None
    camera: CameraIntrinsics = field(default_factory=lambda: DEFAULT_CAMERA)
    crop_size: int = 280
    pad: float = 1.2
    splat_radius: float = 1.5

    def __post_init__(self):
        if self.model_kind not in ("cube", "cylinder", "blob"):
            raise ValueError(f"unknown model kind: {self.model_kind!r}")
        if self.n_points < 8:
            raise ValueError("n_points must be at least 8")
        if not self.keyframes:
            raise ValueError("at least one keyframe is required")
        counts = self.frames_per_segment
        if isinstance(counts, int):
            counts = (counts,) * max(len(self.keyframes) - 1, 0)
        counts = tuple(int(c) for c in counts)
        if len(counts) != len(self.keyframes) - 1:
            raise ValueError("need one segment count per keyframe pair")
        if any(c < 1 for c in counts):
            raise ValueError("segment counts must be >= 1")
        object.__setattr__(self, "frames_per_segment", counts)
        object.__setattr__(self, "keyframes", tuple(self.keyframes))

    @property
    def n_frames(self) -> int:
        return sum(self.frames_per_segment) + 1


@dataclass(frozen=True)
class OracleFrame:
    """One simulated frame: ground truth plus its rendered depth view.

    ``crop`` is built from the ground-truth projected box; ``zbuffer`` is
    the model splat in that crop (0 = background); ``occluded`` marks pixels
    covered by the scripted occluder; ``point_visible`` is the per-model-
    point visibility under z-buffer, occluder and in-crop tests.
    """

    index: int
    gt_pose: Pose
    crop: CropCamera
    zbuffer: np.ndarray
    occluded: np.ndarray
    point_visible: np.ndarray

    def __post_init__(self):
        zb = np.asarray(self.zbuffer, dtype=float).copy()
        oc = np.asarray(self.occluded, dtype=bool).copy()
        pv = np.asarray(self.point_visible, dtype=bool).copy()
        if zb.shape != oc.shape:
            raise DimensionMismatch("z-buffer and occluder grids differ in shape")
        for a in (zb, oc, pv):
            a.flags.writeable = False
        object.__setattr__(self, "zbuffer", zb)
        object.__setattr__(self, "occluded", oc)
        object.__setattr__(self, "point_visible", pv)


def _cube_points(n: int, rng: np.random.Generator, half: float = 60.0) -> np.ndarray:
    corners = np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
        dtype=float,
    )
    m = n - len(corners)
    face = rng.integers(0, 6, size=m)
    uv = rng.uniform(-1.0, 1.0, size=(m, 2))
    pts = np.empty((m, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    for k in range(m):
        rest = [i for i in range(3) if i != axis[k]]
        pts[k, axis[k]] = sign[k]
        pts[k, rest] = uv[k]
    return np.vstack([corners, pts]) * half


def _cylinder_points(
    n: int, rng: np.random.Generator, radius: float = 45.0, half_height: float = 70.0
) -> np.ndarray:
    # Area-weighted choice between the lateral surface and the two caps.
    p_lateral = 2.0 * half_height / (2.0 * half_height + radius)
    lateral = rng.random(n) < p_lateral
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    pts = np.empty((n, 3))
    zl = rng.uniform(-half_height, half_height, size=n)
    rr = radius * np.sqrt(rng.random(n))
    cap = np.where(rng.random(n) < 0.5, half_height, -half_height)
    pts[:, 0] = np.where(lateral, radius, rr) * np.cos(theta)
    pts[:, 1] = np.where(lateral, radius, rr) * np.sin(theta)
    pts[:, 2] = np.where(lateral, zl, cap)
    return pts


def _blob_points(n: int, rng: np.random.Generator, base_radius: float = 55.0) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    coeff = rng.uniform(-1.0, 1.0, size=5)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    harmonics = np.stack([x * y, y * z, x * z, x * x - z * z, y * y - z * z], axis=1)
    bump = harmonics @ coeff / max(np.sum(np.abs(coeff)), 1e-9)
    return d * (base_radius * (1.0 + 0.35 * bump))[:, None]


def make_model(kind: str, n_points: int, seed: int) -> ObjectModel:
    """Procedural surface point cloud; deterministic per (kind, n, seed).

    The cylinder carries a 12-step discrete approximation of its continuous
    axial symmetry so the symmetry-aware metrics have something to minimize
    over; cube and blob keep the identity only.
    """
    rng = derive_rng(seed, 17)
    if kind == "cube":
        return ObjectModel(_cube_points(n_points, rng))
    if kind == "cylinder":
        syms = tuple(
            Pose(rot_z(360.0 * k / 12.0), np.zeros(3)) for k in range(1, 12)
        )
        return ObjectModel(_cylinder_points(n_points, rng), syms)
    if kind == "blob":
        return ObjectModel(_blob_points(n_points, rng))
    raise ValueError(f"unknown model kind: {kind!r}")


def _frame_poses(spec: SceneSpec) -> list:
    poses = [spec.keyframes[0]]
    for a, b, count in zip(spec.keyframes, spec.keyframes[1:], spec.frames_per_segment):
        for k in range(1, count + 1):
            poses.append(interpolate_pose(a, b, k / count))
    return poses


def _point_visibility(
    model: ObjectModel, pose_crop: Pose, crop: CropCamera, zbuffer, occluded
) -> np.ndarray:
    xc = pose_crop.apply(model.points)
    z = xc[:, 2]
    visible = z > 0.0
    size_h, size_w = zbuffer.shape
    intr = crop.intrinsics
    u = np.where(visible, intr.fx * xc[:, 0] / np.where(visible, z, 1.0) + intr.cx, -1.0)
    v = np.where(visible, intr.fy * xc[:, 1] / np.where(visible, z, 1.0) + intr.cy, -1.0)
    col = np.rint(u).astype(int)
    row = np.rint(v).astype(int)
    inb = (col >= 0) & (col < size_w) & (row >= 0) & (row < size_h)
    visible &= inb
    col = np.clip(col, 0, size_w - 1)
    row = np.clip(row, 0, size_h - 1)
    zb = zbuffer[row, col]
    visible &= (zb > 0.0) & (np.abs(z - zb) <= ZBUFFER_TOL_MM) & ~occluded[row, col]
    return visible


def generate_sequence(spec: SceneSpec) -> tuple[ObjectModel, list]:
    """Build the object and every frame of the scripted trajectory.

    Per-frame work is pure given the spec, so frames could be produced in
    parallel; the loop here is sequential because splatting dominates and
    the callers that care about wall-time parallelize one level up.
    """
    model = make_model(spec.model_kind, spec.n_points, spec.seed)
    frames = []
    for index, gt in enumerate(_frame_poses(spec)):
        box = project(model.points, gt, spec.camera)
        crop = make_crop_camera(
            (
                float(box[:, 0].min()),
                float(box[:, 1].min()),
                float(box[:, 0].max()),
                float(box[:, 1].max()),
            ),
            spec.camera,
            spec.crop_size,
            spec.pad,
        )
        pose_crop = pose_in_crop(gt, crop)
        zbuffer = splat_depth(model, pose_crop, crop.intrinsics, spec.splat_radius)
        if spec.occluder is not None:
            occluded = spec.occluder.mask(index, spec.crop_size, spec.crop_size)
        else:
            occluded = np.zeros((spec.crop_size, spec.crop_size), dtype=bool)
        visible = _point_visibility(model, pose_crop, crop, zbuffer, occluded)
        frames.append(OracleFrame(index, gt, crop, zbuffer, occluded, visible))
    return model, frames


def _apply_flow_noise(
    vectors: np.ndarray,
    valid: np.ndarray,
    noise: NoiseSpec,
    rng: np.random.Generator,
    crop_size_xy: tuple,
    pixels: np.ndarray,
) -> None:
    """Degrade flow vectors in place: Gaussian first, then outliers."""
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return
    if noise.flow_sigma_px > 0:
        vectors[idx] += rng.normal(0.0, noise.flow_sigma_px, size=(idx.size, 2))
    n_out = int(noise.outlier_fraction * idx.size)
    if n_out > 0:
        chosen = rng.choice(idx.size, size=n_out, replace=False)
        w, h = crop_size_xy
        targets = np.stack(
            [rng.uniform(0.0, w - 1.0, size=n_out), rng.uniform(0.0, h - 1.0, size=n_out)],
            axis=1,
        )
        vectors[idx[chosen]] = targets - pixels[idx[chosen]]


def oracle_m2f_flow(
    template: Template,
    frame: OracleFrame,
    noise: Optional[NoiseSpec] = None,
    rng: Optional[np.random.Generator] = None,
    crop: Optional[CropCamera] = None,
) -> tuple[FlowField, VisibilityMap]:
    """Exact template-to-frame flow with ground-truth visibility.

    Each template mask pixel is lifted through the template's own depth to
    its model point and projected under the frame's ground-truth pose into
    ``crop`` (the caller's query crop; defaults to the frame's own). The
    visibility bit additionally checks the frame's z-buffer (2 mm
    tolerance), the scripted occluder and the in-crop condition.

    Args:
        template: Rendered at some pose estimate in the query crop camera.
        frame: Ground-truth frame to match against.
        noise: Optional degradation; requires ``rng`` when active.
        rng: Generator for the degradation draws.
        crop: Query crop camera; must match the template grid size.

    Returns:
        ``(flow, visibility)`` on the template grid.
    """
    query = frame.crop if crop is None else crop
    if (query.intrinsics.height, query.intrinsics.width) != template.depth.shape:
        raise DimensionMismatch("query crop size does not match the template grid")
    if noise is not None and noise.active and rng is None:
        raise ValueError("degraded flow needs an explicit generator")

    h, w = template.depth.shape
    rows, cols = np.nonzero(template.mask)
    pix = np.stack([cols, rows], axis=1).astype(float)
    cam_points = backproject(pix, template.depth[rows, cols], template.camera)
    model_points = (cam_points - template.pose.translation) @ template.pose.rotation

    in_source = frame.gt_pose.apply(model_points)
    in_query = in_source @ query.rotation_to_source
    zq = in_query[:, 2]
    ok = zq > 0.0
    qi = query.intrinsics
    target = np.full_like(pix, np.nan)
    target[ok, 0] = qi.fx * in_query[ok, 0] / zq[ok] + qi.cx
    target[ok, 1] = qi.fy * in_query[ok, 1] / zq[ok] + qi.cy

    vectors = np.zeros((len(pix), 2))
    vectors[ok] = target[ok] - pix[ok]

    # Ground-truth visibility against the frame's own render.
    in_frame = in_source @ frame.crop.rotation_to_source
    zf = in_frame[:, 2]
    vis = ok & (zf > 0.0)
    fi = frame.crop.intrinsics
    safe_z = np.where(zf > 0.0, zf, 1.0)
    uf = fi.fx * in_frame[:, 0] / safe_z + fi.cx
    vf = fi.fy * in_frame[:, 1] / safe_z + fi.cy
    fcol = np.rint(uf).astype(int)
    frow = np.rint(vf).astype(int)
    fh, fw = frame.zbuffer.shape
    inb = (fcol >= 0) & (fcol < fw) & (frow >= 0) & (frow < fh)
    vis &= inb
    fcol = np.clip(fcol, 0, fw - 1)
    frow = np.clip(frow, 0, fh - 1)
    zb = frame.zbuffer[frow, fcol]
    vis &= (zb > 0.0) & (np.abs(zf - zb) <= ZBUFFER_TOL_MM)
    vis &= ~frame.occluded[frow, fcol]
    with np.errstate(invalid="ignore"):
        vis &= (
            (target[:, 0] >= 0.0)
            & (target[:, 0] <= w - 1.0)
            & (target[:, 1] >= 0.0)
            & (target[:, 1] <= h - 1.0)
        )
    vis_val = vis.astype(float)

    if noise is not None and noise.active:
        _apply_flow_noise(vectors, ok, noise, rng, (w, h), pix)
        if noise.vis_flip_rate > 0:
            flip = rng.random(len(pix)) < noise.vis_flip_rate
            vis_val[flip] = 1.0 - vis_val[flip]

    flow_grid = np.zeros((h, w, 2))
    valid_grid = np.zeros((h, w), dtype=bool)
    vis_grid = np.zeros((h, w))
    flow_grid[rows, cols] = np.where(ok[:, None], vectors, 0.0)
    valid_grid[rows, cols] = ok
    vis_grid[rows, cols] = vis_val
    return FlowField(flow_grid, valid_grid), VisibilityMap(vis_grid)


def _fill_depth(zbuffer: np.ndarray, radius: float = FILL_RADIUS_PX) -> np.ndarray:
    """Spread each splat sample's depth to pixels within ``radius`` of it.

    Every background pixel takes the depth of its nearest sample inside the
    radius (ties resolved by a fixed offset order), remaining 0 when none is
    near. This turns the dotted splat buffer into the quasi-continuous
    surface a real flow network would see.
    """
    h, w = zbuffer.shape
    reach = int(math.ceil(radius))
    padded = np.zeros((h + 2 * reach, w + 2 * reach))
    padded[reach : reach + h, reach : reach + w] = zbuffer
    best = np.full((h, w), np.inf)
    out = np.zeros((h, w))
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            d2 = dx * dx + dy * dy
            if d2 > radius * radius:
                continue
            window = padded[reach + dy : reach + dy + h, reach + dx : reach + dx + w]
            take = (window > 0.0) & (d2 < best)
            best[take] = d2
            out[take] = window[take]
    return out


def oracle_f2f_flow(
    frame_i: OracleFrame,
    frame_j: OracleFrame,
    crop_i: Optional[CropCamera] = None,
    crop_j: Optional[CropCamera] = None,
    noise: Optional[NoiseSpec] = None,
    rng: Optional[np.random.Generator] = None,
) -> FlowField:
    """Exact flow from a crop of frame i to a crop of frame j.

    Defined at crop-i pixels whose mapped frame-i render position lies on
    (or within the fill radius of) an unoccluded surface sample; the lift
    uses the continuous mapped position with that sample's depth. Occlusion
    in frame j does NOT invalidate flow (see module docstring).
    """
    ci = frame_i.crop if crop_i is None else crop_i
    cj = frame_j.crop if crop_j is None else crop_j
    if noise is not None and noise.active and rng is None:
        raise ValueError("degraded flow needs an explicit generator")

    h = ci.intrinsics.height
    w = ci.intrinsics.width
    rr, cc = np.mgrid[0:h, 0:w]
    pix = np.stack([cc.ravel(), rr.ravel()], axis=1).astype(float)

    same_crop = ci.intrinsics == frame_i.crop.intrinsics and np.array_equal(
        ci.rotation_to_source, frame_i.crop.rotation_to_source
    )
    mapped = pix if same_crop else transfer_pixels(pix, ci, frame_i.crop)

    surface = _fill_depth(frame_i.zbuffer)
    fh, fw = surface.shape
    col = np.rint(mapped[:, 0]).astype(int)
    row = np.rint(mapped[:, 1]).astype(int)
    inb = (col >= 0) & (col < fw) & (row >= 0) & (row < fh)
    col = np.clip(col, 0, fw - 1)
    row = np.clip(row, 0, fh - 1)
    depth = surface[row, col]
    valid = inb & (depth > 0.0) & ~frame_i.occluded[row, col]

    vectors = np.zeros((len(pix), 2))
    if np.any(valid):
        lifted = backproject(
            mapped[valid], depth[valid], frame_i.crop.intrinsics
        ) @ frame_i.crop.rotation_to_source.T
        model_points = (lifted - frame_i.gt_pose.translation) @ frame_i.gt_pose.rotation
        in_j = frame_j.gt_pose.apply(model_points) @ cj.rotation_to_source
        zj = in_j[:, 2]
        ok = zj > 0.0
        ji = cj.intrinsics
        target = np.full((int(valid.sum()), 2), np.nan)
        target[ok, 0] = ji.fx * in_j[ok, 0] / zj[ok] + ji.cx
        target[ok, 1] = ji.fy * in_j[ok, 1] / zj[ok] + ji.cy
        sub = np.zeros_like(target)
        sub[ok] = target[ok] - pix[valid][ok]
        vectors[valid] = sub
        full_ok = np.zeros(len(pix), dtype=bool)
        full_ok[np.flatnonzero(valid)[ok]] = True
        valid = full_ok

    if noise is not None and noise.active:
        _apply_flow_noise(
            vectors, valid, noise, rng,
            (cj.intrinsics.width, cj.intrinsics.height), pix,
        )

    return FlowField(vectors.reshape(h, w, 2), valid.reshape(h, w))


def refiner_loss(
    pred_flow: FlowField,
    pred_vis: VisibilityMap,
    gt_flow: FlowField,
    gt_vis: VisibilityMap,
    mask: np.ndarray,
) -> float:
    """Binary cross-entropy on visibility plus visibility-gated L1 on flow.

    Mean over mask pixels of ``BCE(pred_vis, gt_vis) + gt_vis * |df|_1``.
    Predicted visibilities are clamped to [1e-7, 1 - 1e-7] before the log,
    so the loss has a small positive floor even for perfect predictions.
    """
    mask = np.asarray(mask, dtype=bool)
    shapes = {
        pred_flow.vectors.shape[:2],
        gt_flow.vectors.shape[:2],
        pred_vis.values.shape,
        gt_vis.values.shape,
        mask.shape,
    }
    if len(shapes) != 1:
        raise DimensionMismatch("loss inputs disagree in grid shape")
    if not np.any(mask):
        raise EmptyInput("loss mask selects no pixels")

    p = np.clip(pred_vis.values[mask], BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = gt_vis.values[mask]
    bce = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    df = pred_flow.vectors[mask] - gt_flow.vectors[mask]
    l1 = np.abs(df).sum(axis=1)
    return float(np.mean(bce + y * l1))


class OracleFlowProvider(FlowProvider):
    """Model-to-frame provider answered from stored oracle frames.

    Each (frame, template) query derives its own generator from the base
    seed and the frame index, so estimates are pure: the same query always
    returns the same degraded field, independent of call order or thread.
    """

    def __init__(
        self,
        frames: Sequence[OracleFrame],
        noise: Optional[NoiseSpec] = None,
        seed: int = 0,
    ):
        self.frames = list(frames)
        self.noise = noise
        self.seed = seed

    def estimate(self, template, crop, frame_index):
        frame = self.frames[frame_index]
        rng = None
        if self.noise is not None and self.noise.active:
            rng = derive_rng(self.seed, 11, frame_index)
        return oracle_m2f_flow(template, frame, noise=self.noise, rng=rng, crop=crop)


class OracleFrameFlowProvider(FrameFlowProvider):
    """Frame-to-frame provider answered from stored oracle frames."""

    def __init__(
        self,
        frames: Sequence[OracleFrame],
        noise: Optional[NoiseSpec] = None,
        seed: int = 0,
    ):
        self.frames = list(frames)
        self.noise = noise
        self.seed = seed

    def estimate(self, frame_prev, frame_next, crop_prev, crop_next):
        rng = None
        if self.noise is not None and self.noise.active:
            rng = derive_rng(self.seed, 13, frame_prev, frame_next)
        return oracle_f2f_flow(
            self.frames[frame_prev],
            self.frames[frame_next],
            crop_i=crop_prev,
            crop_j=crop_next,
            noise=self.noise,
            rng=rng,
        )


def write_scene_spec(path, spec: SceneSpec) -> None:
    """Serialize a scene spec as flat key=value text (see read_scene_spec)."""
    lines = [
        f"model = {spec.model_kind}",
        f"points = {spec.n_points}",
        f"seed = {spec.seed}",
        "camera = " + " ".join(
            f"{v:.17g}" for v in (
                spec.camera.fx, spec.camera.fy, spec.camera.cx, spec.camera.cy,
            )
        ) + f" {spec.camera.width} {spec.camera.height}",
        f"crop_size = {spec.crop_size}",
        f"pad = {spec.pad:.17g}",
        f"splat_radius = {spec.splat_radius:.17g}",
        "frames_per_segment = " + " ".join(str(c) for c in spec.frames_per_segment),
    ]
    for kf in spec.keyframes:
        vals = np.concatenate([kf.rotation.ravel(), kf.translation])
        lines.append("keyframe = " + " ".join(f"{v:.17g}" for v in vals))
    if spec.noise is not None:
        lines.append(f"flow_sigma_px = {spec.noise.flow_sigma_px:.17g}")
        lines.append(f"outlier_fraction = {spec.noise.outlier_fraction:.17g}")
        lines.append(f"vis_flip_rate = {spec.noise.vis_flip_rate:.17g}")
    if spec.occluder is not None:
        o = spec.occluder
        lines.append(
            "occluder = "
            + f"{o.kind} {o.start} {o.stop} "
            + " ".join(f"{v:.17g}" for v in (o.x_start, o.x_end, o.y_start, o.y_end, o.radius_px))
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_scene_spec(path) -> SceneSpec:
    """Parse a key=value scene spec file; unknown keys are rejected."""
    known = {
        "model", "points", "seed", "camera", "crop_size", "pad", "splat_radius",
        "frames_per_segment", "keyframe", "flow_sigma_px", "outlier_fraction",
        "vis_flip_rate", "occluder",
    }
    values: dict = {"keyframe": []}
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key = value")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in known:
                raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
            if key == "keyframe":
                values["keyframe"].append(val)
            else:
                values[key] = val

    def floats(s):
        return [float(v) for v in s.split()]

    keyframes = []
    for kf in values["keyframe"]:
        v = floats(kf)
        if len(v) != 12:
            raise ConfigError("keyframe lines need 12 floats (row-major R, then t)")
        keyframes.append(Pose(np.array(v[:9]).reshape(3, 3), np.array(v[9:])))

    camera = DEFAULT_CAMERA
    if "camera" in values:
        v = floats(values["camera"])
        if len(v) != 6:
            raise ConfigError("camera needs fx fy cx cy width height")
        camera = CameraIntrinsics(v[0], v[1], v[2], v[3], int(v[4]), int(v[5]))

    noise = None
    noise_keys = ("flow_sigma_px", "outlier_fraction", "vis_flip_rate")
    if any(k in values for k in noise_keys):
        noise = NoiseSpec(*(float(values.get(k, 0.0)) for k in noise_keys))

    occluder = None
    if "occluder" in values:
        parts = values["occluder"].split()
        if len(parts) != 8:
            raise ConfigError("occluder needs: kind start stop x0 x1 y0 y1 radius")
        occluder = OccluderSpec(
            kind=parts[0],
            start=int(parts[1]),
            stop=int(parts[2]),
            x_start=float(parts[3]),
            x_end=float(parts[4]),
            y_start=float(parts[5]),
            y_end=float(parts[6]),
            radius_px=float(parts[7]),
        )

    try:
        return SceneSpec(
            model_kind=values.get("model", "cube"),
            n_points=int(values.get("points", 800)),
            seed=int(values.get("seed", 0)),
            keyframes=tuple(keyframes),
            frames_per_segment=tuple(
                int(c) for c in values.get("frames_per_segment", "20").split()
            ),
            noise=noise,
            occluder=occluder,
            camera=camera,
            crop_size=int(values.get("crop_size", 280)),
            pad=float(values.get("pad", 1.2)),
            splat_radius=float(values.get("splat_radius", 1.5)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
