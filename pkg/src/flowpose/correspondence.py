"""Flow fields, visibility maps, templates, and 2D-3D correspondences.

A flow field maps template (or previous-crop) pixels to crop pixels of the
current frame. Combining a flow field with a depth template turns dense flow
into weighted 2D-3D correspondences: the template pixel is lifted through the
template depth into the model frame and paired with the pixel it flows to.

Binary cache formats (little-endian):

* ``FLW1``: magic ``b"FLW1"``, u32 width, u32 height, then width*height
  row-major records of (f32 du, f32 dv, u8 valid).
* ``VIS1``: magic ``b"VIS1"``, u32 width, u32 height, then width*height
  row-major f32 values. Also used as the generic scalar-grid container for
  persisted depth templates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .geometry import CameraIntrinsics, Pose, backproject

FLOW_MAGIC = b"FLW1"
GRID_MAGIC = b"VIS1"

_FLOW_RECORD = np.dtype([("du", "<f4"), ("dv", "<f4"), ("valid", "u1")])


@dataclass(frozen=True)
class FlowField:
    """Dense 2D displacement field with a per-pixel validity mask.

    Invalid pixels always carry a (0, 0) vector; the constructor enforces it.
    """

    vectors: np.ndarray  # (h, w, 2) float64
    valid: np.ndarray  # (h, w) bool

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=float)
        val = np.asarray(self.valid, dtype=bool)
        if vec.ndim != 3 or vec.shape[2] != 2 or val.shape != vec.shape[:2]:
            raise DimensionMismatch(
                f"flow vectors {vec.shape} and validity {val.shape} do not agree"
            )
        vec = np.where(val[..., None], vec, 0.0)
        vec.flags.writeable = False
        val = val.copy()
        val.flags.writeable = False
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "valid", val)

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class VisibilityMap:
    """Per-pixel visibility scores in [0, 1] over a template grid."""

    values: np.ndarray  # (h, w) float64

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise DimensionMismatch("visibility grid must be 2D")
        if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
            raise ValueError("visibility values must lie in [0, 1]")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Template:
    """Rendered depth view of the model under a known pose.

    ``depth`` holds camera-frame z in mm with 0 marking background; ``mask``
    is exactly ``depth > 0``.
    """

    pose: Pose
    camera: CameraIntrinsics
    depth: np.ndarray  # (h, w) float64
    mask: np.ndarray  # (h, w) bool

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=float)
        m = np.asarray(self.mask, dtype=bool)
        if d.shape != m.shape or d.ndim != 2:
            raise DimensionMismatch("depth and mask shapes do not agree")
        if d.shape != (self.camera.height, self.camera.width):
            raise DimensionMismatch("depth grid does not match camera size")
        if not np.array_equal(m, d > 0):
            raise ValueError("mask must equal depth > 0")
        d = d.copy()
        d.flags.writeable = False
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "mask", m)

    @staticmethod
    def from_depth(pose: Pose, camera: CameraIntrinsics, depth: np.ndarray) -> "Template":
        depth = np.asarray(depth, dtype=float)
        return Template(pose, camera, depth, depth > 0)


@dataclass(frozen=True)
class Correspondences:
    """A weighted set of 2D-3D links: crop pixel, model point, weight.

    Stored as parallel arrays (pixels (n, 2) px, points (n, 3) mm model
    frame, weights (n,) in (0, 1]).
    """

    pixels: np.ndarray
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        pt = np.asarray(self.points, dtype=float).reshape(-1, 3)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if not (len(px) == len(pt) == len(w)):
            raise DimensionMismatch("pixels, points and weights lengths differ")
        if len(w) and (np.any(w <= 0) or np.any(w > 1)):
            raise ValueError("weights must lie in (0, 1]")
        for a in (px, pt, w):
            a.flags.writeable = False
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "points", pt)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.weights)

    def take(self, index) -> "Correspondences":
        return Correspondences(self.pixels[index], self.points[index], self.weights[index])

    @staticmethod
    def empty() -> "Correspondences":
        return Correspondences(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0))

    @staticmethod
    def concatenate(parts) -> "Correspondences":
        parts = list(parts)
        if not parts:
            return Correspondences.empty()
        return Correspondences(
            np.concatenate([p.pixels for p in parts]),
            np.concatenate([p.points for p in parts]),
            np.concatenate([p.weights for p in parts]),
        )


def build_correspondences(
    flow: FlowField,
    visibility: VisibilityMap,
    template: Template,
    tau_v: float = 0.3,
    max_count: int = 10000,
    rng: np.random.Generator | None = None,
) -> Correspondences:
    """Turn dense flow plus visibility into weighted 2D-3D correspondences.

    Every template mask pixel with visibility >= ``tau_v`` contributes one
    correspondence: its flow target pixel, its depth-lifted model-frame
    point, and the raw visibility as weight. Targets outside the crop pixel
    range are dropped. If more than ``max_count`` survive, a uniform random
    subset is kept.

    Args:
        flow: template-to-crop flow over the template grid.
        visibility: per-pixel visibility over the template grid.
        template: depth template; its pose lifts pixels to the model frame.
        tau_v: visibility threshold in [0, 1).
        max_count: hard cap on the number of correspondences.
        rng: generator for the subsampling draw; a fixed default is used
            when omitted so the result stays deterministic.

    Returns:
        Correspondences in the crop pixel frame.
    """
    if not 0.0 <= tau_v < 1.0:
        raise ValueError("tau_v must lie in [0, 1)")
    if max_count < 1:
        raise ValueError("max_count must be positive")
    shape = template.depth.shape
    if flow.vectors.shape[:2] != shape or visibility.values.shape != shape:
        raise DimensionMismatch("flow, visibility and template grids differ in size")

    select = template.mask & (visibility.values >= tau_v) & (visibility.values > 0)
    rows, cols = np.nonzero(select)
    if rows.size == 0:
        return Correspondences.empty()

    src = np.stack([cols.astype(float), rows.astype(float)], axis=1)
    target = src + flow.vectors[rows, cols]
    h, w = shape
    inb = (
        (target[:, 0] >= 0.0)
        & (target[:, 0] <= w - 1.0)
        & (target[:, 1] >= 0.0)
        & (target[:, 1] <= h - 1.0)
    )
    rows, cols, src, target = rows[inb], cols[inb], src[inb], target[inb]
    if rows.size == 0:
        return Correspondences.empty()

    cam_pts = backproject(src, template.depth[rows, cols], template.camera)
    model_pts = (cam_pts - template.pose.translation) @ template.pose.rotation
    weights = visibility.values[rows, cols]

    if rows.size > max_count:
        if rng is None:
            rng = np.random.default_rng(0)
        keep = rng.choice(rows.size, size=max_count, replace=False)
        target, model_pts, weights = target[keep], model_pts[keep], weights[keep]

    return Correspondences(target, model_pts, weights)


def propagate(corrs: Correspondences, flow: FlowField) -> tuple[Correspondences, int]:
    """Carry correspondences into the next frame through frame-to-frame flow.

    The flow is sampled at each (sub-pixel) correspondence location by
    bilinear interpolation. A correspondence is dropped when any of its four
    interpolation neighbors is invalid or when it leaves the crop.

    Returns:
        (surviving correspondences with updated pixels, dropped count).
    """
    n = len(corrs)
    if n == 0:
        return corrs, 0
    h, w = flow.valid.shape
    x = corrs.pixels[:, 0]
    y = corrs.pixels[:, 1]

    inb = (x >= 0.0) & (x <= w - 1.0) & (y >= 0.0) & (y <= h - 1.0)
    # Clamp so a point exactly on the last row/column still has 4 neighbors.
    x0 = np.minimum(np.floor(x), w - 2).astype(int)
    y0 = np.minimum(np.floor(y), h - 2).astype(int)
    x0 = np.clip(x0, 0, w - 2)
    y0 = np.clip(y0, 0, h - 2)
    fx = x - x0
    fy = y - y0

    v00 = flow.valid[y0, x0]
    v10 = flow.valid[y0, x0 + 1]
    v01 = flow.valid[y0 + 1, x0]
    v11 = flow.valid[y0 + 1, x0 + 1]
    usable = inb & v00 & v10 & v01 & v11

    f00 = flow.vectors[y0, x0]
    f10 = flow.vectors[y0, x0 + 1]
    f01 = flow.vectors[y0 + 1, x0]
    f11 = flow.vectors[y0 + 1, x0 + 1]
    wx = fx[:, None]
    wy = fy[:, None]
    interp = (
        f00 * (1 - wx) * (1 - wy)
        + f10 * wx * (1 - wy)
        + f01 * (1 - wx) * wy
        + f11 * wx * wy
    )

    new_px = corrs.pixels + interp
    inside = (
        (new_px[:, 0] >= 0.0)
        & (new_px[:, 0] <= w - 1.0)
        & (new_px[:, 1] >= 0.0)
        & (new_px[:, 1] <= h - 1.0)
    )
    keep = usable & inside
    moved = Correspondences(new_px[keep], corrs.points[keep], corrs.weights[keep])
    return moved, int(n - keep.sum())


def mix(
    propagated: Correspondences,
    fresh: Correspondences,
    ratio: float,
    rng: np.random.Generator,
) -> Correspondences:
    """Combine propagated correspondences with a capped draw of fresh ones.

    All propagated correspondences are kept; at most
    ``floor(ratio * len(propagated))`` fresh ones are added, drawn uniformly
    without replacement.
    """
    if ratio < 0:
        raise ValueError("ratio must be non-negative")
    budget = int(ratio * len(propagated))
    n_fresh = min(len(fresh), budget)
    if n_fresh == 0:
        return propagated
    idx = rng.choice(len(fresh), size=n_fresh, replace=False)
    return Correspondences.concatenate([propagated, fresh.take(idx)])


def write_flow(path, flow: FlowField) -> None:
    """Write a flow field in the FLW1 format (f32 vectors, u8 validity)."""
    rec = np.empty(flow.height * flow.width, dtype=_FLOW_RECORD)
    rec["du"] = flow.vectors[..., 0].ravel()
    rec["dv"] = flow.vectors[..., 1].ravel()
    rec["valid"] = flow.valid.ravel()
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC)
        f.write(struct.pack("<II", flow.width, flow.height))
        f.write(rec.tobytes())


def read_flow(path) -> FlowField:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FLOW_MAGIC:
            raise ValueError(f"bad flow magic {magic!r}")
        w, h = struct.unpack("<II", f.read(8))
        rec = np.frombuffer(f.read(9 * w * h), dtype=_FLOW_RECORD)
    if rec.size != w * h:
        raise ValueError("truncated flow file")
    vec = np.stack(
        [rec["du"].astype(float).reshape(h, w), rec["dv"].astype(float).reshape(h, w)],
        axis=-1,
    )
    return FlowField(vec, rec["valid"].reshape(h, w) != 0)


def write_grid(path, values: np.ndarray) -> None:
    """Write a scalar grid (visibility, depth) in the VIS1 format."""
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise DimensionMismatch("grid must be 2D")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(values.astype("<f4").tobytes())


def read_grid(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != GRID_MAGIC:
            raise ValueError(f"bad grid magic {magic!r}")
        w, h = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4")
    if data.size != w * h:
        raise ValueError("truncated grid file")
    return data.astype(float).reshape(h, w)


def write_visibility(path, vis: VisibilityMap) -> None:
    write_grid(path, vis.values)


def read_visibility(path) -> VisibilityMap:
    return VisibilityMap(np.clip(read_grid(path), 0.0, 1.0))
