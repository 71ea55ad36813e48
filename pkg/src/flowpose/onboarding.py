"""Object models, orientation sampling, and depth-template rendering.

Onboarding turns a raw point model into a reusable template set: orientations
are sampled evenly over SO(3) with a super-Fibonacci spiral, and for each
orientation a depth template is rendered by splatting the model points into a
small virtual camera at a fixed distance. A retrieval oracle maps a query
orientation to the nearest template.

Object model text format::

    OBJPTS <count> <diameter_mm>
    x y z            (count lines, model-frame mm)
    SYM r11 r12 r13 r21 r22 r23 r31 r32 r33 tx ty tz   (optional, repeated)

Symmetry lines list discrete symmetry transforms; the identity is implied
and always present in the parsed model.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.distance import pdist

from .correspondence import Template, read_grid, write_grid
from .errors import EmptyInput, EmptyRender
from .geometry import CameraIntrinsics, Pose, geodesic_deg, quat_to_matrix

SUPER_FIB_PHI = math.sqrt(2.0)
SUPER_FIB_PSI = 1.533751168755204288118041

DEFAULT_TEMPLATE_COUNT = 800
DEFAULT_CROP_SIZE = 280
DEFAULT_SPLAT_RADIUS = 1.5
DEFAULT_DISTANCE_FACTOR = 2.5


def model_diameter(points: np.ndarray) -> float:
    """Largest pairwise distance. Uses the convex hull for big clouds."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return 0.0
    if len(pts) > 1000:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except Exception:
            pass  # degenerate hull (planar etc.), fall through to brute force
    return float(pdist(pts).max())


@dataclass(frozen=True)
class ObjectModel:
    """Point model with optional discrete symmetries.

    ``symmetry_transforms`` always contains the identity first; additional
    entries map the model onto itself.
    """

    points: np.ndarray
    symmetry_transforms: tuple = ()
    diameter: float = 0.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(pts) < 4:
            raise EmptyInput("object model needs at least 4 points")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        syms = list(self.symmetry_transforms)
        if not syms or not _is_identity(syms[0]):
            syms = [Pose.identity()] + [s for s in syms if not _is_identity(s)]
        object.__setattr__(self, "symmetry_transforms", tuple(syms))
        if self.diameter <= 0:
            object.__setattr__(self, "diameter", model_diameter(pts))


def _is_identity(p: Pose) -> bool:
    return np.allclose(p.rotation, np.eye(3), atol=1e-12) and np.allclose(
        p.translation, 0.0, atol=1e-12
    )


@dataclass(frozen=True)
class TemplateSet:
    """Pre-rendered depth templates covering SO(3)."""

    templates: tuple
    angular_spacing_deg: float

    def __len__(self) -> int:
        return len(self.templates)


@dataclass(frozen=True)
class QueryDescriptor:
    """What the coarse retrieval oracle is allowed to see.

    ``orientation`` is the ground-truth model-to-camera rotation;
    ``apparent_diameter_px`` optionally carries the detected object size so
    the returned translation can be rescaled to a matching depth.
    """

    orientation: np.ndarray
    apparent_diameter_px: float | None = None


def sample_so3(n: int) -> np.ndarray:
    """n rotations spread evenly over SO(3), as an (n, 3, 3) array.

    Uses the super-Fibonacci quaternion spiral, then right-aligns the whole
    set by the inverse of its first element so ``sample_so3(n)[0]`` is the
    identity. The alignment is an isometry of the bi-invariant metric, so
    covering statistics are unchanged.
    """
    if n < 1:
        raise EmptyInput("need at least one sample")
    i = np.arange(n)
    s = i + 0.5
    t = s / n
    d = 2.0 * np.pi * s
    r = np.sqrt(t)
    big_r = np.sqrt(1.0 - t)
    alpha = d / SUPER_FIB_PHI
    beta = d / SUPER_FIB_PSI
    quats = np.stack(
        [r * np.sin(alpha), r * np.cos(alpha), big_r * np.sin(beta), big_r * np.cos(beta)],
        axis=1,
    )
    mats = np.stack([quat_to_matrix(q) for q in quats])
    return mats @ mats[0].T.copy()


def splat_depth(
    model: ObjectModel,
    pose: Pose,
    cam: CameraIntrinsics,
    splat_radius: float = DEFAULT_SPLAT_RADIUS,
) -> np.ndarray:
    """Z-buffer point splat of the model under a pose; 0 marks background.

    Every model point with positive depth paints the pixels whose centers
    lie within ``splat_radius`` of its projection; the smallest depth wins.
    """
    xc = pose.apply(model.points)
    z = xc[:, 2]
    front = z > 0
    if not np.any(front):
        return np.zeros((cam.height, cam.width))
    xc = xc[front]
    z = z[front]
    u = cam.fx * xc[:, 0] / z + cam.cx
    v = cam.fy * xc[:, 1] / z + cam.cy

    depth = np.full((cam.height, cam.width), np.inf)
    reach = int(math.floor(splat_radius)) + 1
    offsets = range(-reach, reach + 1)
    base_col = np.round(u).astype(int)
    base_row = np.round(v).astype(int)
    r2 = splat_radius * splat_radius
    for dy in offsets:
        for dx in offsets:
            col = base_col + dx
            row = base_row + dy
            ok = (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
            if not np.any(ok):
                continue
            dist2 = (col - u) ** 2 + (row - v) ** 2
            ok &= dist2 <= r2
            if not np.any(ok):
                continue
            np.minimum.at(depth, (row[ok], col[ok]), z[ok])
    depth[~np.isfinite(depth)] = 0.0
    return depth


def render_depth_template(
    model: ObjectModel,
    orientation: np.ndarray,
    cam: CameraIntrinsics,
    distance: float,
    splat_radius: float = DEFAULT_SPLAT_RADIUS,
) -> Template:
    """Render the model at a canonical centered pose (0, 0, distance).

    Raises EmptyRender when no point lands in the image.
    """
    if distance <= model.diameter:
        raise ValueError("template distance must exceed the model diameter")
    pose = Pose(orientation, np.array([0.0, 0.0, float(distance)]))
    depth = splat_depth(model, pose, cam, splat_radius)
    if not np.any(depth > 0):
        raise EmptyRender("no model point projects into the template")
    return Template.from_depth(pose, cam, depth)


def build_template_set(
    model: ObjectModel,
    count: int = DEFAULT_TEMPLATE_COUNT,
    crop_size: int = DEFAULT_CROP_SIZE,
    distance_factor: float = DEFAULT_DISTANCE_FACTOR,
    splat_radius: float = DEFAULT_SPLAT_RADIUS,
    threads: int = 1,
) -> TemplateSet:
    """Render ``count`` depth templates over evenly sampled orientations.

    The virtual camera is square with focal length chosen so the object at
    ``distance_factor * diameter`` fills the crop with a small margin.
    """
    rotations = sample_so3(count)
    distance = distance_factor * model.diameter
    # Object half-angle from its bounding sphere, padded like a crop box.
    half_tan = (model.diameter / 2.0) / math.sqrt(
        max(distance**2 - (model.diameter / 2.0) ** 2, 1e-9)
    )
    f = (crop_size / 2.0) / (1.2 * half_tan)
    cam = CameraIntrinsics(f, f, crop_size / 2.0, crop_size / 2.0, crop_size, crop_size)

    def render_one(rot):
        return render_depth_template(model, rot, cam, distance, splat_radius)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            templates = tuple(pool.map(render_one, rotations))
    else:
        templates = tuple(render_one(r) for r in rotations)
    spacing = _mean_nn_spacing_deg(rotations) if count > 1 else 360.0
    return TemplateSet(templates, spacing)


def _mean_nn_spacing_deg(rotations: np.ndarray) -> float:
    quats = np.stack([_matrix_to_quat(r) for r in rotations])
    dots = np.abs(quats @ quats.T)
    np.fill_diagonal(dots, -1.0)
    nn = np.clip(dots.max(axis=1), -1.0, 1.0)
    return float(np.degrees(2.0 * np.arccos(nn)).mean())


def _matrix_to_quat(m: np.ndarray) -> np.ndarray:
    # Shepperd's method; returns (x, y, z, w) with unit norm.
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    else:
        k = int(np.argmax(np.diag(m)))
        if k == 0:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            x, w = 0.25 * s, (m[2, 1] - m[1, 2]) / s
            y, z = (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s
        elif k == 1:
            s = math.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2]) * 2.0
            y, w = 0.25 * s, (m[0, 2] - m[2, 0]) / s
            x, z = (m[0, 1] + m[1, 0]) / s, (m[1, 2] + m[2, 1]) / s
        else:
            s = math.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2]) * 2.0
            z, w = 0.25 * s, (m[1, 0] - m[0, 1]) / s
            x, y = (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s
    q = np.array([x, y, z, w])
    return q / np.linalg.norm(q)


def retrieve_coarse(query: QueryDescriptor, tset: TemplateSet) -> tuple[int, Pose]:
    """Oracle retrieval: geodesically nearest template to the query rotation.

    When the query carries an apparent size, the template translation is
    rescaled so the retrieved pose would show the object at that size.
    """
    if len(tset) == 0:
        raise EmptyInput("template set is empty")
    best_i = 0
    best_d = float("inf")
    for i, tpl in enumerate(tset.templates):
        d = geodesic_deg(query.orientation, tpl.pose.rotation)
        if d < best_d:
            best_i, best_d = i, d
    tpl = tset.templates[best_i]
    pose = tpl.pose
    if query.apparent_diameter_px is not None:
        rows, cols = np.nonzero(tpl.mask)
        h = rows.max() - rows.min()
        w = cols.max() - cols.min()
        tpl_diag = math.hypot(float(h), float(w))
        scale = tpl_diag / float(query.apparent_diameter_px)
        pose = Pose(pose.rotation, pose.translation * scale)
    return best_i, pose


def save_template_set(directory, tset: TemplateSet) -> None:
    """Persist templates as VIS1 depth grids plus a deterministic index."""
    os.makedirs(directory, exist_ok=True)
    lines = [f"TEMPLATES {len(tset)} {tset.angular_spacing_deg:.17g}"]
    for i, tpl in enumerate(tset.templates):
        name = f"tpl_{i:05d}.vis"
        write_grid(os.path.join(directory, name), tpl.depth)
        cam = tpl.camera
        fields = [name]
        fields += [f"{v:.17g}" for v in (cam.fx, cam.fy, cam.cx, cam.cy)]
        fields += [str(cam.width), str(cam.height)]
        fields += [f"{v:.17g}" for v in tpl.pose.rotation.ravel()]
        fields += [f"{v:.17g}" for v in tpl.pose.translation]
        lines.append(" ".join(fields))
    with open(os.path.join(directory, "index.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_template_set(directory) -> TemplateSet:
    with open(os.path.join(directory, "index.txt")) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    head = lines[0].split()
    if head[0] != "TEMPLATES":
        raise ValueError("not a template index file")
    count = int(head[1])
    spacing = float(head[2])
    templates = []
    for ln in lines[1 : count + 1]:
        parts = ln.split()
        name = parts[0]
        fx, fy, cx, cy = (float(v) for v in parts[1:5])
        w, h = int(parts[5]), int(parts[6])
        rot = np.array([float(v) for v in parts[7:16]]).reshape(3, 3)
        trans = np.array([float(v) for v in parts[16:19]])
        depth = read_grid(os.path.join(directory, name))
        cam = CameraIntrinsics(fx, fy, cx, cy, w, h)
        templates.append(Template.from_depth(Pose(rot, trans), cam, depth))
    return TemplateSet(tuple(templates), spacing)


def write_object_model(path, model: ObjectModel) -> None:
    lines = [f"OBJPTS {len(model.points)} {model.diameter:.17g}"]
    for p in model.points:
        lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}")
    for sym in model.symmetry_transforms[1:]:
        vals = list(sym.rotation.ravel()) + list(sym.translation)
        lines.append("SYM " + " ".join(f"{v:.17g}" for v in vals))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_object_model(path) -> ObjectModel:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    head = lines[0].split()
    if head[0] != "OBJPTS":
        raise ValueError("not an OBJPTS file")
    count = int(head[1])
    diameter = float(head[2])
    pts = np.array([[float(v) for v in ln.split()] for ln in lines[1 : count + 1]])
    syms = []
    for ln in lines[count + 1 :]:
        parts = ln.split()
        if parts[0] != "SYM":
            raise ValueError(f"unexpected line in model file: {ln[:40]}")
        vals = [float(v) for v in parts[1:]]
        if len(vals) != 12:
            raise ValueError("SYM line must have 12 values")
        syms.append(Pose(np.array(vals[:9]).reshape(3, 3), np.array(vals[9:])))
    return ObjectModel(pts, tuple(syms), diameter)
