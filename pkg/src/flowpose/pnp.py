"""Pose from 2D-3D correspondences: EPnP, weighted RANSAC, LM polish.

The minimal solver is EPnP: model points are expressed as barycentric
combinations of 4 control points (centroid plus PCA axes), the camera-frame
control points are recovered from the null space of the projection
constraint matrix, with the combination coefficients (betas) fixed by the
inter-control-point distances and refined by Gauss-Newton. Near-planar point
sets (covariance eigenvalue ratio below 1e-6) switch to a 3-control-point
variant.

RANSAC scores hypotheses by the weighted inlier sum and reports the quality
ratio q = (sum of inlier weights) / (sum of all weights), which the refine
and tracking layers use to pick among hypotheses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .correspondence import Correspondences
from .errors import (
    DegenerateConfiguration,
    NoConsensus,
    NonPositiveDepth,
    NumericalFailure,
    TooFewCorrespondences,
)
from .geometry import CameraIntrinsics, Pose, orthonormalize, rotation_defect, rotvec_to_matrix, skew

PLANARITY_RATIO = 1e-6
_SAMPLE_COLLINEAR_TOL = 1e-6
_SAMPLE_MIN_PIXEL_DIST = 1.0


@dataclass(frozen=True)
class RansacConfig:
    """Knobs for :func:`ransac_pnp`."""

    max_iterations: int = 400
    reproj_threshold_px: float = 4.0
    min_inliers: int = 6
    confidence_early_exit: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.reproj_threshold_px <= 0:
            raise ValueError("reproj_threshold_px must be positive")
        if self.min_inliers < 4:
            raise ValueError("min_inliers must be at least 4")
        if not 0.0 < self.confidence_early_exit < 1.0:
            raise ValueError("confidence_early_exit must lie in (0, 1)")


@dataclass(frozen=True)
class FitResult:
    """Robust fit output: pose, inlier indices, quality, inlier RMS in px."""

    pose: Pose
    inliers: np.ndarray
    quality: float
    rms_reproj_px: float

    def __post_init__(self):
        idx = np.asarray(self.inliers, dtype=int)
        idx.flags.writeable = False
        object.__setattr__(self, "inliers", idx)


def reprojection_errors(corrs: Correspondences, pose: Pose, cam: CameraIntrinsics) -> np.ndarray:
    """Per-correspondence pixel error; +inf where the point falls at z <= 0."""
    xc = pose.apply(corrs.points)
    z = xc[:, 2]
    out = np.full(len(corrs), np.inf)
    ok = z > 0
    if np.any(ok):
        u = cam.fx * xc[ok, 0] / z[ok] + cam.cx
        v = cam.fy * xc[ok, 1] / z[ok] + cam.cy
        d = np.stack([u, v], axis=1) - corrs.pixels[ok]
        out[ok] = np.linalg.norm(d, axis=1)
    return out


def _umeyama_rigid(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform with dst ~= R @ src + t (no scale)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    h = (src - mu_s).T @ (dst - mu_d)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    s = np.diag([1.0, 1.0, d])
    r = vt.T @ s @ u.T
    return Pose(orthonormalize(r), mu_d - r @ mu_s)


def _beta_cases(basis_count: int, n_ctrl: int):
    # Which beta case sizes to try for a given null-space basis. Minimal
    # samples have a genuinely 4-dimensional null space, so case 4 matters.
    return (1, 2, 3, 4) if n_ctrl == 4 else (1, 2)


def _gauss_newton_betas(dctdc: np.ndarray, rho: np.ndarray, betas: np.ndarray) -> np.ndarray:
    """Refine betas on the control-point distance constraints."""
    b = betas.astype(float).copy()
    for _ in range(25):
        res = np.einsum("pmn,m,n->p", dctdc, b, b) - rho
        jac = 2.0 * np.einsum("pmn,n->pm", dctdc, b)
        step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
        b = b + step
        if np.linalg.norm(step) < 1e-14 * (1.0 + np.linalg.norm(b)):
            break
    return b


def _betas_init(case: int, dctdc: np.ndarray, rho: np.ndarray, n_basis: int) -> np.ndarray:
    betas = np.zeros(n_basis)
    if case == 1:
        d11 = dctdc[:, 0, 0]
        denom = float(d11 @ d11)
        if denom <= 0:
            raise NumericalFailure("degenerate null-space basis")
        betas[0] = float(np.sqrt(np.abs(d11 @ rho / denom)))
        return betas
    if case == 2:
        cols = np.stack([dctdc[:, 0, 0], 2.0 * dctdc[:, 0, 1], dctdc[:, 1, 1]], axis=1)
        sol, *_ = np.linalg.lstsq(cols, rho, rcond=None)
        b11, b12, b22 = sol
        if b11 < 0:
            b1 = math.sqrt(-b11)
            b2 = math.sqrt(-b22) if b22 < 0 else 0.0
        else:
            b1 = math.sqrt(b11)
            b2 = math.sqrt(b22) if b22 > 0 else 0.0
        if b12 < 0:
            b1 = -b1
        betas[0], betas[1] = b1, b2
        return betas
    if case == 3:
        cols = np.stack(
            [
                dctdc[:, 0, 0],
                2.0 * dctdc[:, 0, 1],
                dctdc[:, 1, 1],
                2.0 * dctdc[:, 0, 2],
                2.0 * dctdc[:, 1, 2],
                dctdc[:, 2, 2],
            ],
            axis=1,
        )
        sol, *_ = np.linalg.lstsq(cols, rho, rcond=None)
        b11, b12, b22, b13, _, b33 = sol
        b1 = math.sqrt(abs(b11))
        b2 = math.sqrt(abs(b22))
        b3 = math.sqrt(abs(b33))
        if b11 < 0:
            b1 = 0.0
        if b12 < 0:
            b2 = -b2
        if b13 < 0:
            b3 = -b3
        betas[0], betas[1], betas[2] = b1, b2, b3
        return betas
    # Case 4: solve the relinearized system over all 10 pairwise products,
    # then recover betas from the dominant eigenpair of the product matrix.
    pairs = [(0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2), (0, 3), (1, 3), (2, 3), (3, 3)]
    cols = np.stack(
        [(1.0 if a == b else 2.0) * dctdc[:, a, b] for a, b in pairs], axis=1
    )
    sol, *_ = np.linalg.lstsq(cols, rho, rcond=None)
    bmat = np.zeros((4, 4))
    for (a, b), value in zip(pairs, sol):
        bmat[a, b] = value
        bmat[b, a] = value
    evals, evecs = np.linalg.eigh(bmat)
    k = int(np.argmax(np.abs(evals)))
    scale = math.sqrt(abs(evals[k]))
    return scale * evecs[:, k]


def _epnp_branch(corrs, cam, centroid, centered, evals, evecs, planar):
    """One EPnP variant (4 or 3 control points). Returns (mean_err, pose)."""
    pts = corrs.points
    px = corrs.pixels
    n = len(corrs)

    # Control points: centroid plus principal axes, largest spread first.
    order = [2, 1] if planar else [2, 1, 0]
    axes = evecs[:, order]
    scales = np.sqrt(evals[order])
    ctrl = np.vstack([centroid, centroid + (scales * axes).T])
    n_ctrl = len(ctrl)

    coords = (centered @ axes) / scales
    alphas = np.column_stack([1.0 - coords.sum(axis=1), coords])

    fx, fy, cx, cy = cam.fx, cam.fy, cam.cx, cam.cy
    m = np.zeros((2 * n, 3 * n_ctrl))
    u = px[:, 0]
    v = px[:, 1]
    for j in range(n_ctrl):
        a = alphas[:, j]
        m[0::2, 3 * j] = a * fx
        m[0::2, 3 * j + 2] = a * (cx - u)
        m[1::2, 3 * j + 1] = a * fy
        m[1::2, 3 * j + 2] = a * (cy - v)

    try:
        _, vecs = np.linalg.eigh(m.T @ m)
    except np.linalg.LinAlgError as e:
        raise NumericalFailure("null-space extraction failed") from e
    n_basis = 3 if planar else 4
    basis = vecs[:, :n_basis]  # ascending eigenvalues: most-null first

    pair_i, pair_j = np.triu_indices(n_ctrl, k=1)
    rho = np.sum((ctrl[pair_i] - ctrl[pair_j]) ** 2, axis=1)
    delta = basis.reshape(n_ctrl, 3, n_basis)
    dv = delta[pair_i] - delta[pair_j]  # (pairs, 3, n_basis)
    dctdc = np.einsum("pxm,pxn->pmn", dv, dv)

    best = None
    for case in _beta_cases(n_basis, n_ctrl):
        try:
            betas = _betas_init(case, dctdc, rho, n_basis)
            betas = _gauss_newton_betas(dctdc, rho, betas)
        except (np.linalg.LinAlgError, NumericalFailure):
            continue
        ctrl_cam = (basis @ betas).reshape(n_ctrl, 3)
        pts_cam = alphas @ ctrl_cam
        if pts_cam[:, 2].mean() < 0:
            pts_cam = -pts_cam
        if np.any(pts_cam[:, 2] <= 0):
            continue
        pose = _umeyama_rigid(pts, pts_cam)
        err = reprojection_errors(corrs, pose, cam)
        score = float(np.mean(err)) if np.all(np.isfinite(err)) else np.inf
        if best is None or score < best[0]:
            best = (score, pose)

    if best is None or not np.isfinite(best[0]):
        raise NumericalFailure("EPnP produced no usable solution")
    return best


def _polish_algebraic(pose: Pose, corrs: Correspondences, cam: CameraIntrinsics) -> Pose:
    """Plain Gauss-Newton push of an EPnP solution to its reprojection root.

    The beta parameterization leaves ~1e-6 relative error even on exact
    data (minimal samples near the planarity threshold are worst); a few
    pose-space steps finish the job. Steps that do not reduce the cost are
    discarded, so a wrong-root candidate is left unchanged and the loop
    exits after one or two steps on consistent data.
    """
    unit = Correspondences(corrs.pixels, corrs.points, np.ones(len(corrs)))
    cost = lm_cost(pose, unit, cam)
    for _ in range(12):
        if not np.isfinite(cost) or cost == 0.0:
            break
        res, jac = residuals_and_jacobian(pose, unit, cam)
        try:
            step = np.linalg.solve(jac.T @ jac, -(jac.T @ res))
        except np.linalg.LinAlgError:
            break
        candidate = apply_increment(pose, step)
        new_cost = lm_cost(candidate, unit, cam)
        if not new_cost < cost:
            break
        pose, cost = candidate, new_cost
    return pose


def solve_epnp(corrs: Correspondences, cam: CameraIntrinsics) -> Pose:
    """EPnP pose from >= 4 correspondences (weights are ignored here).

    Switches to the planar 3-control-point variant when the point covariance
    eigenvalue ratio falls below 1e-6. Near the threshold the planar model
    can underfit a slightly non-planar set, so when the smallest eigenvalue
    is strictly positive the general variant is tried as well and the better
    reprojection wins. Raises DegenerateConfiguration for fewer than 4
    points or (near-)collinear sets, NumericalFailure if the linear algebra
    breaks down.
    """
    n = len(corrs)
    if n < 4:
        raise DegenerateConfiguration(f"EPnP needs at least 4 points, got {n}")
    pts = corrs.points

    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / n
    try:
        evals, evecs = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as e:
        raise NumericalFailure("eigendecomposition of point covariance failed") from e
    if evals[2] <= 0:
        raise DegenerateConfiguration("points are coincident")
    if evals[1] / evals[2] < PLANARITY_RATIO:
        raise DegenerateConfiguration("points are collinear")
    planar = evals[0] / evals[2] < PLANARITY_RATIO

    best = None
    errors = []
    branches = [planar] if not planar or evals[0] <= 0 else [True, False]
    for is_planar in branches:
        try:
            cand = _epnp_branch(corrs, cam, centroid, centered, evals, evecs, is_planar)
        except NumericalFailure as e:
            errors.append(e)
            continue
        if best is None or cand[0] < best[0]:
            best = cand
    if best is None:
        raise errors[0]
    pose = best[1]
    if 0.0 < best[0] < 2.0:
        pose = _polish_algebraic(pose, corrs, cam)
    return pose


def _sample_degenerate(points: np.ndarray, pixels: np.ndarray) -> bool:
    """Reject minimal samples with near-collinear points or crowded pixels."""
    for a in range(4):
        for b in range(a + 1, 4):
            if np.linalg.norm(pixels[a] - pixels[b]) < _SAMPLE_MIN_PIXEL_DIST:
                return True
    for drop in range(4):
        tri = np.delete(points, drop, axis=0)
        e1 = tri[1] - tri[0]
        e2 = tri[2] - tri[0]
        scale = np.linalg.norm(e1) * np.linalg.norm(e2)
        if scale <= 0 or np.linalg.norm(np.cross(e1, e2)) < _SAMPLE_COLLINEAR_TOL * scale:
            return True
    return False


def ransac_pnp(corrs: Correspondences, cam: CameraIntrinsics, cfg: RansacConfig) -> FitResult:
    """Robust EPnP over minimal samples of 4, scored by weighted inlier sum.

    Ties on the weighted score break toward lower inlier RMS, then toward
    the earlier iteration. Iterations stop early once
    ``1 - (1 - inlier_ratio^4)^k`` reaches the configured confidence.
    Degenerate samples are skipped but still consume an iteration, which
    keeps runs deterministic for a fixed seed.

    Raises:
        TooFewCorrespondences: fewer than 4 input correspondences.
        NoConsensus: no hypothesis reached ``min_inliers`` inliers.
    """
    n = len(corrs)
    if n < 4:
        raise TooFewCorrespondences(f"RANSAC needs at least 4 correspondences, got {n}")
    rng = np.random.default_rng(cfg.seed)
    total_weight = float(corrs.weights.sum())
    tau = cfg.reproj_threshold_px

    best_key = None
    best_pose = None
    best_mask = None
    for it in range(cfg.max_iterations):
        sample = rng.choice(n, size=4, replace=False)
        if _sample_degenerate(corrs.points[sample], corrs.pixels[sample]):
            continue
        try:
            pose = solve_epnp(corrs.take(sample), cam)
        except (DegenerateConfiguration, NumericalFailure):
            continue
        err = reprojection_errors(corrs, pose, cam)
        mask = err <= tau
        count = int(mask.sum())
        if count < 4:
            continue
        score = float(corrs.weights[mask].sum())
        rms = float(np.sqrt(np.mean(err[mask] ** 2)))
        key = (score, -rms)  # larger is better on both components
        if best_key is None or key > best_key:
            best_key = key
            best_pose = pose
            best_mask = mask

        ratio = count / n
        p_good = ratio**4
        if p_good >= 1.0:
            break
        if p_good > 0.0:
            needed = math.log(1.0 - cfg.confidence_early_exit) / math.log(1.0 - p_good)
            if (it + 1) >= needed:
                break

    if best_mask is None or int(best_mask.sum()) < cfg.min_inliers:
        raise NoConsensus("no hypothesis reached the inlier minimum")
    quality = float(corrs.weights[best_mask].sum()) / total_weight
    return FitResult(
        pose=best_pose,
        inliers=np.flatnonzero(best_mask),
        quality=quality,
        rms_reproj_px=-best_key[1],
    )


def apply_increment(pose: Pose, delta: np.ndarray) -> Pose:
    """Left-apply a 6-vector increment (axis-angle, translation) to a pose."""
    delta = np.asarray(delta, dtype=float)
    dr = rotvec_to_matrix(delta[:3])
    rot = dr @ pose.rotation
    if rotation_defect(rot) > 1e-9:
        rot = orthonormalize(rot)
    return Pose(rot, dr @ pose.translation + delta[3:])


def residuals_and_jacobian(
    pose: Pose, corrs: Correspondences, cam: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted reprojection residuals (2n,) and their Jacobian (2n, 6).

    The Jacobian is taken at a zero left-applied increment, matching
    :func:`apply_increment`: columns 0..2 are the axis-angle derivative,
    columns 3..5 the translation derivative.
    """
    xc = pose.apply(corrs.points)
    z = xc[:, 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("pose puts correspondences behind the camera")
    sw = np.sqrt(corrs.weights)
    u = cam.fx * xc[:, 0] / z + cam.cx
    v = cam.fy * xc[:, 1] / z + cam.cy
    res = (np.stack([u, v], axis=1) - corrs.pixels) * sw[:, None]

    n = len(corrs)
    dudx = np.zeros((n, 2, 3))
    dudx[:, 0, 0] = cam.fx / z
    dudx[:, 0, 2] = -cam.fx * xc[:, 0] / z**2
    dudx[:, 1, 1] = cam.fy / z
    dudx[:, 1, 2] = -cam.fy * xc[:, 1] / z**2
    # x_cam responds to the increment as dx = d_omega x x + dt.
    dxdw = np.zeros((n, 3, 3))
    dxdw[:, 0, 1] = xc[:, 2]
    dxdw[:, 0, 2] = -xc[:, 1]
    dxdw[:, 1, 0] = -xc[:, 2]
    dxdw[:, 1, 2] = xc[:, 0]
    dxdw[:, 2, 0] = xc[:, 1]
    dxdw[:, 2, 1] = -xc[:, 0]
    jac = np.concatenate([dudx @ dxdw, dudx], axis=2) * sw[:, None, None]
    return res.reshape(-1), jac.reshape(-1, 6)


def lm_cost(pose: Pose, corrs: Correspondences, cam: CameraIntrinsics) -> float:
    """Weighted sum of squared reprojection residuals; +inf behind camera."""
    xc = pose.apply(corrs.points)
    z = xc[:, 2]
    if np.any(z <= 0):
        return float("inf")
    u = cam.fx * xc[:, 0] / z + cam.cx
    v = cam.fy * xc[:, 1] / z + cam.cy
    d = np.stack([u, v], axis=1) - corrs.pixels
    return float(np.sum(corrs.weights * np.sum(d * d, axis=1)))


def refine_lm(
    initial: Pose,
    corrs: Correspondences,
    cam: CameraIntrinsics,
    max_iterations: int = 100,
    rel_cost_tol: float = 1e-10,
) -> Pose:
    """Levenberg-Marquardt polish of a pose on weighted correspondences.

    Damping starts at 1e-3, multiplies by 10 on a rejected step and divides
    by 10 on an accepted one (Marquardt scaling on the normal-equation
    diagonal). Steps that do not decrease the cost are rejected, so the
    accepted cost sequence is non-increasing. Stops on ``max_iterations`` or
    when the relative cost improvement falls below ``rel_cost_tol``.
    """
    if len(corrs) < 4:
        raise TooFewCorrespondences("LM needs at least 4 correspondences")
    pose = initial
    cost = lm_cost(pose, corrs, cam)
    if not np.isfinite(cost):
        raise NonPositiveDepth("initial pose puts correspondences behind the camera")

    lam = 1e-3
    for _ in range(max_iterations):
        res, jac = residuals_and_jacobian(pose, corrs, cam)
        h = jac.T @ jac
        g = jac.T @ res
        diag = np.maximum(np.diag(h), 1e-12)
        try:
            step = np.linalg.solve(h + lam * np.diag(diag), -g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            if lam > 1e32:
                raise NumericalFailure("LM normal equations stay singular")
            continue
        candidate = apply_increment(pose, step)
        new_cost = lm_cost(candidate, corrs, cam)
        if new_cost < cost:
            rel = (cost - new_cost) / max(cost, 1e-300)
            pose = candidate
            cost = new_cost
            lam = max(lam / 10.0, 1e-18)
            if rel < rel_cost_tol:
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                break

    rot = pose.rotation
    if rotation_defect(rot) > 1e-9:
        pose = Pose(orthonormalize(rot), pose.translation)
    return pose
