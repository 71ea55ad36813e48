"""Shared fixtures and small generators used across the test modules."""

import numpy as np
import pytest

from flowpose import CameraIntrinsics, Correspondences, Pose, project
from flowpose.geometry import random_rotation


@pytest.fixture
def cam():
    return CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)


@pytest.fixture
def crop_cam():
    return CameraIntrinsics(600.0, 600.0, 140.0, 140.0, 280, 280)


def random_pose(rng, depth_range=(600.0, 1400.0), lateral=120.0):
    """Pose with the model comfortably in front of the camera."""
    t = np.array(
        [
            rng.uniform(-lateral, lateral),
            rng.uniform(-lateral, lateral),
            rng.uniform(*depth_range),
        ]
    )
    return Pose(random_rotation(rng), t)


def random_points(rng, n, extent=80.0):
    return rng.uniform(-extent, extent, size=(n, 3))


def exact_corrs(points, pose, cam, weights=None):
    """Correspondences whose pixels are the exact projections under pose."""
    pixels = project(points, pose, cam)
    if weights is None:
        weights = np.ones(len(points))
    return Correspondences(pixels, np.asarray(points, float), np.asarray(weights, float))


def rotation_between(a, b):
    """Relative rotation angle in degrees, atan2 form (stable near zero).

    The bare acos trace formula bottoms out around 1e-6 deg (acos has an
    infinite derivative at 1), which is exactly the scale several oracles
    assert at; sin comes from the skew part instead.
    """
    r = a.rotation.T @ b.rotation
    c = (np.trace(r) - 1.0) / 2.0
    axis = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return np.degrees(np.arctan2(np.linalg.norm(axis), c))


def translation_between(a, b):
    return float(np.linalg.norm(a.translation - b.translation))


def nn_angles_deg(rotations):
    """Per-rotation nearest-neighbor geodesic distances, degrees."""
    flat = np.asarray(rotations).reshape(len(rotations), 9)
    cos = np.clip((flat @ flat.T - 1.0) / 2.0, -1.0, 1.0)
    ang = np.degrees(np.arccos(cos))
    np.fill_diagonal(ang, np.inf)
    return ang.min(axis=1)


def pairwise_angle_chisq_p(rotations, k=16, n_pairs=5000, seed=0):
    """Chi-square p-value of sampled pairwise angles against the uniform
    SO(3) density (1 - cos theta) / pi.

    Bins are equal-probability (inverse CDF of F(t) = (t - sin t) / pi), and
    the pairs are a seeded subsample: all ~320k pairs of a well-spread set
    are far from independent and an all-pairs test rejects any non-random
    layout on the tiny systematic ripples alone.
    """
    from scipy.optimize import brentq
    from scipy.stats import chi2

    flat = np.asarray(rotations).reshape(len(rotations), 9)
    ii, jj = np.triu_indices(len(rotations), 1)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(ii), size=min(n_pairs, len(ii)), replace=False)
    cos = np.clip((np.sum(flat[ii[pick]] * flat[jj[pick]], axis=1) - 1.0) / 2.0, -1.0, 1.0)
    angles = np.arccos(cos)

    cdf = lambda t: (t - np.sin(t)) / np.pi
    edges = [0.0] + [brentq(lambda t, q=q: cdf(t) - q, 1e-9, np.pi) for q in
                     (np.arange(1, k) / k)] + [np.pi]
    counts, _ = np.histogram(angles, bins=edges)
    expected = len(angles) / k
    stat = float(np.sum((counts - expected) ** 2) / expected)
    return float(chi2.sf(stat, df=k - 1))


def record_acceptance(config, line):
    """Queue one acceptance verdict line for the terminal summary."""
    lines = getattr(config, "_acceptance_lines", None)
    if lines is None:
        lines = []
        config._acceptance_lines = lines
    lines.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
