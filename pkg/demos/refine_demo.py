"""Single-frame pose refinement on a synthetic scene.

Builds a procedural object, renders one ground-truth frame, perturbs the
pose by a configurable rotation/depth error, and walks it back with the
flow-driven refiner. Prints the per-iteration trace the refiner records.
"""

import argparse

import numpy as np

from flowpose import (
    OracleFlowProvider,
    Pose,
    RefineConfig,
    SceneSpec,
    generate_sequence,
    refine_pose,
)
from flowpose.geometry import rotvec_to_matrix


def perturb(pose, rng, rot_deg, depth_frac):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    rot = rotvec_to_matrix(axis * np.radians(rot_deg)) @ pose.rotation
    t = pose.translation.copy()
    t[2] *= 1.0 + depth_frac
    return Pose(rot, t)


def rot_err_deg(a, b):
    r = a.rotation.T @ b.rotation
    axis = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return np.degrees(np.arctan2(np.linalg.norm(axis), (np.trace(r) - 1.0) / 2.0))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default="blob", choices=("cube", "cylinder", "blob"))
    ap.add_argument("--points", type=int, default=1200)
    ap.add_argument("--rot-deg", type=float, default=12.0)
    ap.add_argument("--depth-frac", type=float, default=0.08)
    ap.add_argument("--noise-px", type=float, default=0.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    gt = Pose(np.eye(3), np.array([20.0, -15.0, 900.0]))
    spec = SceneSpec(model_kind=args.model, n_points=args.points, seed=args.seed,
                     keyframes=(gt,), frames_per_segment=())
    model, frames = generate_sequence(spec)
    provider = OracleFlowProvider(frames)

    init = perturb(gt, rng, args.rot_deg, args.depth_frac)
    print(f"model: {args.model} with {args.points} points, diameter {model.diameter:.0f} mm")
    print(f"start: {rot_err_deg(init, gt):.2f} deg / "
          f"{np.linalg.norm(init.translation - gt.translation):.1f} mm off\n")

    outcome = refine_pose(init, None, spec.camera, model, provider, RefineConfig())

    print("iter   quality   inlier RMS px")
    for i, it in enumerate(outcome.per_iteration):
        print(f"  {i}     {it.quality:.3f}     {it.rms_px:.4f}")
    print(f"\nfinal: {rot_err_deg(outcome.pose, gt):.5f} deg / "
          f"{np.linalg.norm(outcome.pose.translation - gt.translation):.4f} mm off, "
          f"quality {outcome.quality:.3f}")


if __name__ == "__main__":
    main()
