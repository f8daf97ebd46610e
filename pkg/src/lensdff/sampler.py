"""Normal-based palm initialization and primitive-constrained joint sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateAxes, DegenerateInput
from .geometry import OrientedBox, PointCloud, Pose, axis_angle_matrix
from .hand import EigengraspMap, GraspPrimitive, HandModel

_PARALLEL = 1.0 - 1e-6


@dataclass
class SamplerConfig:
    n_samples: int = 10
    trans_noise_sigma: float = 0.01
    rot_noise_sigma: float = 0.15
    standoff: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.trans_noise_sigma < 0 or self.rot_noise_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")


@dataclass(frozen=True)
class GraspSeed:
    palm: Pose
    init_x_axis: np.ndarray
    synergy_init: np.ndarray
    primitive: GraspPrimitive
    anchor_index: int


def sample_rng(master_seed: int, sample: int) -> np.random.Generator:
    """Independent stream per sample so results do not depend on scheduling."""
    return np.random.default_rng([int(master_seed) & 0xFFFFFFFFFFFFFFFF, int(sample)])


def palm_frame(normal, longest_axis, second_axis) -> np.ndarray:
    """Palm rotation with x = -normal and y along the box's long side."""
    x = -np.asarray(normal, dtype=np.float64)
    x = x / np.linalg.norm(x)
    axis = np.asarray(longest_axis, dtype=np.float64)
    if abs(x @ axis) > _PARALLEL:
        axis = np.asarray(second_axis, dtype=np.float64)
    y = axis - (axis @ x) * x
    ny = np.linalg.norm(y)
    if ny < 1e-9:
        raise DegenerateAxes("box axes are parallel to the normal")
    y /= ny
    if y[2] < 0:
        y = -y
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=1)


def perturb_pose(pose: Pose, rng: np.random.Generator, trans_sigma: float,
                 rot_sigma: float) -> Pose:
    dt = rng.standard_normal(3) * trans_sigma
    axis = rng.standard_normal(3)
    angle = rng.standard_normal() * rot_sigma
    n = np.linalg.norm(axis)
    if n < 1e-12 or angle == 0.0:
        dR = np.eye(3)
    else:
        dR = axis_angle_matrix(axis / n, angle)
    return Pose(dR @ pose.rotation, pose.translation + dt)


def sample_joint_init(primitive, emap: EigengraspMap, rng: np.random.Generator,
                      lower=None, upper=None) -> np.ndarray:
    """Uniform synergy inside the interval that keeps active joints within limits."""
    if lower is None or upper is None:
        raise ValueError("joint limits are required")
    if GraspPrimitive.parse(primitive) != emap.primitive:
        raise ValueError(f"map is for {emap.primitive.value}, not {primitive}")
    lo, hi = emap.synergy_bounds(lower, upper)
    return rng.uniform(lo, hi)


def sample_palm_poses(cloud: PointCloud, obb: OrientedBox, cfg: SamplerConfig,
                      hand: HandModel, primitive, rng_seed=None) -> list[GraspSeed]:
    """Seed grasps: anchor on a random point, approach along its inward normal.

    ``rng_seed`` overrides ``cfg.seed``; sample ``i`` draws from its own
    stream so every sample is a pure function of (inputs, seed, i).
    """
    if cloud.normals is None:
        raise DegenerateInput("sampling needs a cloud with normals")
    primitive = GraspPrimitive.parse(primitive)
    emap = hand.eigengrasp(primitive)
    master = cfg.seed if rng_seed is None else rng_seed
    seeds = []
    for i in range(cfg.n_samples):
        rng = sample_rng(master, i)
        a = int(rng.integers(len(cloud)))
        p, n = cloud.points[a], cloud.normals[a]
        R = palm_frame(n, obb.axes[:, 0], obb.axes[:, 1])
        pose = Pose(R, p + cfg.standoff * n)
        pose = perturb_pose(pose, rng, cfg.trans_noise_sigma, cfg.rot_noise_sigma)
        synergy = sample_joint_init(primitive, emap, rng, hand.lower, hand.upper)
        seeds.append(GraspSeed(pose, pose.rotation[:, 0].copy(), synergy, primitive, a))
    return seeds
