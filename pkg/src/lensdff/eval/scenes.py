"""Synthetic benchmark scenes.

Each scene pairs a demo object with a novel test instance of the same
shape. Surfaces are split into regions and every region carries a base
feature built from a smooth field along the prompt's language direction
plus an instance-specific component orthogonal to the prompts. Views are
rendered by back-face culling from cameras around the object and given
noisy features through :func:`synthesize_view_features`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import ConfigError
from ..features import LanguageFeature, ViewFeatureCloud, synthesize_view_features
from ..geometry import PointCloud, Pose, axis_angle_matrix, fit_obb
from ..hand import Grasp, GraspPrimitive, HandModel
from ..sampler import palm_frame
from .contact import ObjectProbe, evaluate_points

SHAPES = ("cylinder", "box", "sphere")
SCENE_SCHEMA = "lensdff-scenes"
SCENE_VERSION = 1


@dataclass
class SceneConfig:
    master_seed: int = 7
    n_scenes: int = 10
    noise: float = 0.5
    feature_dim: int = 32
    n_points: int = 1500
    n_regions: int = 96
    n_demo_views: int = 4
    n_test_views: int = 4
    camera_distance: float = 0.5
    camera_elevation: float = 0.6
    field_scale: float = 0.04
    field_amplitude: float = 1.2
    instance_variation: float = 0.2
    part_gain: float = 2.0
    part_radius: float = 0.03
    orth_scale: float = 1.0
    shapes: list = field(default_factory=lambda: list(SHAPES))
    primitives: list = field(default_factory=lambda: ["cylindrical", "lumbrical", "tripod", "hook"])
    # cosine between demo and test prompt features, cycled over scenes
    similarities: list = field(default_factory=lambda: [1.0, 0.45, 1.0, 0.3, 0.85, 0.5, 1.0, 0.4, 0.7, 0.35])

    def __post_init__(self):
        if self.n_scenes < 0 or self.n_points < 16 or self.n_regions < 1:
            raise ConfigError("scene config: counts out of range")
        if self.noise < 0:
            raise ConfigError("scene config: noise must be non-negative")
        if self.feature_dim < 2 * max(self.n_scenes, 1):
            raise ConfigError("scene config: feature_dim must be at least 2 * n_scenes")
        if not self.shapes or not self.primitives or not self.similarities:
            raise ConfigError("scene config: shapes, primitives and similarities must be nonempty")
        for s in self.shapes:
            if s not in SHAPES:
                raise ConfigError(f"scene config: unknown shape {s!r}")
        for p in self.primitives:
            try:
                GraspPrimitive.parse(p)
            except ValueError as exc:
                raise ConfigError(f"scene config: {exc}") from None
        if any(not -1.0 <= s <= 1.0 for s in self.similarities):
            raise ConfigError("scene config: similarities must lie in [-1, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"scene config: unknown keys {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def save_scene_config(cfg: SceneConfig, path) -> None:
    doc = {"schema": SCENE_SCHEMA, "version": SCENE_VERSION, "scenes": cfg.to_dict()}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_scene_config(path) -> SceneConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read scene config {path}: {exc}") from exc
    if doc.get("schema") != SCENE_SCHEMA or doc.get("version") != SCENE_VERSION:
        raise ConfigError(f"{path}: expected schema {SCENE_SCHEMA} version {SCENE_VERSION}")
    return SceneConfig.from_dict(doc.get("scenes", {}))


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def _sample_by_area(rng, areas, n):
    p = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(p), size=n, p=p / p.sum())


def sample_shape(shape: str, dims, n: int, rng: np.random.Generator):
    """Points and outward normals on a shape resting on z = 0."""
    if shape == "cylinder":
        r, h = dims
        part = _sample_by_area(rng, [2 * np.pi * r * h, np.pi * r * r, np.pi * r * r], n)
        phi = rng.uniform(0, 2 * np.pi, n)
        rad = r * np.sqrt(rng.uniform(0, 1, n))
        z = rng.uniform(0, h, n)
        side = part == 0
        pts = np.where(side[:, None],
                       np.stack([r * np.cos(phi), r * np.sin(phi), z], 1),
                       np.stack([rad * np.cos(phi), rad * np.sin(phi), np.where(part == 1, h, 0.0)], 1))
        nrm = np.where(side[:, None],
                       np.stack([np.cos(phi), np.sin(phi), np.zeros(n)], 1),
                       np.stack([np.zeros(n), np.zeros(n), np.where(part == 1, 1.0, -1.0)], 1))
        return pts, nrm
    if shape == "box":
        a, b, c = dims
        areas = [b * c, b * c, a * c, a * c, a * b, a * b]
        face = _sample_by_area(rng, areas, n)
        u = rng.uniform(-0.5, 0.5, (n, 3)) * np.array([a, b, c])
        u[:, 2] += c / 2
        axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
        half = np.array([a / 2, b / 2, c / 2])
        pts = u.copy()
        rows = np.arange(n)
        pts[rows, axis] = np.where(axis == 2, np.where(sign > 0, c, 0.0), sign * half[axis])
        nrm = np.zeros((n, 3))
        nrm[rows, axis] = sign
        return pts, nrm
    if shape == "sphere":
        (r,) = dims
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v * r + np.array([0.0, 0.0, r]), v
    raise ValueError(f"unknown shape {shape!r}")


def shape_dims(shape: str, rng: np.random.Generator) -> tuple:
    if shape == "cylinder":
        return (float(rng.uniform(0.03, 0.042)), float(rng.uniform(0.11, 0.16)))
    if shape == "box":
        return (float(rng.uniform(0.05, 0.07)), float(rng.uniform(0.07, 0.1)),
                float(rng.uniform(0.1, 0.14)))
    return (float(rng.uniform(0.04, 0.055)),)


def farthest_point_regions(points: np.ndarray, n_regions: int, start: int = 0):
    """Voronoi partition around farthest-point-sampled centers."""
    n_regions = min(n_regions, len(points))
    centers = [start]
    d = np.linalg.norm(points - points[start], axis=1)
    for _ in range(n_regions - 1):
        nxt = int(np.argmax(d))
        centers.append(nxt)
        d = np.minimum(d, np.linalg.norm(points - points[nxt], axis=1))
    centers = np.asarray(centers)
    dist = np.linalg.norm(points[:, None, :] - points[centers][None], axis=2)
    return np.argmin(dist, axis=1), centers


class SmoothField:
    """Random Fourier field ``R^3 -> R^m`` with unit variance per output."""

    def __init__(self, rng: np.random.Generator, out_dim: int, length: float, terms: int = 16):
        self.omega = rng.standard_normal((terms, 3)) / length
        self.phase = rng.uniform(0, 2 * np.pi, terms)
        self.mix = rng.standard_normal((terms, out_dim)) * np.sqrt(2.0 / terms)

    def __call__(self, points) -> np.ndarray:
        return np.cos(np.asarray(points) @ self.omega.T + self.phase) @ self.mix


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------

@dataclass
class SyntheticObject:
    name: str
    shape: str
    dims: tuple
    pose: Pose
    points: np.ndarray        # world frame
    normals: np.ndarray
    regions: np.ndarray       # region label per point
    base_features: np.ndarray  # (R, D)
    language: LanguageFeature
    prompt: str

    @property
    def cloud(self) -> PointCloud:
        return PointCloud(self.points, self.normals)

    @property
    def center(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def features(self) -> np.ndarray:
        return self.base_features[self.regions]


@dataclass
class SyntheticScene:
    seed: int
    index: int
    primitive: GraspPrimitive
    demo: SyntheticObject
    test: SyntheticObject
    g_gt: Grasp
    demo_views: list
    test_views: list
    similarity: float
    noise: float

    @property
    def objects(self) -> list:
        return [self.demo, self.test]

    @property
    def g_gt_test(self) -> Grasp:
        """The demo grasp carried onto the test object by its placement."""
        T = self.test.pose.compose(self.demo.pose.inverse())
        palm = T.compose(self.g_gt.palm)
        return Grasp(self.g_gt.joints, palm)


def look_at(eye, target) -> Pose:
    """Camera-to-world pose with +z looking at ``target`` and +y pointing down."""
    eye, target = np.asarray(eye, dtype=np.float64), np.asarray(target, dtype=np.float64)
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, [0.0, 0.0, 1.0])
    if np.linalg.norm(x) < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def camera_ring(center, n: int, distance: float, elevation: float, azimuth0: float) -> list:
    poses = []
    for i in range(n):
        az = azimuth0 + 2 * np.pi * i / n
        d = np.array([np.cos(elevation) * np.cos(az), np.cos(elevation) * np.sin(az),
                      np.sin(elevation)])
        poses.append(look_at(center + distance * d, center))
    return poses


def visible(obj: SyntheticObject, camera: Pose) -> np.ndarray:
    """Indices of points facing the camera (convex shapes: no other occlusion)."""
    d = camera.translation - obj.points
    return np.nonzero(np.sum(d * obj.normals, axis=1) > 0)[0]


def render_views(obj: SyntheticObject, cameras, view_seeds, noise: float) -> list:
    return [synthesize_view_features(obj, s, noise, visible(obj, cam), cam)
            for cam, s in zip(cameras, view_seeds)]


def plant_grasp(cloud: PointCloud, hand: HandModel, primitive, rng: np.random.Generator,
                attempts: int = 96, finger_depth: float = 0.003) -> Grasp:
    """Find a palm pose and synergy on the object that passes the contact proxy.

    Anchors are tried in random order; for each, standoffs and synergy values
    are swept and the first closure with contacts on at least three fingers,
    no palm penetration and fingers at most ``finger_depth`` inside wins.
    """
    primitive = GraspPrimitive.parse(primitive)
    emap = hand.eigengrasp(primitive)
    probe = ObjectProbe(cloud)
    obb = fit_obb(cloud)
    lo, hi = emap.synergy_bounds(hand.lower, hand.upper)
    synergies = np.linspace(lo, hi, 48)
    joints = hand.clamp(np.stack([emap.expand_raw(s) for s in synergies]))
    local, _ = hand.local_points_and_jacobian(joints, jacobian=False)
    # anchors below the equator would put the hand under the table
    ok = np.nonzero(cloud.normals[:, 2] > -0.2)[0]
    order = rng.permutation(ok)[:attempts]
    for a in order:
        p, n = cloud.points[a], cloud.normals[a]
        try:
            R = palm_frame(n, obb.axes[:, 0], obb.axes[:, 1])
        except Exception:
            continue
        for standoff in np.arange(0.02, 0.075, 0.005):
            palm = Pose(R, p + standoff * n)
            world = palm.apply(local)
            if world[..., 2].min() < 0.0:
                continue
            dist, signed = probe.query(world)
            for s in range(len(synergies)):
                if signed[s].min() < -finger_depth:
                    break
                fingers = {int(f) for f in hand.surface_finger[hand.fingertip & (dist[s] <= 0.005)]}
                if len(fingers) >= 3:
                    g = Grasp(joints[s], palm)
                    rep = evaluate_points(hand, world[s], probe, 0.005, 0.01)
                    if rep.success:
                        return g
                    break
    raise RuntimeError(f"could not plant a {primitive.value} grasp")


def _language_basis(cfg: SceneConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.master_seed, 0xBA515])
    q, _ = np.linalg.qr(rng.standard_normal((cfg.feature_dim, cfg.feature_dim)))
    return q


def _off_prompt(field: SmoothField, lan: np.ndarray, scale: float):
    """Instance feature component: anything except the object's own prompt direction."""
    def fn(p):
        v = field(p)
        return scale * (v - np.outer(v @ lan, lan))
    return fn


def make_object(name, shape, dims, pose, local, normals, a_fn, o_fn, lan_dir,
                cfg: SceneConfig, prompt, source) -> SyntheticObject:
    regions, centers = farthest_point_regions(local, cfg.n_regions)
    c = local[centers]
    base = a_fn(c)[:, None] * lan_dir[None, :] + o_fn(c)
    return SyntheticObject(name, shape, tuple(dims), pose, pose.apply(local),
                           normals @ pose.rotation.T, regions, base,
                           LanguageFeature(lan_dir, source), prompt)


def grasp_part_center(g: Grasp, hand: HandModel, cloud: PointCloud, delta: float = 0.005):
    """Mean of the fingertip points touching the object under ``g``."""
    pts = hand.grasp_points(g)[hand.fingertip]
    dist, _ = ObjectProbe(cloud).query(pts)
    touching = pts[dist <= delta]
    return touching.mean(axis=0) if len(touching) else pts.mean(axis=0)


def make_scene(cfg: SceneConfig, index: int, hand: HandModel) -> SyntheticScene:
    seed = int(np.random.default_rng([cfg.master_seed, index]).integers(2**31))
    rng = np.random.default_rng(seed)
    shape = cfg.shapes[index % len(cfg.shapes)]
    s = float(cfg.similarities[index % len(cfg.similarities)])
    Q = _language_basis(cfg)
    l_demo, u = Q[:, 2 * index], Q[:, 2 * index + 1]
    l_test = s * l_demo + np.sqrt(max(0.0, 1.0 - s * s)) * u

    dims = shape_dims(shape, rng)
    field_a = SmoothField(rng, 1, cfg.field_scale)
    field_var = SmoothField(rng, 1, cfg.field_scale)
    field_od = SmoothField(rng, cfg.feature_dim, cfg.field_scale)
    field_ot = SmoothField(rng, cfg.feature_dim, cfg.field_scale)
    yaw = float(rng.uniform(0, 2 * np.pi))
    shift = np.append(rng.uniform(-0.15, 0.15, 2), 0.0)
    test_pose = Pose(axis_angle_matrix([0.0, 0.0, 1.0], yaw), shift)
    demo_local, demo_nrm = sample_shape(shape, dims, cfg.n_points, np.random.default_rng([seed, 1]))
    test_local, test_nrm = sample_shape(shape, dims, cfg.n_points, np.random.default_rng([seed, 2]))

    # the demo object sits at the origin, so its local frame is the world frame;
    # fall through the configured primitives when one cannot grip this shape
    demo_cloud = PointCloud(demo_local, demo_nrm)
    g_gt, primitive = None, None
    for k in range(len(cfg.primitives)):
        cand = GraspPrimitive.parse(cfg.primitives[(index + k) % len(cfg.primitives)])
        try:
            g_gt = plant_grasp(demo_cloud, hand, cand, np.random.default_rng([seed, 3]))
        except RuntimeError:
            continue
        primitive = cand
        break
    if g_gt is None:
        raise RuntimeError(f"scene {index}: no configured primitive grips the {shape}")

    # the grasped part reads as semantically distinct, like a handle
    part = grasp_part_center(g_gt, hand, demo_cloud)

    def a_demo(p):
        bump = np.exp(-np.sum((p - part) ** 2, axis=1) / (2 * cfg.part_radius ** 2))
        return cfg.field_amplitude * field_a(p)[:, 0] + cfg.part_gain * bump

    def a_test(p):
        return a_demo(p) + cfg.instance_variation * field_var(p)[:, 0]

    demo = make_object(f"scene{index}-demo", shape, dims, Pose(), demo_local, demo_nrm, a_demo,
                       _off_prompt(field_od, l_demo, cfg.orth_scale), l_demo, cfg,
                       f"prompt {index} demo", "demo")
    test = make_object(f"scene{index}-test", shape, dims, test_pose, test_local, test_nrm, a_test,
                       _off_prompt(field_ot, l_test, cfg.orth_scale), l_test, cfg,
                       f"prompt {index} test", "test")

    az0 = float(rng.uniform(0, 2 * np.pi))
    demo_cams = camera_ring(demo.center, cfg.n_demo_views, cfg.camera_distance,
                            cfg.camera_elevation, np.pi / 4)
    test_cams = camera_ring(test.center, cfg.n_test_views, cfg.camera_distance,
                            cfg.camera_elevation, az0)
    demo_views = render_views(demo, demo_cams, [seed * 64 + i for i in range(len(demo_cams))], cfg.noise)
    test_views = render_views(test, test_cams, [seed * 64 + 32 + i for i in range(len(test_cams))], cfg.noise)
    return SyntheticScene(seed, index, primitive, demo, test, g_gt, demo_views, test_views,
                          s, cfg.noise)


def make_scenes(cfg: SceneConfig, hand: HandModel) -> list:
    return [make_scene(cfg, i, hand) for i in range(cfg.n_scenes)]
