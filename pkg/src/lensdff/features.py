"""Language-enhanced feature distillation onto point clouds.

Per-view vision features are projected onto a language direction and
squashed through a sigmoid, which makes every aligned feature a positive
multiple of the same vector and therefore consistent across views.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import (DimensionMismatch, EmptyCloud, EmptyInput, TooFewPoints,
                     ZeroLanguageFeature)
from .geometry import Pose, PointCloud, SpatialIndex, estimate_normals

TAU = 0.63
SOURCES = ("demo", "test", "fused")
_ZERO = 1e-9


@dataclass(frozen=True)
class LanguageFeature:
    feature: np.ndarray
    source: str = "demo"

    def __post_init__(self):
        f = np.array(self.feature, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(f)) or np.linalg.norm(f) <= _ZERO:
            raise ZeroLanguageFeature("language feature must have nonzero finite norm")
        if self.source not in SOURCES:
            raise ValueError(f"unknown language source {self.source!r}")
        f.flags.writeable = False
        object.__setattr__(self, "feature", f)

    @property
    def dim(self) -> int:
        return self.feature.shape[0]


@dataclass(frozen=True)
class ViewFeatureCloud:
    cloud: PointCloud
    features: np.ndarray
    camera_pose: Pose = field(default_factory=Pose)

    def __post_init__(self):
        f = np.array(self.features, dtype=np.float64)
        if f.ndim != 2 or len(f) != len(self.cloud):
            raise DimensionMismatch(
                f"{f.shape} features for {len(self.cloud)} points")
        f.flags.writeable = False
        object.__setattr__(self, "features", f)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def camera_position(self) -> np.ndarray:
        return self.camera_pose.translation


@dataclass(frozen=True, eq=False)
class DistilledCloud:
    """Fused multi-view cloud with one feature per point.

    ``language`` is None for a raw (unaligned) fusion, which is only used as
    the no-alignment baseline.
    """

    points: np.ndarray
    features: np.ndarray
    normals: np.ndarray
    language: Optional[LanguageFeature] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.features, dtype=np.float64)
        n = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
        if f.ndim != 2 or not (len(pts) == len(f) == len(n)):
            raise DimensionMismatch("points, features and normals differ in count")
        if self.language is not None and f.shape[1] != self.language.dim:
            raise DimensionMismatch("feature and language dimensions differ")
        for a in (pts, f, n):
            a.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "normals", n)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @cached_property
    def index(self) -> SpatialIndex:
        return SpatialIndex(self.points)

    def as_point_cloud(self) -> PointCloud:
        return PointCloud(self.points, self.normals)

    def transformed(self, pose: Pose) -> "DistilledCloud":
        return DistilledCloud(pose.apply(self.points), self.features,
                              self.normals @ pose.rotation.T, self.language)


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------

def _lan_vec(f_lan) -> np.ndarray:
    if isinstance(f_lan, LanguageFeature):
        return f_lan.feature
    v = np.asarray(f_lan, dtype=np.float64).reshape(-1)
    if np.linalg.norm(v) <= _ZERO:
        raise ZeroLanguageFeature("language feature must have nonzero norm")
    return v


def enhance_coefficients(f_vis, f_lan, normalize_vis: bool = False) -> np.ndarray:
    """Sigmoid of the projection coefficient of each vision feature onto ``f_lan``."""
    lan = _lan_vec(f_lan)
    vis = np.asarray(f_vis, dtype=np.float64)
    if vis.shape[-1] != lan.shape[0]:
        raise DimensionMismatch(f"vision dim {vis.shape[-1]} != language dim {lan.shape[0]}")
    if normalize_vis:
        norms = np.linalg.norm(vis, axis=-1, keepdims=True)
        vis = vis / np.where(norms > 0, norms, 1.0)
    return expit((vis @ lan) / (lan @ lan))


def language_enhance(f_vis, f_lan, normalize_vis: bool = False) -> np.ndarray:
    """Project vision feature(s) onto the language direction.

    ``f_vis`` may be a single (D,) vector or an (M, D) stack.
    """
    lan = _lan_vec(f_lan)
    coef = enhance_coefficients(f_vis, lan, normalize_vis)
    return coef[..., None] * lan


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def gate_language(f_demo: LanguageFeature, f_test: LanguageFeature,
                  tau: float = TAU) -> LanguageFeature:
    """Keep the demo prompt feature when prompts agree, otherwise average them."""
    if f_demo.dim != f_test.dim:
        raise DimensionMismatch("demo and test language features differ in dimension")
    s = cosine(f_demo.feature, f_test.feature)
    if s >= tau:
        return f_demo
    return LanguageFeature((f_demo.feature + f_test.feature) / 2.0, "fused")


GATE_TEST_SIDES = ("shared", "own")


def gate_pair(f_demo: LanguageFeature, f_test: LanguageFeature, tau: float = TAU,
              test_side: str = "shared") -> tuple[LanguageFeature, LanguageFeature]:
    """Languages for the demo cloud and the test cloud.

    ``shared`` aligns both clouds to the gated demo feature. ``own`` lets
    the test cloud keep its own prompt feature when the prompts agree; both
    variants switch to the average when they do not.
    """
    demo_side = gate_language(f_demo, f_test, tau)
    if test_side == "shared":
        return demo_side, demo_side
    if test_side == "own":
        return demo_side, gate_language(f_test, f_demo, tau)
    raise ValueError(f"test_side must be one of {GATE_TEST_SIDES}")


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

def _view_normals(view: ViewFeatureCloud, normal_k: int) -> np.ndarray:
    if view.cloud.normals is not None:
        return view.cloud.normals
    try:
        return estimate_normals(view.cloud, normal_k, view.camera_position).normals
    except TooFewPoints:
        # tiny clouds: fall back to the viewing direction
        d = view.camera_position - view.cloud.points
        n = np.linalg.norm(d, axis=1, keepdims=True)
        d = np.where(n > 0, d / np.where(n > 0, n, 1.0), np.array([0.0, 0.0, 1.0]))
        return d


def voxel_downsample(points: np.ndarray, voxel: float):
    """Bin points into cubic voxels.

    Returns ``(reps, centroids)``: per occupied voxel, the index of the point
    nearest the voxel centroid (lowest index on ties) and the centroid itself.
    Voxels are ordered by their first point.
    """
    keys = np.floor(points / voxel).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse)
    centroids = np.zeros((len(first), 3))
    np.add.at(centroids, inverse, points)
    centroids /= counts[:, None]
    d = np.linalg.norm(points - centroids[inverse], axis=1)
    order = np.lexsort((np.arange(len(points)), d, inverse))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    reps = order[starts]
    by_first = np.argsort(first, kind="stable")
    return reps[by_first], centroids[by_first]


def distill_views(views: Sequence[ViewFeatureCloud], f_lan: Optional[LanguageFeature],
                  voxel: Optional[float] = None, normalize_vis: bool = False,
                  normal_k: int = 16) -> DistilledCloud:
    """Fuse feature clouds from several views into one distilled cloud.

    With ``f_lan`` None the raw vision features are kept (no alignment).
    Points keep view order, then per-view order.
    """
    if not views:
        raise EmptyInput("distill_views needs at least one view")
    dims = {v.dim for v in views}
    if len(dims) != 1:
        raise DimensionMismatch(f"views disagree on feature dimension: {sorted(dims)}")
    if f_lan is not None and f_lan.dim != views[0].dim:
        raise DimensionMismatch(
            f"language dim {f_lan.dim} != vision dim {views[0].dim}")

    points = np.concatenate([v.cloud.points for v in views])
    normals = np.concatenate([_view_normals(v, normal_k) for v in views])
    vis = np.concatenate([v.features for v in views])
    if f_lan is None:
        feats = vis
    else:
        feats = language_enhance(vis, f_lan, normalize_vis)
    if voxel is not None and voxel > 0 and len(points):
        keep, points = voxel_downsample(points, voxel)
        feats, normals = feats[keep], normals[keep]
    return DistilledCloud(points, feats, normals, f_lan)


# ---------------------------------------------------------------------------
# Grasp features
# ---------------------------------------------------------------------------

def inverse_square_weights(dist: np.ndarray, eps: float) -> np.ndarray:
    u = 1.0 / (dist * dist + eps)
    return u / u.sum(axis=-1, keepdims=True)


def grasp_feature(cloud: DistilledCloud, surface_points, k: int = 8,
                  eps: float = 1e-6) -> np.ndarray:
    """Per-surface-point blend of the k nearest distilled features, shape (N, D)."""
    if len(cloud) == 0:
        raise EmptyCloud("grasp_feature needs a nonempty cloud")
    if k < 1 or eps <= 0:
        raise ValueError("k must be >= 1 and eps > 0")
    q = np.asarray(surface_points, dtype=np.float64).reshape(-1, 3)
    idx, dist = cloud.index.query(q, min(k, len(cloud)))
    w = inverse_square_weights(dist, eps)
    return np.einsum("nk,nkd->nd", w, cloud.features[idx])


# ---------------------------------------------------------------------------
# Synthetic view features (test provider)
# ---------------------------------------------------------------------------

def view_perturbation(view_seed: int, n_points: int, dim: int) -> np.ndarray:
    """Unit-variance Gaussian perturbation indexed by (view_seed, point index)."""
    rng = np.random.default_rng([int(view_seed) & 0xFFFFFFFFFFFFFFFF, 0x5EED])
    return rng.standard_normal((n_points, dim))


def synthesize_view_features(scene, view_seed: int, noise: float,
                             indices=None, camera_pose: Optional[Pose] = None
                             ) -> ViewFeatureCloud:
    """Emulate a view-inconsistent 2D feature extractor on a labeled object.

    ``scene`` needs ``points``, ``normals``, ``regions`` (label per point) and
    ``base_features`` (one row per region). ``indices`` restricts the view to
    a subset of points (e.g. the ones visible from a camera).
    """
    pts = np.asarray(scene.points)
    base = np.asarray(scene.base_features)[np.asarray(scene.regions)]
    feats = base.copy()
    if noise != 0:
        feats = feats + noise * view_perturbation(view_seed, len(pts), base.shape[1])
    normals = None if scene.normals is None else np.asarray(scene.normals)
    if indices is not None:
        indices = np.asarray(indices, dtype=np.int64)
        pts, feats = pts[indices], feats[indices]
        normals = None if normals is None else normals[indices]
    cloud = PointCloud(pts, normals, view_id=int(view_seed) & 0xFFFFFFFF)
    return ViewFeatureCloud(cloud, feats, camera_pose or Pose())


def cross_view_dispersion(per_view_features: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of (1 - cosine) over all view pairs, per point.

    ``per_view_features`` holds one (M, D) array per view for the same M points.
    """
    stack = np.stack([np.asarray(f, dtype=np.float64) for f in per_view_features])
    unit = stack / np.linalg.norm(stack, axis=-1, keepdims=True)
    v = len(stack)
    if v < 2:
        return np.zeros(stack.shape[1])
    total = np.zeros(stack.shape[1])
    for a in range(v):
        for b in range(a + 1, v):
            total += 1.0 - np.sum(unit[a] * unit[b], axis=-1)
    return total / (v * (v - 1) / 2)
