"""Rigid transforms, the 6D rotation parameterization and point-cloud helpers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation as _ScipyRotation

from .errors import DegenerateCloud, DegenerateInput, TooFewPoints

_DEGENERATE_NORM = 1e-9


def _as_vec3(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise DegenerateInput("vector has non-finite components")
    return arr


# ---------------------------------------------------------------------------
# 6D rotation representation
# ---------------------------------------------------------------------------

def rot6d_degenerate(r6) -> np.ndarray:
    """Mask of 6D inputs that :func:`rot6d_to_rotation` would reject."""
    r6 = np.asarray(r6, dtype=np.float64)
    finite = np.all(np.isfinite(r6), axis=-1)
    a1 = np.where(finite[..., None], r6[..., 0:3], 0.0)
    a2 = np.where(finite[..., None], r6[..., 3:6], 0.0)
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    e1 = a1 / np.where(n1 > 0, n1, 1.0)
    n2 = np.linalg.norm(a2 - np.sum(e1 * a2, axis=-1, keepdims=True) * e1, axis=-1)
    return ~finite | (n1[..., 0] < _DEGENERATE_NORM) | (n2 < _DEGENERATE_NORM)


def rot6d_to_rotation(r6) -> np.ndarray:
    """Map 6 numbers (two stacked 3-vectors) to a rotation by Gram-Schmidt.

    Accepts shape (6,) or (..., 6); returns (3, 3) or (..., 3, 3). The two
    halves are the would-be first and second columns of the matrix.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    a1 = r6[..., 0:3]
    a2 = r6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(~np.isfinite(r6)) or np.any(n1 < _DEGENERATE_NORM):
        raise DegenerateInput("first 6D column is zero or non-finite")
    e1 = a1 / n1
    b2 = a2 - np.sum(e1 * a2, axis=-1, keepdims=True) * e1
    n2 = np.linalg.norm(b2, axis=-1, keepdims=True)
    if np.any(n2 < _DEGENERATE_NORM):
        raise DegenerateInput("6D columns are collinear")
    e2 = b2 / n2
    e3 = np.cross(e1, e2)
    return np.stack([e1, e2, e3], axis=-1)


def rotation_to_rot6d(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def rot6d_backward(r6, grad_R) -> np.ndarray:
    """Pull a gradient w.r.t. the rotation matrix back onto the 6D input.

    ``grad_R[..., i, j]`` is dE/dR_ij. Shapes follow :func:`rot6d_to_rotation`.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    grad_R = np.asarray(grad_R, dtype=np.float64)
    a1, a2 = r6[..., 0:3], r6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    e1 = a1 / n1
    proj = np.sum(e1 * a2, axis=-1, keepdims=True)
    b2 = a2 - proj * e1
    n2 = np.linalg.norm(b2, axis=-1, keepdims=True)
    e2 = b2 / n2
    g1, g2, g3 = grad_R[..., :, 0], grad_R[..., :, 1], grad_R[..., :, 2]

    # e3 = e1 x e2
    ge1 = g1 + np.cross(e2, g3)
    ge2 = g2 + np.cross(g3, e1)
    # e2 = b2 / |b2|
    gb2 = (ge2 - np.sum(ge2 * e2, axis=-1, keepdims=True) * e2) / n2
    # b2 = a2 - <e1, a2> e1
    gb2_e1 = np.sum(gb2 * e1, axis=-1, keepdims=True)
    ga2 = gb2 - gb2_e1 * e1
    ge1 = ge1 - proj * gb2 - gb2_e1 * a2
    # e1 = a1 / |a1|
    ga1 = (ge1 - np.sum(ge1 * e1, axis=-1, keepdims=True) * e1) / n1
    return np.concatenate([ga1, ga2], axis=-1)


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotations from normalized Gaussian quaternions."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return _ScipyRotation.from_quat(q).as_matrix()


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    axis = _as_vec3(axis)
    axis = axis / np.linalg.norm(axis)
    return _ScipyRotation.from_rotvec(axis * angle).as_matrix()


def rotation_angle(R_a, R_b) -> float:
    """Geodesic angle between two rotations, radians."""
    c = (np.trace(np.asarray(R_a).T @ np.asarray(R_b)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(
        np.max(np.abs(R.T @ R - np.eye(3))) <= tol
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


# ---------------------------------------------------------------------------
# Poses and clouds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = _as_vec3(self.translation).copy()
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_rot6d(cls, r6, translation) -> "Pose":
        return cls(rot6d_to_rotation(r6), translation)

    @property
    def rot6d(self) -> np.ndarray:
        return rotation_to_rot6d(self.rotation)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    view_id: Optional[int] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise DegenerateInput("point cloud has non-finite coordinates")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise DegenerateInput("normals and points differ in count")
            if len(nrm) and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
                raise DegenerateInput("normals must be unit length")
            nrm.flags.writeable = False
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, pose: Pose) -> "PointCloud":
        normals = None if self.normals is None else self.normals @ pose.rotation.T
        return PointCloud(pose.apply(self.points), normals, self.view_id)


@dataclass(frozen=True)
class OrientedBox:
    center: np.ndarray
    axes: np.ndarray
    extents: np.ndarray

    @property
    def longest_axis(self) -> np.ndarray:
        return self.axes[:, 0]

    def contains(self, points, inflate: float = 0.0) -> np.ndarray:
        local = (np.asarray(points, dtype=np.float64) - self.center) @ self.axes
        return np.all(np.abs(local) <= self.extents / 2.0 + inflate, axis=-1)


# ---------------------------------------------------------------------------
# Nearest neighbors
# ---------------------------------------------------------------------------

class SpatialIndex:
    """k-NN and radius queries with deterministic tie-breaking.

    Results are ordered by ascending distance and, among equal distances, by
    ascending point index, so they coincide with an exhaustive scan. A k-d
    tree proposes candidates; distances are recomputed exactly and rows whose
    k-th and (k+1)-th candidates are within ``tie_tol`` are re-resolved from
    a radius query.
    """

    tie_tol = 1e-9

    def __init__(self, points):
        pts = np.array(points, dtype=np.float64).reshape(-1, 3)
        pts.flags.writeable = False
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def _exact(self, q: np.ndarray, idx: np.ndarray) -> np.ndarray:
        diff = self.points[idx] - q[..., None, :]
        return np.sqrt(np.sum(diff * diff, axis=-1))

    def query(self, queries, k: int):
        """Batched k-NN. Returns ``(indices, distances)`` of shape (Q, k)."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        m = len(self.points)
        if not 1 <= k <= m:
            raise ValueError(f"k={k} must lie in [1, {m}]")
        kk = min(k + 1, m)
        _, idx = self._tree.query(q, k=kk)
        idx = np.asarray(idx, dtype=np.int64).reshape(len(q), kk)
        dist = self._exact(q, idx)
        order = np.lexsort((idx, dist), axis=-1)
        idx = np.take_along_axis(idx, order, axis=-1)
        dist = np.take_along_axis(dist, order, axis=-1)
        if kk > k:
            gap = dist[:, k] - dist[:, k - 1]
            ambiguous = np.nonzero(gap <= self.tie_tol * (1.0 + dist[:, k - 1]))[0]
            for row in ambiguous:
                r = dist[row, k - 1] * (1.0 + 2 * self.tie_tol) + 2 * self.tie_tol
                cand = np.asarray(self._tree.query_ball_point(q[row], r), dtype=np.int64)
                d = self._exact(q[row], cand)
                o = np.lexsort((cand, d))[:k]
                idx[row, :k] = cand[o]
                dist[row, :k] = d[o]
        return idx[:, :k], dist[:, :k]

    def radius(self, query, r: float) -> list[tuple[int, float]]:
        q = _as_vec3(query)
        cand = np.asarray(self._tree.query_ball_point(q, r * (1.0 + 2 * self.tie_tol)),
                          dtype=np.int64)
        d = self._exact(q, cand)
        keep = d <= r
        cand, d = cand[keep], d[keep]
        o = np.lexsort((cand, d))
        return [(int(i), float(x)) for i, x in zip(cand[o], d[o])]


def knn(index: SpatialIndex, query, k: int) -> list[tuple[int, float]]:
    idx, dist = index.query(_as_vec3(query)[None, :], k)
    return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]


# ---------------------------------------------------------------------------
# Normals and bounding boxes
# ---------------------------------------------------------------------------

def estimate_normals(cloud: PointCloud, k: int = 16, viewpoint=(0.0, 0.0, 0.0)) -> PointCloud:
    """PCA normals over k neighbors, flipped to face ``viewpoint``."""
    if k < 3:
        raise ValueError("k must be at least 3")
    pts = cloud.points
    if len(pts) < k + 1:
        raise TooFewPoints(f"need at least {k + 1} points, got {len(pts)}")
    vp = _as_vec3(viewpoint)
    idx, _ = SpatialIndex(pts).query(pts, k + 1)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    facing = np.sum(normals * (vp - pts), axis=1)
    normals[facing < 0] *= -1.0
    return PointCloud(pts, normals, cloud.view_id)


def fit_obb(cloud: PointCloud) -> OrientedBox:
    """PCA-aligned box; axes ordered by descending extent, right-handed."""
    pts = cloud.points
    if len(pts) == 0 or len(np.unique(pts, axis=0)) < 2:
        raise DegenerateCloud("need at least two distinct points")
    mean = pts.mean(axis=0)
    centered = pts - mean
    _, vecs = np.linalg.eigh(centered.T @ centered)
    proj = centered @ vecs
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    ext = hi - lo
    order = np.argsort(-ext, kind="stable")
    axes = vecs[:, order]
    lo, hi, ext = lo[order], hi[order], ext[order]
    for c in range(2):
        # sign convention: largest-magnitude component positive
        if axes[np.argmax(np.abs(axes[:, c])), c] < 0:
            axes[:, c] *= -1.0
            lo[c], hi[c] = -hi[c], -lo[c]
    third = np.cross(axes[:, 0], axes[:, 1])
    if third @ axes[:, 2] < 0:
        lo[2], hi[2] = -hi[2], -lo[2]
    axes[:, 2] = third
    center = mean + axes @ ((lo + hi) / 2.0)
    ext = np.maximum(ext, 1e-9)
    return OrientedBox(center, axes, ext)
