"""Contact-count proxy for grasp stability.

No physics: a grasp counts as successful when fingertips on at least three
distinct fingers touch the object and the palm does not sink into it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import EmptyCloud
from ..geometry import PointCloud, SpatialIndex
from ..hand import EigengraspMap, Grasp, HandModel

CONTACT_DELTA = 0.005
PENETRATION_MARGIN = 0.01


@dataclass
class StabilityReport:
    contact_count: int
    min_clearance: float
    success: bool
    contact_fingers: list = field(default_factory=list)
    palm_penetration: float = 0.0
    fingertip_distances: Optional[np.ndarray] = None

    def as_dict(self) -> dict:
        return {
            "contact_count": self.contact_count,
            "min_clearance": self.min_clearance,
            "success": self.success,
            "contact_fingers": list(self.contact_fingers),
            "palm_penetration": self.palm_penetration,
        }


def outward_normals(cloud: PointCloud, k: int = 16) -> np.ndarray:
    """Cloud normals, or PCA normals pointed away from the centroid."""
    if cloud.normals is not None:
        return cloud.normals
    from ..geometry import estimate_normals
    center = cloud.points.mean(axis=0)
    n = estimate_normals(cloud, min(k, len(cloud) - 1), center).normals
    return -n


class ObjectProbe:
    """Distance and signed-depth queries against an object cloud."""

    def __init__(self, cloud: PointCloud):
        if len(cloud) == 0:
            raise EmptyCloud("object cloud is empty")
        self.cloud = cloud
        self.normals = outward_normals(cloud)
        self.index = SpatialIndex(cloud.points)

    def query(self, points):
        pts = np.asarray(points, dtype=np.float64)
        shape = pts.shape[:-1]
        idx, dist = self.index.query(pts.reshape(-1, 3), 1)
        idx, dist = idx[:, 0], dist[:, 0]
        signed = np.sum((pts.reshape(-1, 3) - self.cloud.points[idx]) * self.normals[idx], axis=1)
        return dist.reshape(shape), signed.reshape(shape)


def evaluate_points(hand: HandModel, pts: np.ndarray, probe: ObjectProbe,
                    contact_delta: float, penetration_margin: float) -> StabilityReport:
    dist, signed = probe.query(pts)
    tip = hand.fingertip
    fingers = sorted({int(f) for f in hand.surface_finger[tip & (dist <= contact_delta)]})
    palm = hand.palm_mask
    palm_depth = float(max(0.0, -signed[palm].min())) if np.any(palm) else 0.0
    penetrating = bool(np.any(palm) and signed[palm].min() < -penetration_margin)
    success = len(fingers) >= 3 and not penetrating
    return StabilityReport(
        contact_count=len(fingers),
        min_clearance=float(np.min(np.where(signed < 0, signed, dist))),
        success=success,
        contact_fingers=fingers,
        palm_penetration=palm_depth,
        fingertip_distances=dist[tip],
    )


def contact_check(grasp: Grasp, hand: HandModel, object_cloud: PointCloud,
                  contact_delta: float = CONTACT_DELTA,
                  penetration_margin: float = PENETRATION_MARGIN,
                  probe: Optional[ObjectProbe] = None) -> StabilityReport:
    """Count fingers touching the object and test the palm for penetration.

    ``contact_count`` is the number of distinct fingers with a fingertip
    point within ``contact_delta`` of the cloud. ``min_clearance`` is the
    smallest hand-to-object distance, negative when some point is inside.
    """
    probe = probe or ObjectProbe(object_cloud)
    pts = hand.grasp_points(grasp)
    return evaluate_points(hand, pts, probe, contact_delta, penetration_margin)


def close_fingers(grasp: Grasp, hand: HandModel, emap: EigengraspMap,
                  object_cloud: PointCloud, contact_delta: float = CONTACT_DELTA,
                  steps: int = 64, probe: Optional[ObjectProbe] = None) -> Grasp:
    """Execute a grasp: drive each active finger along its synergy until it touches.

    Every finger advances independently from its current joints toward the
    synergy's far limit and stops at the first step where a fingertip is
    within ``contact_delta`` of the object or any of its points is inside.
    """
    probe = probe or ObjectProbe(object_cloud)
    joints = np.array(grasp.joints)
    W = emap.expansion
    finger_of_joint = np.arange(15) // 3
    for f in range(len(hand.fingers)):
        rows = (finger_of_joint == f) & emap.active
        if not np.any(rows):
            continue
        col = int(np.argmax(np.abs(W[rows]).sum(axis=0)))
        direction = np.where(rows, W[:, col], 0.0)
        # largest step along direction before any of this finger's joints leaves its limits
        with np.errstate(divide="ignore", invalid="ignore"):
            room = np.where(direction > 0, (hand.upper - joints) / direction,
                            np.where(direction < 0, (hand.lower - joints) / direction, np.inf))
        span = float(np.min(room[rows]))
        if not span > 0:
            continue
        ts = np.linspace(0.0, span, steps + 1)[1:]
        cand = joints[None, :] + ts[:, None] * direction[None, :]
        local, _ = hand.local_points_and_jacobian(cand, jacobian=False)
        sel = hand.surface_finger == f
        world = grasp.palm.apply(local[:, sel])
        dist, signed = probe.query(world)
        tip = hand.fingertip[sel]
        stop = np.any(dist[:, tip] <= contact_delta, axis=1) | np.any(signed < 0, axis=1)
        hit = np.nonzero(stop)[0]
        t = ts[hit[0]] if len(hit) else ts[-1]
        joints = np.where(rows, joints + t * direction, joints)
    joints = hand.clamp(joints)
    return Grasp(joints, grasp.palm, grasp.rot6d)
