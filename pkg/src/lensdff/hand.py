"""Five-finger, 15-joint hand: surface-point kinematics and eigengrasp maps.

Joint order is ``[thumb, index, middle, ring, little] x [abduction,
proximal flexion, distal flexion]``; joint ``j`` of finger ``f`` lives at
index ``3 * f + j``. A full grasp packs into 24 numbers as
``joints[15] | rot6d[6] | translation[3]``.

The palm frame sits at the palm center with +x pointing out of the palm
(the approach direction), fingers extending along +z and spread along y.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import MalformedFile
from .geometry import Pose, rot6d_to_rotation, rotation_to_rot6d

FINGERS = ("thumb", "index", "middle", "ring", "little")
JOINT_KINDS = ("abduction", "proximal", "distal")
N_JOINTS = 15
HAND_FORMAT = "lensdff-hand"
HAND_VERSION = 1


class GraspPrimitive(str, enum.Enum):
    HOOK = "hook"
    CYLINDRICAL = "cylindrical"
    PINCH = "pinch"
    TRIPOD = "tripod"
    LUMBRICAL = "lumbrical"

    @classmethod
    def parse(cls, name) -> "GraspPrimitive":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            valid = ", ".join(p.value for p in cls)
            raise ValueError(f"unknown primitive {name!r}; valid: {valid}") from None


def joint_index(finger: str, kind: str) -> int:
    return 3 * FINGERS.index(finger) + JOINT_KINDS.index(kind)


# ---------------------------------------------------------------------------
# Grasp containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grasp:
    """Joint vector plus palm pose.

    ``rot6d`` keeps the 6D rotation exactly as supplied (it may be
    unnormalized), so the 24-number form round-trips bit for bit.
    """

    joints: np.ndarray
    palm: Pose
    rot6d: Optional[np.ndarray] = None

    def __post_init__(self):
        j = np.array(self.joints, dtype=np.float64).reshape(N_JOINTS)
        j.flags.writeable = False
        object.__setattr__(self, "joints", j)
        r6 = self.palm.rot6d if self.rot6d is None else self.rot6d
        r6 = np.array(r6, dtype=np.float64).reshape(6)
        r6.flags.writeable = False
        object.__setattr__(self, "rot6d", r6)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.joints, self.rot6d, self.palm.translation])

    @classmethod
    def from_vector(cls, v) -> "Grasp":
        v = np.asarray(v, dtype=np.float64).reshape(24)
        return cls(v[:15], Pose(rot6d_to_rotation(v[15:21]), v[21:24]), v[15:21])

    def __eq__(self, other):
        if not isinstance(other, Grasp):
            return NotImplemented
        return bool(np.array_equal(self.to_vector(), other.to_vector()))

    __hash__ = None


@dataclass(frozen=True)
class ReducedGrasp:
    translation: np.ndarray
    rotation: np.ndarray
    synergy: np.ndarray

    def __post_init__(self):
        for name, size in (("translation", 3), ("rotation", 6)):
            a = np.array(getattr(self, name), dtype=np.float64).reshape(size)
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        s = np.array(self.synergy, dtype=np.float64).reshape(-1)
        s.flags.writeable = False
        object.__setattr__(self, "synergy", s)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.translation, self.rotation, self.synergy])

    @classmethod
    def from_vector(cls, v) -> "ReducedGrasp":
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        return cls(v[0:3], v[3:9], v[9:])

    @property
    def pose(self) -> Pose:
        return Pose(rot6d_to_rotation(self.rotation), self.translation)


# ---------------------------------------------------------------------------
# Eigengrasps
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EigengraspMap:
    primitive: GraspPrimitive
    expansion: np.ndarray   # (15, k)
    rest: np.ndarray        # (15,)
    active: np.ndarray      # (15,) bool

    def __post_init__(self):
        W = np.array(self.expansion, dtype=np.float64)
        if W.ndim == 1:
            W = W[:, None]
        rest = np.array(self.rest, dtype=np.float64).reshape(N_JOINTS)
        active = np.array(self.active, dtype=bool).reshape(N_JOINTS)
        if W.shape[0] != N_JOINTS or W.shape[1] < 1:
            raise ValueError(f"expansion matrix must be 15 x k, got {W.shape}")
        if np.any(W[~active] != 0):
            raise ValueError("inactive rows of the expansion matrix must be zero")
        support = W != 0
        if np.any(support.sum(axis=1) > 1):
            raise ValueError("synergy columns must have disjoint support")
        if np.linalg.matrix_rank(W) != W.shape[1]:
            raise ValueError("expansion matrix must have full column rank")
        for a in (W, rest, active):
            a.flags.writeable = False
        object.__setattr__(self, "primitive", GraspPrimitive.parse(self.primitive))
        object.__setattr__(self, "expansion", W)
        object.__setattr__(self, "rest", rest)
        object.__setattr__(self, "active", active)

    @property
    def synergy_dim(self) -> int:
        return self.expansion.shape[1]

    def expand_raw(self, synergy) -> np.ndarray:
        """Unclamped joint vector(s) for synergy of shape (k,) or (S, k)."""
        s = np.asarray(synergy, dtype=np.float64)
        return self.rest + s @ self.expansion.T

    def synergy_bounds(self, lower, upper) -> tuple[np.ndarray, np.ndarray]:
        """Per-coefficient interval keeping every active joint inside its limits."""
        lo = np.full(self.synergy_dim, -np.inf)
        hi = np.full(self.synergy_dim, np.inf)
        for c in range(self.synergy_dim):
            col = self.expansion[:, c]
            for row in np.nonzero(col)[0]:
                a = (lower[row] - self.rest[row]) / col[row]
                b = (upper[row] - self.rest[row]) / col[row]
                lo[c] = max(lo[c], min(a, b))
                hi[c] = min(hi[c], max(a, b))
        return lo, hi


def clamp_joints(joints, lower, upper) -> np.ndarray:
    return np.minimum(np.maximum(np.asarray(joints, dtype=np.float64), lower), upper)


def eigen_expand(g_p: ReducedGrasp, emap: EigengraspMap, lower, upper) -> Grasp:
    if len(g_p.synergy) != emap.synergy_dim:
        raise ValueError(
            f"synergy has {len(g_p.synergy)} entries, map expects {emap.synergy_dim}")
    joints = clamp_joints(emap.expand_raw(g_p.synergy), lower, upper)
    # keep frozen joints bit-exact even if rest lies outside the limits
    joints = np.where(emap.active, joints, emap.rest)
    return Grasp(joints, g_p.pose, g_p.rotation)


def eigen_project(g: Grasp, emap: EigengraspMap) -> ReducedGrasp:
    """Least-squares synergy for the active joints of ``g``."""
    A = emap.expansion[emap.active]
    b = (g.joints - emap.rest)[emap.active]
    synergy = np.linalg.pinv(A) @ b
    return ReducedGrasp(g.palm.translation, g.rot6d, synergy)


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

def _rodrigues(axis: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Rotations about a fixed unit ``axis`` by angles ``theta`` (S,) -> (S, 3, 3)."""
    x, y, z = axis
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    s = np.sin(theta)[:, None, None]
    c = np.cos(theta)[:, None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # np.cross carries enough per-call overhead to dominate small batches
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


@dataclass(frozen=True, eq=False)
class Finger:
    name: str
    base_position: np.ndarray
    base_rotation: np.ndarray
    joint_axes: np.ndarray     # (3, 3), row i = axis of joint i in its parent frame
    link_lengths: np.ndarray   # (2,) proximal, distal


@dataclass(frozen=True, eq=False)
class HandModel:
    fingers: tuple
    lower: np.ndarray
    upper: np.ndarray
    rest: np.ndarray
    surface_finger: np.ndarray   # (N,) finger index, -1 for palm
    surface_segment: np.ndarray  # (N,) 0 palm, 1 proximal, 2 distal
    surface_local: np.ndarray    # (N, 3) coordinates in the owning link frame
    fingertip: np.ndarray        # (N,) bool
    primitives: dict
    name: str = "hand"
    description: Optional[dict] = None

    @property
    def n_surface(self) -> int:
        return len(self.surface_local)

    @property
    def palm_mask(self) -> np.ndarray:
        return self.surface_finger < 0

    def eigengrasp(self, primitive) -> EigengraspMap:
        return self.primitives[GraspPrimitive.parse(primitive)]

    def clamp(self, joints) -> np.ndarray:
        return clamp_joints(joints, self.lower, self.upper)

    def local_points(self, joints) -> np.ndarray:
        pts, _ = self.local_points_and_jacobian(np.atleast_2d(joints), jacobian=False)
        return pts[0] if np.ndim(joints) == 1 else pts

    def local_points_and_jacobian(self, joints, jacobian: bool = True):
        """Surface points in the palm frame for a batch of joint vectors.

        Returns ``(points, jac)`` with points of shape (S, N, 3) and, when
        requested, ``jac`` of shape (S, N, 15, 3) holding d point / d joint.
        """
        J = np.asarray(joints, dtype=np.float64).reshape(-1, N_JOINTS)
        S, N = len(J), self.n_surface
        pts = np.empty((S, N, 3))
        jac = np.zeros((S, N, N_JOINTS, 3)) if jacobian else None
        palm = self.palm_mask
        pts[:, palm] = self.surface_local[palm]
        for f, finger in enumerate(self.fingers):
            th = J[:, 3 * f:3 * f + 3]
            R0 = np.broadcast_to(finger.base_rotation, (S, 3, 3))
            o0 = finger.base_position
            R1 = R0 @ _rodrigues(finger.joint_axes[0], th[:, 0])
            R2 = R1 @ _rodrigues(finger.joint_axes[1], th[:, 1])
            o2 = o0 + R2[:, :, 2] * finger.link_lengths[0]
            R3 = R2 @ _rodrigues(finger.joint_axes[2], th[:, 2])
            omegas = (R0 @ finger.joint_axes[0], R1 @ finger.joint_axes[1],
                      R2 @ finger.joint_axes[2])
            for seg, R, o, n_up in ((1, R2, o0, 2), (2, R3, o2, 3)):
                sel = (self.surface_finger == f) & (self.surface_segment == seg)
                if not np.any(sel):
                    continue
                p = o[..., None, :] + np.einsum("sij,nj->sni", R, self.surface_local[sel])
                pts[:, sel] = p
                if jacobian:
                    origins = (o0, o0, o2)
                    for i in range(n_up):
                        w = omegas[i]
                        oi = np.broadcast_to(origins[i], (S, 3))
                        jac[:, sel, 3 * f + i] = _cross(w[:, None, :], p - oi[:, None, :])
        return pts, jac

    def forward_kinematics(self, palm: Pose, joints) -> np.ndarray:
        """Surface points in the world frame, shape (N, 3)."""
        return palm.apply(self.local_points(np.asarray(joints, dtype=np.float64)))

    def grasp_points(self, grasp: Grasp) -> np.ndarray:
        return self.forward_kinematics(grasp.palm, grasp.joints)


def forward_kinematics(hand: HandModel, palm: Pose, joints) -> np.ndarray:
    return hand.forward_kinematics(palm, joints)


# ---------------------------------------------------------------------------
# Hand-description files
# ---------------------------------------------------------------------------

def _rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _link_points(n: int, length: float, radius: float, start: float):
    """Points on the palmar half of a finger link, local +x facing the palm side."""
    out = []
    angles = (0.0, 0.9, -0.9)
    for i, s in enumerate(np.linspace(start * length, length, n)):
        phi = angles[i % 3]
        out.append([radius * np.cos(phi), radius * np.sin(phi), float(s)])
    return out


def default_hand_description() -> dict:
    """Anthropomorphic 5 x 3-DOF hand roughly at human scale."""
    prox, dist = 0.05, 0.04
    flex_hi = 1.57
    abd = 0.26
    radius = 0.008
    bases = {
        "thumb": ([0.0, 0.03, -0.045], _rot_x(np.pi)),
        "index": ([0.0, 0.027, 0.045], np.eye(3)),
        "middle": ([0.0, 0.009, 0.045], np.eye(3)),
        "ring": ([0.0, -0.009, 0.045], np.eye(3)),
        "little": ([0.0, -0.027, 0.045], np.eye(3)),
    }
    fingers = []
    for name in FINGERS:
        pos, rot = bases[name]
        fingers.append({
            "name": name,
            "base_position": [float(v) for v in pos],
            "base_rotation": np.round(rot, 12).tolist(),
            "joint_axes": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
            "link_lengths": [prox, dist],
            "lower": [-abd, 0.0, 0.0],
            "upper": [abd, flex_hi, flex_hi],
        })

    surface = []
    for y in (-0.03, -0.01, 0.01, 0.03):
        for z in (-0.03, -0.01, 0.01, 0.03):
            surface.append({"finger": "palm", "segment": "palm",
                            "local": [0.0, y, z], "fingertip": False})
    for name in FINGERS:
        n_link = 12 if name == "thumb" else 11
        for seg, length, start in (("proximal", prox, 0.1), ("distal", dist, 0.1)):
            for p in _link_points(n_link, length, radius, start):
                tip = seg == "distal" and p[2] >= 0.7 * length - 1e-12
                surface.append({"finger": name, "segment": seg,
                                "local": [round(v, 12) for v in p], "fingertip": tip})

    def rows(*pairs):
        return [joint_index(f, k) for f in pairs[0] for k in pairs[1]]

    flex = ("proximal", "distal")
    active_rows = {
        "pinch": rows(("thumb", "index"), flex),
        "tripod": rows(("thumb", "index", "middle"), flex),
        "cylindrical": rows(FINGERS, flex),
        "hook": rows(("index", "middle", "ring", "little"), flex),
        "lumbrical": rows(FINGERS, ("proximal",)),
    }
    primitives = {}
    for prim, act in active_rows.items():
        col = [1.0 if i in act else 0.0 for i in range(N_JOINTS)]
        primitives[prim] = {
            "columns": [col],
            "rest": [0.0] * N_JOINTS,
            "active": [i in act for i in range(N_JOINTS)],
        }
    return {
        "format": HAND_FORMAT,
        "version": HAND_VERSION,
        "name": "default-anthropomorphic-15dof",
        "units": {"length": "m", "angle": "rad"},
        "joint_order": [f"{f}.{k}" for f in FINGERS for k in JOINT_KINDS],
        "rest": [0.0] * N_JOINTS,
        "fingers": fingers,
        "surface_points": surface,
        "primitives": primitives,
    }


def hand_from_description(desc: dict) -> HandModel:
    try:
        if desc.get("format") != HAND_FORMAT or desc.get("version") != HAND_VERSION:
            raise MalformedFile(
                f"unsupported hand description {desc.get('format')!r} v{desc.get('version')!r}")
        names = [f["name"] for f in desc["fingers"]]
        if names != list(FINGERS):
            raise MalformedFile(f"fingers must be {FINGERS}, got {names}")
        fingers = []
        lower, upper = [], []
        for f in desc["fingers"]:
            axes = np.asarray(f["joint_axes"], dtype=np.float64).reshape(3, 3)
            axes = axes / np.linalg.norm(axes, axis=1, keepdims=True)
            fingers.append(Finger(
                f["name"],
                np.asarray(f["base_position"], dtype=np.float64).reshape(3),
                np.asarray(f["base_rotation"], dtype=np.float64).reshape(3, 3),
                axes,
                np.asarray(f["link_lengths"], dtype=np.float64).reshape(2),
            ))
            lower.extend(f["lower"])
            upper.extend(f["upper"])
        lower = np.asarray(lower, dtype=np.float64)
        upper = np.asarray(upper, dtype=np.float64)
        if lower.shape != (N_JOINTS,) or np.any(lower >= upper):
            raise MalformedFile("joint limits must satisfy lower < upper for 15 joints")
        seg_codes = {"palm": 0, "proximal": 1, "distal": 2}
        sp = desc["surface_points"]
        if not sp:
            raise MalformedFile("hand needs at least one surface point")
        surface_finger = np.array(
            [-1 if p["finger"] == "palm" else FINGERS.index(p["finger"]) for p in sp])
        surface_segment = np.array([seg_codes[p["segment"]] for p in sp])
        if np.any((surface_finger < 0) != (surface_segment == 0)):
            raise MalformedFile("palm points must use the palm segment")
        surface_local = np.asarray([p["local"] for p in sp], dtype=np.float64)
        fingertip = np.array([bool(p.get("fingertip", False)) for p in sp])
        primitives = {}
        for name, spec in desc["primitives"].items():
            prim = GraspPrimitive.parse(name)
            W = np.asarray(spec["columns"], dtype=np.float64).T
            primitives[prim] = EigengraspMap(prim, W, spec["rest"], spec["active"])
        missing = set(GraspPrimitive) - set(primitives)
        if missing:
            raise MalformedFile(f"missing primitives: {sorted(p.value for p in missing)}")
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFile(f"invalid hand description: {exc}") from exc
    return HandModel(
        fingers=tuple(fingers), lower=lower, upper=upper,
        rest=np.asarray(desc["rest"], dtype=np.float64).reshape(N_JOINTS),
        surface_finger=surface_finger, surface_segment=surface_segment,
        surface_local=surface_local, fingertip=fingertip, primitives=primitives,
        name=desc.get("name", "hand"), description=desc,
    )


def load_hand(path=None) -> HandModel:
    """Load a ``.hand.json`` file; ``None`` loads the bundled default hand."""
    if path is None:
        text = resources.files("lensdff.data").joinpath("default.hand.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        desc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"hand description is not JSON: {exc}") from exc
    return hand_from_description(desc)


def default_hand() -> HandModel:
    return load_hand(None)


def rest_grasp(hand: HandModel, palm: Optional[Pose] = None) -> Grasp:
    return Grasp(hand.rest, palm or Pose())


def reduced_from_pose(palm: Pose, synergy) -> ReducedGrasp:
    return ReducedGrasp(palm.translation, rotation_to_rot6d(palm.rotation), synergy)
