"""Binary feature-cloud files.

``.lfc`` (one view of raw vision features), little-endian::

    b"LFC1" | u32 point_count | u32 feature_dim | u32 view_id
    | f32 camera_pose[12]  (row-major 3x4 [R | t])
    | f32 xyz[point_count][3]
    | f32 feature[point_count][feature_dim]
    | u8 has_normals | f32 normal[point_count][3]  (only if has_normals)

``.ldc`` (distilled cloud) uses magic ``b"LDC1"`` and the same layout with
normals always present, followed by ``f32 language[feature_dim]`` and a
``u8`` source tag (0 demo, 1 test, 2 fused, 255 no language / raw fusion).
A missing view id is stored as 0xFFFFFFFF.

``.lgr`` (ranked grasps): ``b"LGR1" | u32 version | u32 count`` followed by
``count`` records of 24 f32 (hand joints, rot6d, translation), best first.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import MalformedFile
from .features import SOURCES, DistilledCloud, LanguageFeature, ViewFeatureCloud
from .geometry import Pose, PointCloud
from .hand import Grasp

LFC_MAGIC = b"LFC1"
LDC_MAGIC = b"LDC1"
LGR_MAGIC = b"LGR1"
LGR_VERSION = 1
_HEADER = struct.Struct("<4sIII12f")
_NO_VIEW = 0xFFFFFFFF
_NO_LANGUAGE = 255

_f32 = np.dtype("<f4")


def _pose_to_row(pose: Pose) -> list[float]:
    return np.hstack([pose.rotation, pose.translation[:, None]]).reshape(-1).tolist()


def _row_to_pose(row) -> Pose:
    m = np.asarray(row, dtype=np.float64).reshape(3, 4)
    return Pose(m[:, :3], m[:, 3])


class _Reader:
    def __init__(self, data: bytes, name: str):
        self.data = data
        self.pos = 0
        self.name = name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedFile(f"{self.name}: truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def floats(self, *shape: int) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.take(count * 4)
        return np.frombuffer(raw, dtype=_f32).astype(np.float64).reshape(shape)

    def u8(self) -> int:
        return self.take(1)[0]

    def finish(self):
        if self.pos != len(self.data):
            raise MalformedFile(f"{self.name}: {len(self.data) - self.pos} trailing bytes")


def _header(magic: bytes, n: int, d: int, view_id, pose: Pose) -> bytes:
    vid = _NO_VIEW if view_id is None else int(view_id)
    return _HEADER.pack(magic, n, d, vid, *_pose_to_row(pose))


def _read_header(r: _Reader, magic: bytes):
    head = _HEADER.unpack(r.take(_HEADER.size))
    if head[0] != magic:
        raise MalformedFile(f"{r.name}: bad magic {head[0]!r}, expected {magic!r}")
    n, d, vid = head[1], head[2], head[3]
    if d == 0:
        raise MalformedFile(f"{r.name}: feature dimension is zero")
    pose = _row_to_pose(head[4:])
    return n, d, (None if vid == _NO_VIEW else vid), pose


def feature_cloud_bytes(view: ViewFeatureCloud) -> bytes:
    buf = io.BytesIO()
    n, d = len(view.cloud), view.dim
    buf.write(_header(LFC_MAGIC, n, d, view.cloud.view_id, view.camera_pose))
    buf.write(view.cloud.points.astype(_f32).tobytes())
    buf.write(view.features.astype(_f32).tobytes())
    if view.cloud.normals is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        buf.write(view.cloud.normals.astype(_f32).tobytes())
    return buf.getvalue()


def parse_feature_cloud(data: bytes, name: str = "<bytes>") -> ViewFeatureCloud:
    r = _Reader(data, name)
    n, d, vid, pose = _read_header(r, LFC_MAGIC)
    pts = r.floats(n, 3)
    feats = r.floats(n, d)
    flag = r.u8()
    if flag not in (0, 1):
        raise MalformedFile(f"{name}: invalid normals flag {flag}")
    normals = r.floats(n, 3) if flag else None
    r.finish()
    try:
        cloud = PointCloud(pts, normals, vid)
    except Exception as exc:
        raise MalformedFile(f"{name}: {exc}") from exc
    return ViewFeatureCloud(cloud, feats, pose)


def save_feature_cloud(view: ViewFeatureCloud, path) -> None:
    Path(path).write_bytes(feature_cloud_bytes(view))


def load_feature_cloud(path) -> ViewFeatureCloud:
    path = Path(path)
    return parse_feature_cloud(path.read_bytes(), str(path))


def distilled_cloud_bytes(cloud: DistilledCloud) -> bytes:
    buf = io.BytesIO()
    n, d = len(cloud), cloud.dim
    buf.write(_header(LDC_MAGIC, n, d, None, Pose()))
    buf.write(cloud.points.astype(_f32).tobytes())
    buf.write(cloud.features.astype(_f32).tobytes())
    buf.write(b"\x01")
    buf.write(cloud.normals.astype(_f32).tobytes())
    if cloud.language is None:
        buf.write(np.zeros(d, dtype=_f32).tobytes())
        buf.write(bytes([_NO_LANGUAGE]))
    else:
        buf.write(cloud.language.feature.astype(_f32).tobytes())
        buf.write(bytes([SOURCES.index(cloud.language.source)]))
    return buf.getvalue()


def parse_distilled_cloud(data: bytes, name: str = "<bytes>") -> DistilledCloud:
    r = _Reader(data, name)
    n, d, _, _ = _read_header(r, LDC_MAGIC)
    pts = r.floats(n, 3)
    feats = r.floats(n, d)
    if r.u8() != 1:
        raise MalformedFile(f"{name}: distilled clouds must carry normals")
    normals = r.floats(n, 3)
    lan = r.floats(d)
    tag = r.u8()
    r.finish()
    if tag == _NO_LANGUAGE:
        language = None
    elif tag < len(SOURCES):
        try:
            language = LanguageFeature(lan, SOURCES[tag])
        except Exception as exc:
            raise MalformedFile(f"{name}: {exc}") from exc
    else:
        raise MalformedFile(f"{name}: unknown language tag {tag}")
    return DistilledCloud(pts, feats, normals, language)


def save_distilled_cloud(cloud: DistilledCloud, path) -> None:
    Path(path).write_bytes(distilled_cloud_bytes(cloud))


def load_distilled_cloud(path) -> DistilledCloud:
    path = Path(path)
    return parse_distilled_cloud(path.read_bytes(), str(path))


def grasps_bytes(grasps) -> bytes:
    rows = [g.to_vector() for g in grasps]
    body = np.asarray(rows, dtype=_f32).reshape(-1, 24)
    return LGR_MAGIC + struct.pack("<II", LGR_VERSION, len(rows)) + body.tobytes()


def parse_grasps(data: bytes, name: str = "<bytes>") -> list:
    r = _Reader(data, name)
    if r.take(4) != LGR_MAGIC:
        raise MalformedFile(f"{name}: not a grasp file")
    version, count = struct.unpack("<II", r.take(8))
    if version != LGR_VERSION:
        raise MalformedFile(f"{name}: unsupported grasp file version {version} "
                            f"(supported: {LGR_VERSION})")
    rows = r.floats(count, 24)
    r.finish()
    try:
        return [Grasp.from_vector(v) for v in rows]
    except Exception as exc:
        raise MalformedFile(f"{name}: {exc}") from exc


def save_grasps(grasps, path) -> None:
    Path(path).write_bytes(grasps_bytes(grasps))


def load_grasps(path) -> list:
    path = Path(path)
    return parse_grasps(path.read_bytes(), str(path))
