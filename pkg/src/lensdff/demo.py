"""Demonstration bundles and language-driven demo retrieval.

Bundle file (``.demo``)::

    b"LDB1" | u32 manifest_length | manifest (UTF-8 JSON, sorted keys)
    | payload

The manifest carries the format version, the embedded hand description,
the grasp-feature settings and one entry per record with byte ranges into
the payload: an ``.ldc`` distilled cloud, 24 little-endian f32 for the
ground-truth grasp (hand joint order, then rot6d, then translation), the
f32 prompt language feature and the f64 cached grasp feature (N x D).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cloudio import distilled_cloud_bytes, parse_distilled_cloud
from .errors import CacheMismatch, DimensionMismatch, MalformedFile, NoDemoForPrimitive
from .features import DistilledCloud, LanguageFeature, grasp_feature
from .hand import Grasp, GraspPrimitive, HandModel, hand_from_description

BUNDLE_MAGIC = b"LDB1"
BUNDLE_FORMAT = "lensdff-demo"
BUNDLE_VERSION = 1
CACHE_TOL = 1e-6
REDUCTIONS = ("mean", "max")

_f32 = np.dtype("<f4")
_f64 = np.dtype("<f8")


def _quantize(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).astype(_f32).astype(np.float64)


@dataclass(frozen=True, eq=False)
class DemoRecord:
    id: str
    prompt_text: str
    f_lan_demo: LanguageFeature
    primitive: GraspPrimitive
    g_gt: Grasp
    demo_cloud: DistilledCloud
    cached_grasp_feature: np.ndarray

    @classmethod
    def create(cls, id: str, prompt_text: str, f_lan_demo: LanguageFeature, primitive,
               g_gt: Grasp, demo_cloud: DistilledCloud, hand: HandModel,
               k: int = 8, eps: float = 1e-6) -> "DemoRecord":
        """Build a record at file precision and compute its grasp-feature cache."""
        lan = LanguageFeature(_quantize(f_lan_demo.feature), f_lan_demo.source)
        cloud = parse_distilled_cloud(distilled_cloud_bytes(demo_cloud))
        grasp = Grasp.from_vector(_quantize(g_gt.to_vector()))
        feat = grasp_feature(cloud, hand.grasp_points(grasp), k, eps)
        return cls(id, prompt_text, lan, GraspPrimitive.parse(primitive), grasp, cloud, feat)


@dataclass(eq=False)
class DemoBundle:
    hand: HandModel
    records: list = field(default_factory=list)
    knn_k: int = 8
    eps: float = 1e-6
    format_version: int = BUNDLE_VERSION

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("demo record ids must be unique")
        dims = {r.demo_cloud.dim for r in self.records}
        if len(dims) > 1:
            raise DimensionMismatch(f"records disagree on feature dimension: {sorted(dims)}")

    def by_id(self, rid: str) -> DemoRecord:
        for r in self.records:
            if r.id == rid:
                return r
        raise KeyError(rid)

    def primitives(self) -> set:
        return {r.primitive for r in self.records}


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------

def reduce_blocks(grasp_feat: np.ndarray, how: str = "mean") -> np.ndarray:
    if how == "mean":
        return grasp_feat.mean(axis=0)
    if how == "max":
        return grasp_feat.max(axis=0)
    raise ValueError(f"reduction must be one of {REDUCTIONS}")


def retrieval_score(record: DemoRecord, f_lan_test, how: str = "mean") -> float:
    v = reduce_blocks(record.cached_grasp_feature, how)
    q = f_lan_test.feature if isinstance(f_lan_test, LanguageFeature) else np.asarray(f_lan_test)
    nv = np.linalg.norm(v)
    if nv == 0:
        return -np.inf
    return float(v @ q / (nv * np.linalg.norm(q)))


def retrieve(bundle: DemoBundle, f_lan_test: LanguageFeature, primitive,
             reduce: str = "mean") -> DemoRecord:
    """Record of ``primitive`` whose grasp feature is most cosine-similar to the query."""
    primitive = GraspPrimitive.parse(primitive)
    cands = sorted((r for r in bundle.records if r.primitive == primitive), key=lambda r: r.id)
    if not cands:
        have = ", ".join(sorted(p.value for p in bundle.primitives())) or "none"
        raise NoDemoForPrimitive(f"no demo for primitive {primitive.value!r} (have: {have})")
    best, best_score = cands[0], retrieval_score(cands[0], f_lan_test, reduce)
    for r in cands[1:]:
        s = retrieval_score(r, f_lan_test, reduce)
        if s > best_score:
            best, best_score = r, s
    return best


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def bundle_bytes(bundle: DemoBundle) -> bytes:
    payload = bytearray()

    def put(data: bytes) -> dict:
        entry = {"offset": len(payload), "length": len(data)}
        payload.extend(data)
        return entry

    entries = []
    for r in bundle.records:
        entries.append({
            "id": r.id,
            "prompt": r.prompt_text,
            "primitive": r.primitive.value,
            "language_source": r.f_lan_demo.source,
            "cloud": put(distilled_cloud_bytes(r.demo_cloud)),
            "grasp": put(r.g_gt.to_vector().astype(_f32).tobytes()),
            "language": put(r.f_lan_demo.feature.astype(_f32).tobytes()),
            "grasp_feature": dict(put(r.cached_grasp_feature.astype(_f64).tobytes()),
                                  shape=list(r.cached_grasp_feature.shape)),
        })
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": bundle.format_version,
        "hand": bundle.hand.description,
        "knn_k": bundle.knn_k,
        "eps": bundle.eps,
        "records": entries,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return BUNDLE_MAGIC + struct.pack("<I", len(text)) + text + bytes(payload)


def save_bundle(bundle: DemoBundle, path) -> None:
    Path(path).write_bytes(bundle_bytes(bundle))


def _slice(payload: bytes, entry: dict, name: str) -> bytes:
    off, n = int(entry["offset"]), int(entry["length"])
    if off < 0 or n < 0 or off + n > len(payload):
        raise MalformedFile(f"{name}: payload range out of bounds")
    return payload[off:off + n]


def parse_bundle(data: bytes, name: str = "<bytes>", verify: bool = True) -> DemoBundle:
    if data[:4] != BUNDLE_MAGIC:
        raise MalformedFile(f"{name}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise MalformedFile(f"{name}: truncated header")
    (mlen,) = struct.unpack("<I", data[4:8])
    if 8 + mlen > len(data):
        raise MalformedFile(f"{name}: truncated manifest")
    try:
        manifest = json.loads(data[8:8 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"{name}: manifest is not JSON: {exc}") from exc
    payload = data[8 + mlen:]
    if manifest.get("format") != BUNDLE_FORMAT:
        raise MalformedFile(f"{name}: not a demo bundle")
    if manifest.get("version") != BUNDLE_VERSION:
        raise MalformedFile(
            f"{name}: unsupported bundle version {manifest.get('version')!r} "
            f"(supported: {BUNDLE_VERSION})")
    try:
        hand = hand_from_description(manifest["hand"])
        k, eps = int(manifest["knn_k"]), float(manifest["eps"])
        records = []
        for e in manifest["records"]:
            rid = e["id"]
            cloud = parse_distilled_cloud(_slice(payload, e["cloud"], rid), f"{name}:{rid}")
            gv = np.frombuffer(_slice(payload, e["grasp"], rid), dtype=_f32)
            if gv.size != 24:
                raise MalformedFile(f"{name}:{rid}: grasp record must hold 24 floats")
            lan = np.frombuffer(_slice(payload, e["language"], rid), dtype=_f32)
            shape = tuple(int(v) for v in e["grasp_feature"]["shape"])
            gf_raw = _slice(payload, e["grasp_feature"], rid)
            if len(gf_raw) != 8 * int(np.prod(shape)):
                raise MalformedFile(f"{name}:{rid}: grasp feature size mismatch")
            gf = np.frombuffer(gf_raw, dtype=_f64).reshape(shape).astype(np.float64)
            rec = DemoRecord(rid, e["prompt"],
                             LanguageFeature(lan.astype(np.float64), e["language_source"]),
                             GraspPrimitive.parse(e["primitive"]),
                             Grasp.from_vector(gv.astype(np.float64)), cloud, gf)
            if verify:
                check_cache(rec, hand, k, eps)
            records.append(rec)
        return DemoBundle(hand, records, k, eps, manifest["version"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFile(f"{name}: {exc}") from exc


def check_cache(rec: DemoRecord, hand: HandModel, k: int, eps: float) -> None:
    expect = grasp_feature(rec.demo_cloud, hand.grasp_points(rec.g_gt), k, eps)
    if expect.shape != rec.cached_grasp_feature.shape:
        raise CacheMismatch(f"record {rec.id}: cached grasp feature has wrong shape")
    err = float(np.max(np.abs(expect - rec.cached_grasp_feature))) if expect.size else 0.0
    if err > CACHE_TOL:
        raise CacheMismatch(f"record {rec.id}: cached grasp feature off by {err:.3g}")


def load_bundle(path, verify: bool = True) -> DemoBundle:
    path = Path(path)
    return parse_bundle(path.read_bytes(), str(path), verify)


def make_bundle(hand: HandModel, records: Sequence[DemoRecord], knn_k: int = 8,
                eps: float = 1e-6) -> DemoBundle:
    return DemoBundle(hand, list(records), knn_k, eps)
