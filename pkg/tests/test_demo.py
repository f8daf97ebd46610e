import json
import struct

import numpy as np
import pytest

from lensdff.demo import (
    DemoRecord, bundle_bytes, load_bundle, make_bundle, parse_bundle, retrieval_score, retrieve,
    save_bundle,
)
from lensdff.errors import CacheMismatch, DimensionMismatch, MalformedFile, NoDemoForPrimitive
from lensdff.features import DistilledCloud, LanguageFeature, grasp_feature
from lensdff.geometry import Pose, axis_angle_matrix
from lensdff.hand import Grasp, GraspPrimitive, default_hand

HAND = default_hand()


def _record(rid="r0", prim="hook", seed=0, d=6):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.05, 0.15, (300, 3))
    cloud = DistilledCloud(pts, rng.standard_normal((300, d)), np.tile([0.0, 0.0, 1.0], (300, 1)))
    g = Grasp(np.full(15, 0.3), Pose(axis_angle_matrix([0, 0, 1], 0.2), [0.01, 0.02, 0.0]))
    lan = LanguageFeature(rng.standard_normal(d), "demo")
    return DemoRecord.create(rid, f"prompt {rid}", lan, prim, g, cloud, HAND)


def _fake(rid, prim, mean_vec):
    """Record whose cached grasp feature averages to ``mean_vec``."""
    base = _record(rid, prim)
    feat = np.tile(np.asarray(mean_vec, dtype=float), (HAND.n_surface, 1))
    return DemoRecord(rid, base.prompt_text, base.f_lan_demo, GraspPrimitive.parse(prim),
                      base.g_gt, base.demo_cloud, feat)


def test_create_caches_grasp_feature_at_file_precision():
    rec = _record()
    want = grasp_feature(rec.demo_cloud, HAND.grasp_points(rec.g_gt))
    np.testing.assert_array_equal(rec.cached_grasp_feature, want)
    assert rec.cached_grasp_feature.shape == (128, 6)
    v = rec.g_gt.to_vector()
    np.testing.assert_array_equal(v, v.astype(np.float32).astype(np.float64))


def test_bundle_round_trip_byte_identical(tmp_path):
    bundle = make_bundle(HAND, [_record("a", "hook", 0), _record("b", "pinch", 1)])
    save_bundle(bundle, tmp_path / "x.demo")
    back = load_bundle(tmp_path / "x.demo")
    assert bundle_bytes(back) == bundle_bytes(bundle)
    assert [r.id for r in back.records] == ["a", "b"]
    np.testing.assert_array_equal(back.by_id("b").cached_grasp_feature,
                                  bundle.by_id("b").cached_grasp_feature)
    assert back.primitives() == {GraspPrimitive.parse("hook"), GraspPrimitive.parse("pinch")}


def _manifest(data):
    (n,) = struct.unpack("<I", data[4:8])
    return json.loads(data[8:8 + n]), data[8 + n:]


def _repack(manifest, payload):
    text = json.dumps(manifest).encode()
    return b"LDB1" + struct.pack("<I", len(text)) + text + payload


def test_tampered_cache_is_rejected():
    data = bundle_bytes(make_bundle(HAND, [_record()]))
    m, payload = _manifest(data)
    off = m["records"][0]["grasp_feature"]["offset"]
    payload = bytearray(payload)
    val = np.frombuffer(bytes(payload[off:off + 8]), "<f8")[0] + 1e-3
    payload[off:off + 8] = np.array([val], "<f8").tobytes()
    with pytest.raises(CacheMismatch):
        parse_bundle(_repack(m, bytes(payload)))
    # verification can be skipped
    parse_bundle(_repack(m, bytes(payload)), verify=False)


def test_cache_mismatch_on_changed_knn():
    m, payload = _manifest(bundle_bytes(make_bundle(HAND, [_record()])))
    m["knn_k"] = 3
    with pytest.raises(CacheMismatch):
        parse_bundle(_repack(m, payload))


@pytest.mark.parametrize("edit", [
    lambda m: m.update(version=2),
    lambda m: m.update(format="other"),
    lambda m: m["records"][0]["cloud"].update(offset=10**9),
    lambda m: m["records"][0].pop("grasp"),
])
def test_malformed_manifests(edit):
    m, payload = _manifest(bundle_bytes(make_bundle(HAND, [_record()])))
    edit(m)
    with pytest.raises(MalformedFile):
        parse_bundle(_repack(m, payload))


def test_bad_magic_and_truncation():
    data = bundle_bytes(make_bundle(HAND, [_record()]))
    with pytest.raises(MalformedFile):
        parse_bundle(b"XXXX" + data[4:])
    with pytest.raises(MalformedFile):
        parse_bundle(data[:20])


def test_bundle_invariants():
    with pytest.raises(ValueError):
        make_bundle(HAND, [_record("a"), _record("a", seed=1)])
    with pytest.raises(DimensionMismatch):
        make_bundle(HAND, [_record("a"), _record("b", d=4)])


# -- retrieval -------------------------------------------------------------

def test_retrieve_picks_higher_cosine():
    q = LanguageFeature(np.array([1.0, 0.0]), "test")
    good = _fake("b", "hook", [0.9, np.sqrt(1 - 0.81)])
    bad = _fake("a", "hook", [0.1, np.sqrt(1 - 0.01)])
    bundle = make_bundle(HAND, [bad, good])
    assert retrieval_score(good, q) == pytest.approx(0.9)
    assert retrieval_score(bad, q) == pytest.approx(0.1)
    assert retrieve(bundle, q, "hook").id == "b"
    # cosine ignores the query's scale
    assert retrieve(bundle, LanguageFeature(np.array([250.0, 0.0]), "test"), "hook").id == "b"


def test_retrieve_matches_brute_force():
    rng = np.random.default_rng(3)
    recs = [_fake(f"r{i}", "tripod", rng.standard_normal(5)) for i in range(8)]
    bundle = make_bundle(HAND, recs)
    for _ in range(20):
        q = rng.standard_normal(5)
        scores = [r.cached_grasp_feature.mean(0) @ q / np.linalg.norm(r.cached_grasp_feature.mean(0))
                  for r in recs]
        assert retrieve(bundle, LanguageFeature(q, "test"), "tripod").id == recs[int(np.argmax(scores))].id


def test_retrieve_filters_primitive_and_breaks_ties_by_id():
    q = LanguageFeature(np.array([1.0, 0.0]), "test")
    bundle = make_bundle(HAND, [_fake("z", "pinch", [1, 0]), _fake("b", "hook", [1, 0]),
                                _fake("a", "hook", [1, 0])])
    assert retrieve(bundle, q, "hook").id == "a"
    assert retrieve(bundle, q, "pinch").id == "z"
    with pytest.raises(NoDemoForPrimitive, match="hook, pinch"):
        retrieve(bundle, q, "lumbrical")


def test_max_reduction():
    rec = _fake("a", "hook", [1.0, 0.0])
    feat = rec.cached_grasp_feature.copy()
    feat[0] = [0.0, 5.0]
    rec = DemoRecord(rec.id, rec.prompt_text, rec.f_lan_demo, rec.primitive, rec.g_gt, rec.demo_cloud, feat)
    q = LanguageFeature(np.array([0.0, 1.0]), "test")
    assert retrieval_score(rec, q, "max") == pytest.approx(5 / np.sqrt(26))
    with pytest.raises(ValueError):
        retrieval_score(rec, q, "median")
