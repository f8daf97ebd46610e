"""Acceptance suite: one test per criterion, each printing a single pass/fail line."""

import time
from dataclasses import replace
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from lensdff.config import benchmark_config
from lensdff.demo import DemoRecord, make_bundle, retrieve
from lensdff.errors import NoDemoForPrimitive
from lensdff.eval.ablation import run_ablation
from lensdff.eval.planted import make_planted
from lensdff.eval.scenes import SceneConfig, make_scene, make_scenes, visible
from lensdff.features import (
    TAU, DistilledCloud, LanguageFeature, cosine, cross_view_dispersion, enhance_coefficients,
    gate_language, grasp_feature, language_enhance,
)
from lensdff.geometry import PointCloud, Pose, fit_obb, random_rotations, rotation_angle
from lensdff.hand import (
    Grasp, GraspPrimitive, ReducedGrasp, default_hand, eigen_expand, eigen_project, reduced_from_pose,
)
from lensdff.optimizer import GraspEnergy, OptimConfig, descend, optimize_batch
from lensdff.sampler import SamplerConfig, sample_palm_poses

HAND = default_hand()
PRIMS = [p.value for p in GraspPrimitive]


def verdict(n, ok, detail):
    print(f"\nAC{n:02d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {n}: {detail}"


def _brute_grasp_feature(points, feats, queries, k, eps):
    out = []
    for q in queries:
        d = np.sqrt(np.sum((points - q) ** 2, axis=1))
        order = np.lexsort((np.arange(len(points)), d))[:k]
        w = 1.0 / (d[order] ** 2 + eps)
        out.append((w / w.sum()) @ feats[order])
    return np.array(out)


# 1 ------------------------------------------------------------------------

def test_ac01_enhancement_exactness():
    t0 = time.perf_counter()
    f = np.array([0.3, -1.2, 0.5, 2.0])
    want = {1.0: 0.7310586, 0.0: 0.5, -1.0: 0.2689414, 2.0: 0.8807971}
    ortho = np.array([1.2, 0.3, 0.0, 0.0])
    ortho -= (ortho @ f) / (f @ f) * f
    worst = 0.0
    for scale, coef in want.items():
        vis = scale * f if scale else ortho
        worst = max(worst, float(np.max(np.abs(language_enhance(vis, f) - coef * f))))
    rng = np.random.default_rng(0)
    cases, collinear, inside = 0, True, True
    for _ in range(1000):
        d = int(rng.integers(1, 65))
        lan = rng.standard_normal(d)
        lan *= rng.uniform(0.1, 3) / np.linalg.norm(lan)
        vis = rng.standard_normal(d)
        # |projection| <= 10, well short of 36 where float64 rounds the sigmoid to 1
        vis *= rng.uniform(0, 10) * np.linalg.norm(lan) / np.linalg.norm(vis)
        c = float(enhance_coefficients(vis, lan))
        out = language_enhance(vis, lan)
        collinear &= bool(np.max(np.abs(out - c * lan)) <= 1e-12)
        inside &= 0.0 < c < 1.0
        cases += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and collinear and inside and elapsed < 1.0
    verdict(1, ok, f"analytic max err {worst:.1e} (tol 1e-6); {cases} random cases collinear={collinear} "
                   f"coef in (0,1)={inside}; {elapsed:.2f} s (< 1 s)")


# 2 ------------------------------------------------------------------------

def test_ac02_gate():
    demo = LanguageFeature(np.array([1.0, 0.0]), "demo")
    at_tau = LanguageFeature(np.array([0.63, np.sqrt(1 - 0.63 ** 2)]), "test")
    below = LanguageFeature(np.array([0.6299, np.sqrt(1 - 0.63 ** 2)]), "test")
    ortho = LanguageFeature(np.array([0.0, 4.0]), "test")
    checks = {
        "s == tau selects demo": cosine(demo.feature, at_tau.feature) == TAU
        and gate_language(demo, at_tau) is demo,
        "s < tau fuses": gate_language(demo, below).source == "fused",
        "identical is idempotent": gate_language(demo, demo) is demo,
        "orthogonal gives mean": np.array_equal(gate_language(LanguageFeature([2.0, 0.0], "demo"), ortho).feature,
                                                [1.0, 2.0]),
    }
    verdict(2, all(checks.values()), "; ".join(f"{k}={v}" for k, v in checks.items()) + " (exact)")


# 3 ------------------------------------------------------------------------

def test_ac03_grasp_feature_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        m, n, d = int(rng.integers(1, 501)), int(rng.integers(1, 129)), int(rng.integers(1, 65))
        pts = rng.uniform(-0.1, 0.1, (m, 3))
        feats = rng.standard_normal((m, d))
        q = rng.uniform(-0.12, 0.12, (n, 3))
        cloud = DistilledCloud(pts, feats, np.tile([0.0, 0.0, 1.0], (m, 1)))
        got = grasp_feature(cloud, q, 8, 1e-6)
        worst = max(worst, float(np.max(np.abs(got - _brute_grasp_feature(pts, feats, q, min(8, m), 1e-6)))))
    elapsed = time.perf_counter() - t0
    verdict(3, worst <= 1e-9 and elapsed < 10,
            f"100 instances, max abs err {worst:.1e} (tol 1e-9); {elapsed:.1f} s (< 10 s)")


# 4 ------------------------------------------------------------------------

def test_ac04_cross_view_consistency():
    cfg = SceneConfig()
    assert cfg.noise == 0.5
    before_min, after_max, points = np.inf, 0.0, 0
    for i in range(cfg.n_scenes):
        sc = make_scene(cfg, i, HAND)
        idx = [visible(sc.demo, v.camera_pose) for v in sc.demo_views]
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                shared, ia, ib = np.intersect1d(idx[a], idx[b], return_indices=True)
                if not len(shared):
                    continue
                fa, fb = sc.demo_views[a].features[ia], sc.demo_views[b].features[ib]
                before = cross_view_dispersion([fa, fb])
                after = cross_view_dispersion([language_enhance(fa, sc.demo.language),
                                               language_enhance(fb, sc.demo.language)])
                before_min = min(before_min, float(before.min()))
                after_max = max(after_max, float(np.abs(after).max()))
                points += len(shared)
    ok = after_max <= 1e-9 and before_min > 0
    verdict(4, ok, f"{points} shared view points over {cfg.n_scenes} scenes: dispersion after "
                   f"{after_max:.1e} (tol 1e-9), min before {before_min:.3f} (> 0)")


# 5 ------------------------------------------------------------------------

def _random_energy(prim, seed):
    rng = np.random.default_rng(seed)
    m = 600
    pts = rng.uniform([-0.05, -0.1, -0.05], [0.15, 0.1, 0.2], (m, 3))
    cloud = DistilledCloud(pts, rng.standard_normal((m, 8)), np.tile([0.0, 0.0, 1.0], (m, 1)))
    demo = rng.standard_normal((HAND.n_surface, 8))
    return GraspEnergy(HAND, HAND.eigengrasp(prim), demo, cloud, (1.0, 0.0, 0.0), OptimConfig())


def test_ac05_gradient_correctness():
    t0 = time.perf_counter()
    worst, compared = 0.0, 0
    for p, prim in enumerate(PRIMS):
        fn = _random_energy(prim, p)
        rng = np.random.default_rng(50 + p)
        for _ in range(50):
            R = random_rotations(1, rng)[0]
            x = reduced_from_pose(Pose(R, rng.normal(0, 0.01, 3)),
                                  rng.uniform(0.1, 1.4, fn.emap.synergy_dim)).to_vector()
            idx = fn.neighbors(x)
            g = fn.analytic_gradient(x, idx)
            fd = fn.fd_gradient(x, idx, step=1e-6)
            big = np.maximum(np.abs(g), np.abs(fd)) >= 1e-8
            rel = np.abs(g - fd)[big] / np.maximum(np.abs(g), np.abs(fd))[big]
            if rel.size:
                worst = max(worst, float(rel.max()))
            compared += int(big.sum())
    elapsed = time.perf_counter() - t0
    verdict(5, worst < 1e-4 and elapsed < 30,
            f"250 states x 5 primitives, {compared} components, max rel err {worst:.1e} (< 1e-4); "
            f"{elapsed:.1f} s (< 30 s)")


# 6 ------------------------------------------------------------------------

def test_ac06_energy_identities():
    inst = make_planted()
    emap = HAND.eigengrasp(inst.demo.primitive)
    cfg = OptimConfig()
    # test = demo at the demo's own ground truth
    fn_demo = GraspEnergy(HAND, emap, inst.demo.cached_grasp_feature, inst.demo.demo_cloud,
                          inst.demo.g_gt.palm.rotation[:, 0], cfg)
    e0 = fn_demo.energy(eigen_project(inst.demo.g_gt, emap).to_vector()).e_feat

    rng = np.random.default_rng(6)
    e_norm_ok, additive_ok = True, True
    fn = GraspEnergy(HAND, emap, inst.demo.cached_grasp_feature, inst.test_cloud, (1.0, 0.0, 0.0), cfg)
    for R in random_rotations(200, rng):
        x = reduced_from_pose(Pose(R, inst.g_gt.palm.translation + rng.normal(0, 0.02, 3)),
                              rng.uniform(0, 1.57, 1)).to_vector()
        e = fn.energy(x)
        e_norm_ok &= -1e-15 <= e.e_norm <= 2.0 + 1e-15
        additive_ok &= e.total == e.e_feat + cfg.lambda_norm * e.e_norm

    # translate the test cloud and the seeds together; traces must agree
    shift = np.array([0.4, -0.3, 0.25])
    moved = DistilledCloud(inst.test_cloud.points + shift, inst.test_cloud.features, inst.test_cloud.normals)
    seeds = inst.near_seeds(HAND, n=3)
    X = np.stack([reduced_from_pose(s.palm, s.synergy_init).to_vector() for s in seeds])
    Xs = X.copy()
    Xs[:, :3] += shift
    init = np.stack([s.init_x_axis for s in seeds])
    fa = GraspEnergy(HAND, emap, inst.demo.cached_grasp_feature, inst.test_cloud, init[0], cfg)
    fb = GraspEnergy(HAND, emap, inst.demo.cached_grasp_feature, moved, init[0], cfg)
    ta = descend(fa, X, init, 50, cfg.learning_rate)
    tb = descend(fb, Xs, init, 50, cfg.learning_rate)
    drift = max(float(np.max(np.abs(a.trace - b.trace))) for a, b in zip(ta, tb))

    ok = e0 <= 1e-9 and e_norm_ok and additive_ok and drift <= 1e-9
    verdict(6, ok, f"e_feat at g_gt {e0:.1e} (tol 1e-9); e_norm in [0,2]={e_norm_ok}; "
                   f"additivity exact={additive_ok}; translated trace drift {drift:.1e} (tol 1e-9)")


# 7 ------------------------------------------------------------------------

PLANTED_REDUCTION = 0.90
PLANTED_MIN_SEEDS = 8


def test_ac07_planted_recovery():
    t0 = time.perf_counter()
    inst = make_planted()
    seeds = inst.near_seeds(HAND, n=10, max_offset=0.02, max_angle=0.2)
    for s in seeds:
        assert np.linalg.norm(s.palm.translation - inst.g_gt.palm.translation) <= 0.02
        assert rotation_angle(s.palm.rotation, inst.g_gt.palm.rotation) <= 0.2 + 1e-12
    out = optimize_batch(seeds, inst.demo, inst.test_cloud, OptimConfig(), HAND)
    reductions = [1.0 - r.best.e_feat / r.initial.e_feat for r in out.seeds]
    hits = sum(r >= PLANTED_REDUCTION for r in reductions)
    elapsed = time.perf_counter() - t0
    ok = hits >= PLANTED_MIN_SEEDS and elapsed < 60 and len(inst.test_cloud) <= 5000
    verdict(7, ok, f"{hits}/10 seeds reduce e_feat by >= 90% (need >= {PLANTED_MIN_SEEDS}); "
                   f"reductions {np.round(reductions, 3).tolist()}; {len(inst.test_cloud)} test points; "
                   f"{elapsed:.1f} s (< 60 s)")


# 8 ------------------------------------------------------------------------

def test_ac08_sampler_guarantees():
    # zero-noise construction on a plane
    xs, ys = np.meshgrid(np.linspace(0, 0.2, 20), np.linspace(0, 0.1, 10))
    plane = PointCloud(np.stack([xs.ravel(), ys.ravel(), np.zeros(200)], 1), np.tile([0.0, 0.0, 1.0], (200, 1)))
    clean = sample_palm_poses(plane, fit_obb(plane), SamplerConfig(n_samples=50, trans_noise_sigma=0,
                                                                   rot_noise_sigma=0), HAND, "cylindrical")
    exact = all(np.allclose(s.palm.rotation[:, 0], [0, 0, -1], atol=1e-12, rtol=0)
                and np.allclose(s.palm.translation, plane.points[s.anchor_index] + [0, 0, 0.08], atol=1e-12, rtol=0)
                for s in clean)

    # default noise on a curved object
    sc = make_scene(SceneConfig(n_scenes=1), 0, HAND)
    cloud = sc.test.cloud
    cfg = SamplerConfig(n_samples=1000)
    seeds = sample_palm_poses(cloud, fit_obb(cloud), cfg, HAND, "cylindrical")
    angles = np.array([np.arccos(np.clip(s.palm.rotation[:, 0] @ -cloud.normals[s.anchor_index], -1, 1))
                       for s in seeds])
    within = float(np.mean(angles <= 4 * cfg.rot_noise_sigma))
    in_limits = True
    for prim in PRIMS:
        for s in sample_palm_poses(cloud, fit_obb(cloud), SamplerConfig(n_samples=200), HAND, prim):
            j = eigen_expand(reduced_from_pose(s.palm, s.synergy_init), HAND.eigengrasp(prim),
                             HAND.lower, HAND.upper).joints
            raw = HAND.eigengrasp(prim).expand_raw(s.synergy_init)
            in_limits &= bool(np.all(raw >= HAND.lower - 1e-12) and np.all(raw <= HAND.upper + 1e-12))
            in_limits &= bool(np.all(j >= HAND.lower) and np.all(j <= HAND.upper))

    def run(_):
        return np.stack([np.concatenate([s.palm.rotation.ravel(), s.palm.translation, s.synergy_init])
                         for s in sample_palm_poses(cloud, fit_obb(cloud), SamplerConfig(n_samples=100), HAND, "hook")])
    serial = run(0)
    identical = True
    for workers in (2, 4, 8):
        with ThreadPoolExecutor(workers) as pool:
            identical &= all(np.array_equal(serial, r) for r in pool.map(run, range(workers)))
    ok = exact and within == 1.0 and in_limits and identical
    verdict(8, ok, f"zero-noise exact={exact}; {within:.1%} of 1000 within 4 sigma of -n (need 100%); "
                   f"joint limits={in_limits}; bit-identical across threads={identical}")


# 9 ------------------------------------------------------------------------

def test_ac09_eigengrasp_contracts():
    rng = np.random.default_rng(9)
    freeze, roundtrip, clamps = True, 0.0, True
    for prim in PRIMS:
        emap = HAND.eigengrasp(prim)
        for _ in range(100):
            s = rng.uniform(0, 1.57, emap.synergy_dim)
            R = random_rotations(1, rng)[0]
            g = eigen_expand(reduced_from_pose(Pose(R, rng.normal(size=3)), s), emap, HAND.lower, HAND.upper)
            freeze &= bool(np.array_equal(g.joints[~emap.active], emap.rest[~emap.active]))
            roundtrip = max(roundtrip, float(np.max(np.abs(eigen_project(g, emap).synergy - s))))
        hi = eigen_expand(ReducedGrasp(np.zeros(3), [1, 0, 0, 0, 1, 0], [5.0]), emap, HAND.lower, HAND.upper)
        lo = eigen_expand(ReducedGrasp(np.zeros(3), [1, 0, 0, 0, 1, 0], [-5.0]), emap, HAND.lower, HAND.upper)
        clamps &= bool(np.all(hi.joints[emap.active] == HAND.upper[emap.active]))
        clamps &= bool(np.all(lo.joints[emap.active] == HAND.lower[emap.active]))
    ok = freeze and roundtrip <= 1e-9 and clamps
    verdict(9, ok, f"freeze exact={freeze}; project(expand) max err {roundtrip:.1e} (tol 1e-9); clamping={clamps}")


# 10 -----------------------------------------------------------------------

def test_ac10_retrieval():
    rng = np.random.default_rng(10)
    cloud = DistilledCloud(rng.uniform(size=(40, 3)), rng.standard_normal((40, 4)), np.tile([0, 0, 1.0], (40, 1)))
    g = Grasp(np.zeros(15), Pose())
    queries, mismatches, scale_ok, filter_ok = 0, 0, True, True
    for _ in range(100):
        n = int(rng.integers(1, 8))
        recs = []
        for i in range(n):
            prim = PRIMS[int(rng.integers(0, 3))]
            feat = rng.standard_normal((HAND.n_surface, 4)) + rng.standard_normal(4)
            recs.append(DemoRecord(f"r{i:02d}", "", LanguageFeature(np.ones(4), "demo"),
                                   GraspPrimitive.parse(prim), g, cloud, feat))
        bundle = make_bundle(HAND, recs)
        q = rng.standard_normal(4)
        for prim in PRIMS:
            cands = [r for r in recs if r.primitive.value == prim]
            if not cands:
                try:
                    retrieve(bundle, LanguageFeature(q, "test"), prim)
                    filter_ok = False
                except NoDemoForPrimitive:
                    pass
                continue
            scores = [cosine(r.cached_grasp_feature.mean(axis=0), q) for r in cands]
            want = cands[int(np.argmax(scores))].id
            got = retrieve(bundle, LanguageFeature(q, "test"), prim)
            queries += 1
            mismatches += got.id != want
            filter_ok &= got.primitive.value == prim
            scale_ok &= retrieve(bundle, LanguageFeature(q * 37.5, "test"), prim).id == got.id
    ok = mismatches == 0 and scale_ok and filter_ok
    verdict(10, ok, f"100 random bundles: {mismatches} disagreements with the argmax oracle "
                    f"over {queries} queries; "
                    f"scale invariant={scale_ok}; primitive filter={filter_ok}")


# 11 -----------------------------------------------------------------------

@pytest.mark.slow
def test_ac11_ablation_trend():
    cfg = benchmark_config()
    scenes = make_scenes(cfg.scenes, HAND)
    rep = run_ablation(scenes, replace(cfg.ablation(), representation=False), HAND)
    none, enh, gate = (rep.row("alignment", m) for m in ("none", "enhance", "enhance+gate"))
    ok = (none.mean_e_feat > enh.mean_e_feat >= gate.mean_e_feat
          and none.success_rate <= enh.success_rate <= gate.success_rate)
    verdict(11, ok, f"mean e_feat none {none.mean_e_feat:.4g} > enhance {enh.mean_e_feat:.4g} >= gate "
                    f"{gate.mean_e_feat:.4g}; success none {none.success_rate:.2f} <= enhance "
                    f"{enh.success_rate:.2f} <= gate {gate.success_rate:.2f}")


# 12 -----------------------------------------------------------------------

def test_ac12_enhancement_budget():
    rng = np.random.default_rng(12)
    vis = rng.standard_normal((10_000, 512))
    lan = LanguageFeature(rng.standard_normal(512), "demo")
    language_enhance(vis[:10], lan)
    best = np.inf
    for _ in range(3):
        t0 = time.perf_counter()
        language_enhance(vis, lan)
        best = min(best, time.perf_counter() - t0)
    verdict(12, best < 1.0, f"10,000 x 512 enhancement in {best * 1000:.1f} ms (< 1000 ms)")
