"""Alignment and representation ablations on synthetic scenes.

Every scene runs the whole pipeline once per mode: distill the demo and
test views, retrieve the demo, sample seeds on the test cloud, optimize,
close the fingers and score the result with the contact proxy. Seeds
depend only on the scene and the test-cloud geometry, so alignment modes
see bit-identical seeds.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from ..demo import DemoRecord, make_bundle, retrieve
from ..errors import ConfigError, LensDFFError
from ..features import GATE_TEST_SIDES, TAU, distill_views, gate_pair, grasp_feature
from ..geometry import fit_obb
from ..hand import GraspPrimitive, HandModel
from ..optimizer import OptimConfig, optimize_batch, seed_vector
from ..sampler import SamplerConfig, sample_palm_poses
from .contact import CONTACT_DELTA, PENETRATION_MARGIN, ObjectProbe, close_fingers, contact_check
from .scenes import SceneConfig, SyntheticScene

log = logging.getLogger(__name__)

ALIGNMENT_MODES = ("none", "enhance", "enhance+gate")
# demo representation / test representation
REPRESENTATION_MODES = ("multi/multi", "multi/single", "single/multi", "single/single")


@dataclass
class AblationConfig:
    scenes: SceneConfig = field(default_factory=SceneConfig)
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(standoff=0.05))
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    tau: float = TAU
    gate_test_side: str = "shared"
    normalize_vis: bool = False
    retrieval_reduce: str = "mean"
    contact_delta: float = CONTACT_DELTA
    penetration_margin: float = PENETRATION_MARGIN
    close_fingers: bool = True
    alignment: bool = True
    representation: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.retrieval_reduce not in ("mean", "max"):
            raise ConfigError("retrieval_reduce must be 'mean' or 'max'")
        if self.gate_test_side not in GATE_TEST_SIDES:
            raise ConfigError(f"gate_test_side must be one of {GATE_TEST_SIDES}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass
class CellResult:
    group: str
    mode: str
    scene: int
    grasp_count: int
    e_feat: list = field(default_factory=list)
    success: list = field(default_factory=list)
    contact_counts: list = field(default_factory=list)
    demo_id: str = ""
    seed_digest: str = ""
    failed: bool = False
    error: str = ""


@dataclass
class AblationRow:
    group: str
    mode: str
    mean_e_feat: Optional[float]
    success_rate: float
    successes: int
    grasp_count: int
    failed_cells: int


@dataclass
class AblationReport:
    rows: list = field(default_factory=list)
    cells: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def row(self, group: str, mode: str) -> AblationRow:
        for r in self.rows:
            if r.group == group and r.mode == mode:
                return r
        raise KeyError((group, mode))

    def group(self, group: str) -> list:
        return [r for r in self.rows if r.group == group]


def config_dict(cfg: AblationConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = asdict(v) if hasattr(v, "__dataclass_fields__") else v
    return out


# ---------------------------------------------------------------------------
# Pipeline pieces
# ---------------------------------------------------------------------------

def languages(mode: str, f_demo, f_test, tau: float = TAU, test_side: str = "shared"):
    """Language features for the demo and test clouds under an alignment mode."""
    if mode == "none":
        return None, None
    if mode == "enhance":
        return f_demo, f_demo
    if mode == "enhance+gate":
        return gate_pair(f_demo, f_test, tau, test_side)
    raise ValueError(f"unknown alignment mode {mode!r}")


def build_bundle(scenes, hand: HandModel, cfg: AblationConfig, single_view: bool):
    """Demo library over all scenes; single-view bundles hold one record per view.

    Returns the bundle and a map from record id to (scene position, view indices).
    """
    records, where = [], {}
    k, eps = cfg.optimizer.knn_k, cfg.optimizer.eps
    for pos, sc in enumerate(scenes):
        groups = ([[j] for j in range(len(sc.demo_views))] if single_view
                  else [list(range(len(sc.demo_views)))])
        for views in groups:
            rid = f"scene{sc.index:03d}" + (f"-view{views[0]}" if single_view else "")
            cloud = distill_views([sc.demo_views[j] for j in views], sc.demo.language,
                                  normalize_vis=cfg.normalize_vis)
            records.append(DemoRecord.create(rid, sc.demo.prompt, sc.demo.language, sc.primitive,
                                             sc.g_gt, cloud, hand, k, eps))
            where[rid] = (pos, views)
    return make_bundle(hand, records, k, eps), where


def cell_seed(cfg: AblationConfig, scene: SyntheticScene) -> int:
    return int(np.random.SeedSequence([cfg.sampler.seed, scene.seed]).generate_state(1)[0])


def run_cell(group: str, mode: str, alignment: str, demo_multi: bool, test_multi: bool,
             pos: int, scenes, bundles, hand: HandModel, cfg: AblationConfig) -> CellResult:
    scene = scenes[pos]
    sampler = replace(cfg.sampler, n_samples=cfg.optimizer.n_seeds)
    cell = CellResult(group, mode, scene.index, sampler.n_samples)
    try:
        bundle, where = bundles[demo_multi]
        rec = retrieve(bundle, scene.test.language, scene.primitive, cfg.retrieval_reduce)
        cell.demo_id = rec.id
        dpos, views = where[rec.id]
        demo_scene = scenes[dpos]
        lan_demo, lan_test = languages(alignment, demo_scene.demo.language, scene.test.language,
                                       cfg.tau, cfg.gate_test_side)
        demo_cloud = distill_views([demo_scene.demo_views[j] for j in views], lan_demo,
                                   normalize_vis=cfg.normalize_vis)
        demo_feat = grasp_feature(demo_cloud, hand.grasp_points(rec.g_gt),
                                  cfg.optimizer.knn_k, cfg.optimizer.eps)
        test_views = scene.test_views if test_multi else scene.test_views[:1]
        test_cloud = distill_views(test_views, lan_test, normalize_vis=cfg.normalize_vis)
        geom = test_cloud.as_point_cloud()
        seeds = sample_palm_poses(geom, fit_obb(geom), sampler, hand, rec.primitive,
                                  rng_seed=cell_seed(cfg, scene))
        cell.seed_digest = hashlib.sha256(
            np.stack([seed_vector(s) for s in seeds]).tobytes()).hexdigest()
        target = _Target(rec.primitive, demo_feat)
        result = optimize_batch(seeds, target, test_cloud, cfg.optimizer, hand)
        probe = ObjectProbe(scene.test.cloud)
        emap = hand.eigengrasp(rec.primitive)
        for r in result.seeds:
            if r.failed:
                cell.success.append(False)
                cell.contact_counts.append(0)
                continue
            cell.e_feat.append(r.best.e_feat)
            g = r.grasp
            if cfg.close_fingers:
                g = close_fingers(g, hand, emap, scene.test.cloud, cfg.contact_delta, probe=probe)
            rep = contact_check(g, hand, scene.test.cloud, cfg.contact_delta,
                                cfg.penetration_margin, probe)
            cell.success.append(bool(rep.success))
            cell.contact_counts.append(rep.contact_count)
    except (LensDFFError, ValueError, RuntimeError) as exc:
        log.warning("cell %s/%s scene %d failed: %s", group, mode, scene.index, exc)
        cell.failed = True
        cell.error = f"{type(exc).__name__}: {exc}"
    return cell


@dataclass(frozen=True)
class _Target:
    primitive: GraspPrimitive
    cached_grasp_feature: np.ndarray


def summarize(group: str, mode: str, cells) -> AblationRow:
    e = [v for c in cells for v in c.e_feat]
    succ = sum(int(s) for c in cells for s in c.success)
    count = sum(c.grasp_count for c in cells)
    return AblationRow(group, mode, float(np.mean(e)) if e else None,
                       succ / count if count else 0.0, succ, count,
                       sum(int(c.failed) for c in cells))


def run_ablation(scenes, cfg: Optional[AblationConfig] = None, hand: Optional[HandModel] = None
                 ) -> AblationReport:
    """Run every (scene, mode) cell and aggregate per mode."""
    if not scenes:
        raise ValueError("run_ablation needs at least one scene")
    cfg = cfg or AblationConfig()
    if hand is None:
        from ..hand import default_hand
        hand = default_hand()
    bundles = {True: build_bundle(scenes, hand, cfg, single_view=False)}
    jobs = []
    if cfg.alignment:
        for mode in ALIGNMENT_MODES:
            jobs += [("alignment", mode, mode, True, False, p) for p in range(len(scenes))]
    if cfg.representation:
        bundles[False] = build_bundle(scenes, hand, cfg, single_view=True)
        for mode in REPRESENTATION_MODES:
            if cfg.alignment and mode == "multi/single":
                continue  # same cell as the full alignment mode
            demo_multi, test_multi = (m == "multi" for m in mode.split("/"))
            jobs += [("representation", mode, "enhance+gate", demo_multi, test_multi, p)
                     for p in range(len(scenes))]

    def one(job):
        group, mode, alignment, dm, tm, pos = job
        return run_cell(group, mode, alignment, dm, tm, pos, scenes, bundles, hand, cfg)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            cells = list(pool.map(one, jobs))
    else:
        cells = [one(j) for j in jobs]

    if cfg.representation and cfg.alignment:
        shared = [c for c in cells if c.group == "alignment" and c.mode == "enhance+gate"]
        cells += [CellResult(**{**asdict(c), "group": "representation", "mode": "multi/single"})
                  for c in shared]

    rows = []
    order = []
    if cfg.alignment:
        order += [("alignment", m) for m in ALIGNMENT_MODES]
    if cfg.representation:
        order += [("representation", m) for m in REPRESENTATION_MODES]
    for group, mode in order:
        rows.append(summarize(group, mode, [c for c in cells if c.group == group and c.mode == mode]))
    cells.sort(key=lambda c: (c.group, order.index((c.group, c.mode)), c.scene))
    return AblationReport(rows, cells, config_dict(cfg))
