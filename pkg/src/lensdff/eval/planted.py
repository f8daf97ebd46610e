"""Planted-grasp instances: the test cloud is a rigid copy of the demo cloud.

The demo grasp carried through the same rigid motion is an exact zero of
the feature energy, so descent from nearby seeds has a known target.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..demo import DemoRecord
from ..features import DistilledCloud, distill_views
from ..geometry import Pose, axis_angle_matrix
from ..hand import Grasp, HandModel, default_hand, eigen_project
from ..sampler import GraspSeed
from .scenes import SceneConfig, SyntheticScene, make_scene

# fixed placement of the test copy
_AXIS = np.array([0.3, 0.2, 0.9])
PLANTED_TRANSFORM = Pose(axis_angle_matrix(_AXIS / np.linalg.norm(_AXIS), 0.7), [0.1, -0.2, 0.05])


@dataclass
class PlantedInstance:
    scene: SyntheticScene
    transform: Pose
    demo: DemoRecord
    test_cloud: DistilledCloud
    g_gt: Grasp  # ground truth on the test copy

    def near_seeds(self, hand: HandModel, n: int = 10, max_offset: float = 0.02,
                   max_angle: float = 0.2, seed: int = 0) -> list:
        """Seeds whose palm is within ``max_offset`` / ``max_angle`` of the truth.

        Joints start at the truth's synergy coordinates.
        """
        rng = np.random.default_rng(seed)
        red = eigen_project(self.g_gt, hand.eigengrasp(self.demo.primitive))
        out = []
        for i in range(n):
            d = rng.standard_normal(3)
            d *= rng.uniform(0, max_offset) / np.linalg.norm(d)
            ax = rng.standard_normal(3)
            R = axis_angle_matrix(ax / np.linalg.norm(ax), rng.uniform(-max_angle, max_angle))
            palm = Pose(R @ self.g_gt.palm.rotation, self.g_gt.palm.translation + d)
            out.append(GraspSeed(palm, palm.rotation[:, 0].copy(), red.synergy,
                                 self.demo.primitive, i))
        return out


def make_planted(cfg: Optional[SceneConfig] = None, index: int = 0,
                 hand: Optional[HandModel] = None, k: int = 8, eps: float = 1e-6,
                 transform: Pose = PLANTED_TRANSFORM) -> PlantedInstance:
    cfg = cfg or SceneConfig()
    hand = hand or default_hand()
    scene = make_scene(cfg, index, hand)
    cloud = distill_views(scene.demo_views, scene.demo.language)
    rec = DemoRecord.create(f"planted{index:03d}", scene.demo.prompt, scene.demo.language,
                            scene.primitive, scene.g_gt, cloud, hand, k, eps)
    test = rec.demo_cloud.transformed(transform)
    g = Grasp(rec.g_gt.joints, transform.compose(rec.g_gt.palm))
    return PlantedInstance(scene, transform, rec, test, g)
