"""Gradient descent on the grasp feature-matching energy.

The state vector is ``[translation(3) | rot6d(6) | synergy(k)]``. The energy
is the mean squared difference between the demo grasp feature and the
test-cloud grasp feature at the current hand surface points, plus a small
penalty ``1 - <x, x_init>`` keeping the palm approach axis near its seed.

Nearest-neighbor sets are held fixed while differentiating, so both the
analytic and the finite-difference gradient describe the same smooth piece
of the (piecewise smooth) energy.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import AllSeedsFailed, DegenerateInput, DimensionMismatch, NonFiniteEnergy
from .features import DistilledCloud
from .geometry import rot6d_backward, rot6d_degenerate, rot6d_to_rotation
from .hand import EigengraspMap, Grasp, HandModel, ReducedGrasp, eigen_expand

log = logging.getLogger(__name__)

GRADIENT_MODES = ("analytic", "finite_difference")


@dataclass
class OptimConfig:
    iterations: int = 300
    learning_rate: float = 1e-2
    lambda_norm: float = 1e-2
    n_seeds: int = 10
    knn_k: int = 8
    eps: float = 1e-6
    fd_step: float = 1e-4
    gradient_mode: str = "analytic"

    def __post_init__(self):
        for name in ("iterations", "learning_rate", "lambda_norm", "n_seeds",
                     "knn_k", "eps", "fd_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}")


@dataclass(frozen=True)
class EnergyBreakdown:
    e_feat: float
    e_norm: float
    total: float


class GraspEnergy:
    """Energy and gradient of reduced grasps against one demo on one test cloud."""

    def __init__(self, hand: HandModel, emap: EigengraspMap, demo_feat,
                 test_cloud: DistilledCloud, init_x, cfg: OptimConfig):
        demo_feat = np.asarray(demo_feat, dtype=np.float64)
        if demo_feat.shape != (hand.n_surface, test_cloud.dim):
            raise DimensionMismatch(
                f"demo grasp feature {demo_feat.shape} does not match "
                f"{hand.n_surface} surface points x dim {test_cloud.dim}")
        if len(test_cloud) == 0:
            raise DimensionMismatch("test cloud is empty")
        self.hand = hand
        self.emap = emap
        self.demo_feat = demo_feat
        self.cloud = test_cloud
        self.init_x = np.asarray(init_x, dtype=np.float64).reshape(3)
        self.cfg = cfg
        self.k = min(cfg.knn_k, len(test_cloud))
        self.dim = 9 + emap.synergy_dim
        self._lo = hand.lower
        self._hi = hand.upper

    # -- state helpers ------------------------------------------------------

    def _joints(self, synergy: np.ndarray):
        raw = self.emap.expand_raw(synergy)
        joints = np.clip(raw, self._lo, self._hi)
        joints = np.where(self.emap.active, joints, self.emap.rest)
        inside = (raw >= self._lo) & (raw <= self._hi)
        return joints, inside

    def surface_points(self, x) -> np.ndarray:
        X = np.atleast_2d(np.asarray(x, dtype=np.float64))
        R = rot6d_to_rotation(X[:, 3:9])
        joints, _ = self._joints(X[:, 9:])
        local, _ = self.hand.local_points_and_jacobian(joints, jacobian=False)
        q = np.einsum("sij,snj->sni", R, local) + X[:, None, 0:3]
        return q[0] if np.ndim(x) == 1 else q

    def neighbors(self, x) -> np.ndarray:
        q = self.surface_points(x)
        idx, _ = self.cloud.index.query(q.reshape(-1, 3), self.k)
        return idx.reshape(q.shape[:-1] + (self.k,))

    # -- core ---------------------------------------------------------------

    def _evaluate(self, X: np.ndarray, idx: Optional[np.ndarray], grad: bool, init=None):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        init = self.init_x if init is None else np.asarray(init, dtype=np.float64)
        S = len(X)
        N = self.hand.n_surface
        R = rot6d_to_rotation(X[:, 3:9])
        joints, inside = self._joints(X[:, 9:])
        local, jac = self.hand.local_points_and_jacobian(joints, jacobian=grad)
        q = np.einsum("sij,snj->sni", R, local) + X[:, None, 0:3]
        if idx is None:
            idx, _ = self.cloud.index.query(q.reshape(-1, 3), self.k)
            idx = idx.reshape(S, N, self.k)
        else:
            idx = np.broadcast_to(idx, (S, N, self.k))
        nb = self.cloud.points[idx]                       # (S, N, k, 3)
        delta = nb - q[:, :, None, :]
        u = 1.0 / (np.sum(delta * delta, axis=-1) + self.cfg.eps)
        U = u.sum(axis=-1, keepdims=True)
        w = u / U
        F = self.cloud.features[idx]                      # (S, N, k, D)
        f = np.einsum("snk,snkd->snd", w, F)
        r = f - self.demo_feat
        e_feat = np.sum(r * r, axis=(1, 2)) / N
        xaxis = R[:, :, 0]
        e_norm = 1.0 - np.sum(xaxis * init, axis=-1)
        total = e_feat + self.cfg.lambda_norm * e_norm
        if not grad:
            return e_feat, e_norm, total, idx, None

        c = np.einsum("snd,snkd->snk", r, F) - np.einsum("snd,snd->sn", r, f)[..., None]
        # d u_i / d q = 2 u_i^2 (x_i - q)
        gq = (2.0 / N) * np.einsum("snk,snkc->snc", c * 2.0 * u * u / U, delta)
        g_t = gq.sum(axis=1)
        G = np.einsum("sni,snj->sij", gq, local)
        G[:, :, 0] -= self.cfg.lambda_norm * init
        g_r6 = rot6d_backward(X[:, 3:9], G)
        g_local = np.einsum("sni,sij->snj", gq, R)
        g_joints = np.einsum("snc,snjc->sj", g_local, jac)
        g_joints = np.where(inside & self.emap.active, g_joints, 0.0)
        g_s = g_joints @ self.emap.expansion
        return e_feat, e_norm, total, idx, np.concatenate([g_t, g_r6, g_s], axis=1)

    def energy(self, x, idx=None) -> EnergyBreakdown:
        e_feat, e_norm, total, _, _ = self._evaluate(x, idx, grad=False)
        return EnergyBreakdown(float(e_feat[0]), float(e_norm[0]), float(total[0]))

    def analytic_gradient(self, x, idx=None) -> np.ndarray:
        *_, g = self._evaluate(x, idx, grad=True)
        return g[0]

    def fd_gradient(self, x, idx=None, step: Optional[float] = None, init=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        h = self.cfg.fd_step if step is None else step
        if idx is None:
            idx = self.neighbors(x)
        eye = np.eye(self.dim) * h
        X = np.concatenate([x + eye, x - eye])
        _, _, total, _, _ = self._evaluate(X, idx, False, init)
        return (total[:self.dim] - total[self.dim:]) / (2.0 * h)

    def value_and_gradient(self, x):
        """Energy at ``x`` (fresh neighbors) and the gradient with those neighbors frozen."""
        if self.cfg.gradient_mode == "analytic":
            e_feat, e_norm, total, idx, g = self._evaluate(x, None, grad=True)
            g = g[0]
        else:
            e_feat, e_norm, total, idx, _ = self._evaluate(x, None, grad=False)
            g = self.fd_gradient(x, idx[0])
        return EnergyBreakdown(float(e_feat[0]), float(e_norm[0]), float(total[0])), g


def energy(g_p: ReducedGrasp, emap: EigengraspMap, hand: HandModel, demo_feat,
           test_cloud: DistilledCloud, init_x, cfg: OptimConfig) -> EnergyBreakdown:
    return GraspEnergy(hand, emap, demo_feat, test_cloud, init_x, cfg).energy(g_p.to_vector())


def gradient(g_p: ReducedGrasp, emap: EigengraspMap, hand: HandModel, demo_feat,
             test_cloud: DistilledCloud, init_x, cfg: OptimConfig) -> np.ndarray:
    fn = GraspEnergy(hand, emap, demo_feat, test_cloud, init_x, cfg)
    _, g = fn.value_and_gradient(g_p.to_vector())
    return g


# ---------------------------------------------------------------------------
# Descent
# ---------------------------------------------------------------------------

@dataclass
class SeedResult:
    index: int
    trace: np.ndarray            # (iterations + 1, 3): e_feat, e_norm, total
    states: np.ndarray           # (iterations + 1, 9 + k)
    best_iteration: int
    final: Optional[ReducedGrasp]
    grasp: Optional[Grasp]
    failed: bool = False
    error: str = ""

    @property
    def best_total(self) -> float:
        return float(self.trace[self.best_iteration, 2]) if not self.failed else float("inf")

    @property
    def best(self) -> EnergyBreakdown:
        return EnergyBreakdown(*map(float, self.trace[self.best_iteration]))

    @property
    def initial(self) -> EnergyBreakdown:
        return EnergyBreakdown(*map(float, self.trace[0]))

    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate(self.trace[:, 2])

    def trace_records(self):
        for i, (row, x) in enumerate(zip(self.trace, self.states)):
            yield {
                "seed": self.index,
                "iteration": i,
                "e_feat": float(row[0]),
                "e_norm": float(row[1]),
                "total": float(row[2]),
                "pose": {"translation": x[0:3].tolist(), "rot6d": x[3:9].tolist(),
                         "synergy": x[9:].tolist()},
            }


@dataclass
class OptimResult:
    seeds: list
    ranking: list = field(default_factory=list)

    def ranked(self) -> list:
        return [self.seeds[i] for i in self.ranking]

    def write_trace(self, path) -> None:
        with open(path, "w") as fh:
            for res in self.seeds:
                if res.failed:
                    continue
                for rec in res.trace_records():
                    fh.write(json.dumps(rec) + "\n")


def seed_vector(seed) -> np.ndarray:
    return np.concatenate([seed.palm.translation, seed.palm.rot6d,
                           np.asarray(seed.synergy_init, dtype=np.float64)])


def descend(fn: GraspEnergy, X0, init_x, iterations: int, lr: float,
            indices: Optional[Sequence[int]] = None) -> list:
    """Plain gradient descent on several seeds at once.

    Rows advance in lockstep through one batched evaluation; every row's
    arithmetic is independent of the others, so a seed's result does not
    depend on which seeds share its batch. A row whose energy turns
    non-finite or whose rotation degenerates is dropped and reported failed.
    """
    X = np.array(np.atleast_2d(X0), dtype=np.float64)
    S = len(X)
    init_x = np.broadcast_to(np.asarray(init_x, dtype=np.float64), (S, 3))
    indices = list(range(S)) if indices is None else list(indices)
    trace = np.empty((S, iterations + 1, 3))
    states = np.empty((S, iterations + 1, fn.dim))
    best = np.zeros(S, dtype=np.int64)
    stop = np.full(S, iterations + 1)
    errors = [""] * S
    alive = np.ones(S, dtype=bool)
    for it in range(iterations + 1):
        bad = alive & rot6d_degenerate(X[:, 3:9])
        for r in np.nonzero(bad)[0]:
            errors[r] = f"degenerate rotation at iteration {it}"
        alive &= ~bad
        stop[bad] = it
        rows = np.nonzero(alive)[0]
        if not len(rows):
            break
        if fn.cfg.gradient_mode == "analytic":
            e_feat, e_norm, total, _, g = fn._evaluate(X[rows], None, True, init_x[rows])
        else:
            e_feat, e_norm, total, idx, _ = fn._evaluate(X[rows], None, False, init_x[rows])
            g = np.stack([fn.fd_gradient(X[r], idx[j], init=init_x[r]) for j, r in enumerate(rows)])
        ok = np.isfinite(total) & np.all(np.isfinite(g), axis=1)
        for j in np.nonzero(~ok)[0]:
            errors[rows[j]] = f"non-finite energy at iteration {it}"
        stop[rows[~ok]] = it
        alive[rows[~ok]] = False
        rows, g = rows[ok], g[ok]
        trace[rows, it] = np.stack([e_feat[ok], e_norm[ok], total[ok]], axis=1)
        states[rows, it] = X[rows]
        better = trace[rows, it, 2] < trace[rows, best[rows], 2]
        best[rows[better]] = it
        if it < iterations:
            X[rows] = X[rows] - lr * g
    results = []
    for r in range(S):
        if errors[r]:
            log.warning("seed %d failed: %s", indices[r], errors[r])
            n = stop[r]
            results.append(SeedResult(indices[r], trace[r, :n], states[r, :n], 0, None, None,
                                      True, errors[r]))
            continue
        reduced = ReducedGrasp.from_vector(states[r, best[r]])
        grasp = eigen_expand(reduced, fn.emap, fn.hand.lower, fn.hand.upper)
        results.append(SeedResult(indices[r], trace[r], states[r], int(best[r]), reduced, grasp))
    return results


def run_descent(fn: GraspEnergy, x0, iterations: int, lr: float, index: int = 0) -> SeedResult:
    return descend(fn, x0, fn.init_x, iterations, lr, [index])[0]


def optimize(seed, demo, test_cloud: DistilledCloud, cfg: OptimConfig,
             hand: HandModel, index: int = 0) -> SeedResult:
    """Optimize one seed against a retrieved demo record."""
    emap = hand.eigengrasp(demo.primitive)
    fn = GraspEnergy(hand, emap, demo.cached_grasp_feature, test_cloud,
                     seed.init_x_axis, cfg)
    return run_descent(fn, seed_vector(seed), cfg.iterations, cfg.learning_rate, index)


def rank_results(results: Sequence[SeedResult]) -> list:
    ok = [r for r in results if not r.failed]
    if not ok:
        raise AllSeedsFailed(f"all {len(results)} seeds failed")
    ok.sort(key=lambda r: (r.best_total, r.index))
    return [r.index for r in ok]


def optimize_batch(seeds: Sequence, demo, test_cloud: DistilledCloud, cfg: OptimConfig,
                   hand: HandModel, workers: int = 1) -> OptimResult:
    """Optimize every seed independently and rank by best total energy.

    Seeds are split into ``workers`` contiguous chunks; each chunk descends
    as one batch. Results do not depend on the chunking.
    """
    if not seeds:
        raise AllSeedsFailed("no seeds to optimize")
    primitives = {s.primitive for s in seeds}
    if len(primitives) != 1 or demo.primitive not in primitives:
        raise ValueError("seeds and demo must share one grasp primitive")
    emap = hand.eigengrasp(demo.primitive)
    fn = GraspEnergy(hand, emap, demo.cached_grasp_feature, test_cloud,
                     seeds[0].init_x_axis, cfg)
    X0 = np.stack([seed_vector(s) for s in seeds])
    init = np.stack([np.asarray(s.init_x_axis, dtype=np.float64) for s in seeds])
    # build the index before any fan-out so threads share one copy
    test_cloud.index
    chunks = [c for c in np.array_split(np.arange(len(seeds)), max(1, workers)) if len(c)]

    def one(rows):
        return descend(fn, X0[rows], init[rows], cfg.iterations, cfg.learning_rate, rows.tolist())

    if len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(one, chunks))
    else:
        parts = [one(c) for c in chunks]
    results = [r for part in parts for r in part]
    return OptimResult(results, rank_results(results))
