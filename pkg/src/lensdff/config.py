"""Run configuration: one versioned JSON document holding every module setting.

Layout::

    {"schema": "lensdff-run", "version": 1,
     "features": {...}, "sampler": {...}, "optimizer": {...},
     "retrieval": {...}, "eval": {...}, "scenes": {...},
     "paths": {...}, "threads": 0}

Missing sections take their defaults; unknown keys anywhere are an error.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .eval.ablation import AblationConfig
from .eval.contact import CONTACT_DELTA, PENETRATION_MARGIN
from .eval.scenes import SceneConfig
from .features import GATE_TEST_SIDES, TAU
from .optimizer import OptimConfig
from .sampler import SamplerConfig

RUN_SCHEMA = "lensdff-run"
RUN_VERSION = 1


@dataclass
class FeatureConfig:
    tau: float = TAU
    gate_test_side: str = "shared"
    voxel: float = 0.0
    normalize_vis: bool = False
    normal_k: int = 16

    def __post_init__(self):
        if self.gate_test_side not in GATE_TEST_SIDES:
            raise ValueError(f"gate_test_side must be one of {GATE_TEST_SIDES}")
        if self.voxel < 0 or self.normal_k < 3:
            raise ValueError("voxel must be >= 0 and normal_k >= 3")


@dataclass
class RetrievalConfig:
    reduce: str = "mean"

    def __post_init__(self):
        if self.reduce not in ("mean", "max"):
            raise ValueError("reduce must be 'mean' or 'max'")


@dataclass
class EvalConfig:
    contact_delta: float = CONTACT_DELTA
    penetration_margin: float = PENETRATION_MARGIN
    close_fingers: bool = True
    alignment: bool = True
    representation: bool = True

    def __post_init__(self):
        if self.contact_delta <= 0 or self.penetration_margin < 0:
            raise ValueError("contact_delta must be > 0 and penetration_margin >= 0")


_SECTIONS = {
    "features": FeatureConfig,
    "sampler": SamplerConfig,
    "optimizer": OptimConfig,
    "retrieval": RetrievalConfig,
    "eval": EvalConfig,
    "scenes": SceneConfig,
}


@dataclass
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    scenes: SceneConfig = field(default_factory=SceneConfig)
    paths: dict = field(default_factory=dict)
    threads: int = 0

    def to_dict(self) -> dict:
        doc = {"schema": RUN_SCHEMA, "version": RUN_VERSION}
        for name in _SECTIONS:
            doc[name] = asdict(getattr(self, name))
        doc["paths"] = dict(self.paths)
        doc["threads"] = self.threads
        return doc

    def ablation(self, workers: int = 1) -> AblationConfig:
        return AblationConfig(
            scenes=self.scenes, sampler=self.sampler, optimizer=self.optimizer,
            tau=self.features.tau, gate_test_side=self.features.gate_test_side,
            normalize_vis=self.features.normalize_vis,
            retrieval_reduce=self.retrieval.reduce,
            contact_delta=self.eval.contact_delta,
            penetration_margin=self.eval.penetration_margin,
            close_fingers=self.eval.close_fingers, alignment=self.eval.alignment,
            representation=self.eval.representation, workers=workers)


def _section(cls, name: str, data):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"config section {name!r}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config section {name!r}: {exc}") from None


def run_config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    if doc.get("schema") != RUN_SCHEMA:
        raise ConfigError(f"run config: expected schema {RUN_SCHEMA!r}")
    if doc.get("version") != RUN_VERSION:
        raise ConfigError(f"run config: unsupported version {doc.get('version')!r} "
                          f"(supported: {RUN_VERSION})")
    allowed = set(_SECTIONS) | {"schema", "version", "paths", "threads"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"run config: unknown keys {unknown}")
    kwargs = {name: _section(cls, name, doc[name]) for name, cls in _SECTIONS.items() if name in doc}
    paths = doc.get("paths", {})
    if not isinstance(paths, dict) or not all(isinstance(v, str) for v in paths.values()):
        raise ConfigError("run config: paths must map names to strings")
    threads = doc.get("threads", 0)
    if not isinstance(threads, int) or isinstance(threads, bool) or threads < 0:
        raise ConfigError("run config: threads must be a non-negative integer")
    return RunConfig(paths=dict(paths), threads=threads, **kwargs)


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not JSON: {exc}") from None
    return run_config_from_dict(doc)


def save_run_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def override(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Copy of ``cfg`` with non-None ``values`` replacing fields of ``section``."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    try:
        new = replace(getattr(cfg, section), **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None
    return replace(cfg, **{section: new})


def benchmark_config() -> RunConfig:
    """Default run config for the synthetic benchmark (seeds start closer in)."""
    return RunConfig(sampler=AblationConfig().sampler)
