"""Command-line entry point.

Exit codes: 0 ok, 1 runtime error, 2 usage or config error, 3 retrieval
error, 4 optimization failure. Diagnostics go to stderr as ``LEVEL: message``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .cloudio import (load_distilled_cloud, load_feature_cloud, load_grasps,
                      save_distilled_cloud, save_feature_cloud, save_grasps)
from .config import RunConfig, benchmark_config, load_run_config, override, save_run_config
from .demo import DemoRecord, load_bundle, make_bundle, retrieval_score, retrieve, save_bundle
from .errors import AllSeedsFailed, ConfigError, LensDFFError, NoDemoForPrimitive
from .features import LanguageFeature, distill_views, gate_pair
from .geometry import fit_obb
from .hand import Grasp, GraspPrimitive, default_hand, load_hand

log = logging.getLogger("lensdff")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_RETRIEVAL, EXIT_OPTIMIZATION = 0, 1, 2, 3, 4
THREADS_ENV = "LENSDFF_THREADS"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def primitive_arg(text: str) -> GraspPrimitive:
    try:
        return GraspPrimitive.parse(text)
    except ValueError:
        valid = ", ".join(p.value for p in GraspPrimitive)
        raise argparse.ArgumentTypeError(f"unknown primitive {text!r} (valid: {valid})") from None


def load_language(path, source: str) -> LanguageFeature:
    """Language feature from ``.npy`` or JSON (a list, or ``{"feature": [...]}``)."""
    path = Path(path)
    try:
        if path.suffix == ".npy":
            vec = np.load(path, allow_pickle=False)
        else:
            doc = json.loads(path.read_text())
            if isinstance(doc, dict):
                source = doc.get("source", source)
                doc = doc["feature"]
            vec = np.asarray(doc, dtype=np.float64)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read language feature {path}: {exc}") from None
    if vec.ndim != 1:
        raise UsageError(f"{path}: language feature must be a flat vector")
    return LanguageFeature(vec, source)


def inline_language(text: str, source: str) -> LanguageFeature:
    try:
        vec = np.array([float(v) for v in text.replace(",", " ").split()])
    except ValueError:
        raise UsageError(f"--prompt-feature must be numbers, got {text!r}") from None
    if not len(vec):
        raise UsageError("--prompt-feature is empty")
    return LanguageFeature(vec, source)


def language_from(args, prefix: str, source: str):
    path = getattr(args, f"{prefix}language", None)
    inline = getattr(args, f"{prefix}prompt_feature", None)
    if path is not None:
        return load_language(path, source)
    if inline is not None:
        return inline_language(inline, source)
    return None


def save_language(f: LanguageFeature, path) -> None:
    doc = {"feature": f.feature.tolist(), "source": f.source}
    Path(path).write_text(json.dumps(doc) + "\n")


def run_config(args, default=RunConfig) -> RunConfig:
    path = getattr(args, "config", None)
    cfg = load_run_config(path) if path else default()
    cfg = override(cfg, "sampler", seed=getattr(args, "seed", None))
    cfg = override(cfg, "optimizer", iterations=getattr(args, "iterations", None),
                   learning_rate=getattr(args, "lr", None),
                   n_seeds=getattr(args, "n_seeds", None))
    cfg = override(cfg, "features", tau=getattr(args, "tau", None),
                   voxel=getattr(args, "voxel", None))
    cfg = override(cfg, "retrieval", reduce=getattr(args, "reduce", None))
    if getattr(args, "threads", None) is not None:
        if args.threads < 0:
            raise ConfigError("--threads must be >= 0")
        cfg = replace(cfg, threads=args.threads)
    return cfg


def worker_count(requested: int) -> int:
    """Resolve 0 to the CPU count, then apply the environment cap."""
    n = requested or (os.cpu_count() or 1)
    cap = os.environ.get(THREADS_ENV, "").strip()
    if cap:
        try:
            cap_n = int(cap)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
        if cap_n < 0:
            raise ConfigError(f"{THREADS_ENV} must be >= 0")
        if cap_n:
            n = min(n, cap_n)
    return max(1, n)


def write_json(obj, path=None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def query_language(args, cloud):
    lan = language_from(args, "", "test")
    if lan is None:
        lan = cloud.language
    if lan is None:
        raise UsageError("test cloud has no embedded language; pass --language or --prompt-feature")
    return lan


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_distill(args) -> int:
    if not args.views:
        raise UsageError("distill needs at least one --views file")
    cfg = run_config(args)
    views = [load_feature_cloud(p) for p in args.views]
    if args.raw:
        lan = None
    else:
        own = language_from(args, "", args.role)
        if own is None:
            raise UsageError("pass --language or --prompt-feature (or --raw)")
        other = language_from(args, "other_", "test" if args.role == "demo" else "demo")
        if other is not None:
            demo, test = (own, other) if args.role == "demo" else (other, own)
            pair = gate_pair(demo, test, cfg.features.tau, cfg.features.gate_test_side)
            lan = pair[0] if args.role == "demo" else pair[1]
        else:
            lan = own
    cloud = distill_views(views, lan, cfg.features.voxel or None,
                          cfg.features.normalize_vis, cfg.features.normal_k)
    save_distilled_cloud(cloud, args.out)
    log.info("wrote %d points to %s", len(cloud), args.out)
    return EXIT_OK


def cmd_retrieve(args) -> int:
    cfg = run_config(args)
    bundle = load_bundle(args.demo_bundle)
    if args.test is not None:
        lan = query_language(args, load_distilled_cloud(args.test))
    else:
        lan = language_from(args, "", "test")
        if lan is None:
            raise UsageError("pass --test, --language or --prompt-feature")
    rec = retrieve(bundle, lan, args.primitive, cfg.retrieval.reduce)
    write_json({"id": rec.id, "prompt": rec.prompt_text, "primitive": rec.primitive.value,
                "score": retrieval_score(rec, lan, cfg.retrieval.reduce)}, args.out)
    return EXIT_OK


def _seed_dict(s) -> dict:
    return {"anchor": s.anchor_index, "translation": s.palm.translation.tolist(),
            "rotation": s.palm.rotation.tolist(), "init_x_axis": list(map(float, s.init_x_axis)),
            "synergy": np.asarray(s.synergy_init).tolist(), "primitive": s.primitive.value}


def _sample(cfg: RunConfig, cloud, hand, primitive):
    from .sampler import sample_palm_poses
    geom = cloud.as_point_cloud()
    sampler = replace(cfg.sampler, n_samples=cfg.optimizer.n_seeds)
    return sample_palm_poses(geom, fit_obb(geom), sampler, hand, primitive)


def cmd_sample(args) -> int:
    cfg = run_config(args)
    hand = load_hand(args.hand) if args.hand else default_hand()
    seeds = _sample(cfg, load_distilled_cloud(args.test), hand, args.primitive)
    write_json({"seeds": [_seed_dict(s) for s in seeds]}, args.out)
    return EXIT_OK


def cmd_optimize(args) -> int:
    from .optimizer import optimize_batch
    cfg = run_config(args)
    bundle = load_bundle(args.demo_bundle)
    test = load_distilled_cloud(args.test)
    lan = query_language(args, test)
    rec = retrieve(bundle, lan, args.primitive, cfg.retrieval.reduce)
    log.info("retrieved demo %s", rec.id)
    opt = cfg.optimizer
    if (opt.knn_k, opt.eps) != (bundle.knn_k, bundle.eps):
        log.warning("using the bundle's grasp-feature settings (k=%d, eps=%g)",
                    bundle.knn_k, bundle.eps)
        opt = replace(opt, knn_k=bundle.knn_k, eps=bundle.eps)
    seeds = _sample(cfg, test, bundle.hand, args.primitive)
    result = optimize_batch(seeds, rec, test, opt, bundle.hand, worker_count(cfg.threads))
    ranked = result.ranked()
    save_grasps([r.grasp for r in ranked], args.out)
    trace = args.trace or str(args.out) + ".trace.jsonl"
    result.write_trace(trace)
    failed = sum(r.failed for r in result.seeds)
    if failed:
        log.warning("%d of %d seeds failed", failed, len(result.seeds))
    write_json({"demo": rec.id, "grasps": str(args.out), "trace": trace,
                "ranking": [{"seed": r.index, "total": r.best.total, "e_feat": r.best.e_feat,
                             "e_norm": r.best.e_norm} for r in ranked]})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .eval.contact import ObjectProbe, close_fingers, contact_check
    cfg = run_config(args)
    hand = load_hand(args.hand) if args.hand else default_hand()
    grasps = load_grasps(args.grasps)
    cloud = load_distilled_cloud(args.object).as_point_cloud()
    probe = ObjectProbe(cloud)
    emap = hand.eigengrasp(args.primitive)
    close = cfg.eval.close_fingers and not args.no_close
    reports = []
    for g in grasps:
        if close:
            g = close_fingers(g, hand, emap, cloud, cfg.eval.contact_delta, probe=probe)
        reports.append(contact_check(g, hand, cloud, cfg.eval.contact_delta,
                                     cfg.eval.penetration_margin, probe).as_dict())
    write_json({"grasps": len(grasps), "successes": sum(r["success"] for r in reports),
                "reports": reports}, args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .eval.ablation import run_ablation
    from .eval.report import emit_report
    from .eval.scenes import make_scenes
    cfg = run_config(args, benchmark_config)
    if args.scenes is not None:
        cfg = replace(cfg, scenes=replace(cfg.scenes, n_scenes=args.scenes))
    hand = default_hand()
    scenes = make_scenes(cfg.scenes, hand)
    report = run_ablation(scenes, cfg.ablation(worker_count(cfg.threads)), hand)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fmt in dict.fromkeys(args.format or ["json"]):
        path = emit_report(report, out / f"ablation.{fmt}", fmt)
        log.info("wrote %s", path)
    if report.cells and all(c.failed for c in report.cells):
        log.error("every ablation cell failed")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_demo_pack(args) -> int:
    cfg = run_config(args)
    manifest = Path(args.manifest)
    try:
        doc = json.loads(manifest.read_text())
        entries = doc["records"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read manifest {manifest}: {exc}") from None
    hand = load_hand(args.hand) if args.hand else default_hand()
    base = manifest.parent
    k, eps = cfg.optimizer.knn_k, cfg.optimizer.eps
    records = []
    for e in entries:
        try:
            lan = e["language"]
            lan = (load_language(base / lan, "demo") if isinstance(lan, str)
                   else LanguageFeature(np.asarray(lan, dtype=np.float64), "demo"))
            grasp = e["grasp"]
            grasp = (load_grasps(base / grasp)[int(e.get("grasp_index", 0))]
                     if isinstance(grasp, str) else Grasp.from_vector(grasp))
            cloud = load_distilled_cloud(base / e["cloud"])
            records.append(DemoRecord.create(e["id"], e.get("prompt", ""), lan, e["primitive"],
                                             grasp, cloud, hand, k, eps))
        except (KeyError, TypeError, IndexError) as exc:
            raise UsageError(f"manifest record {e!r:.60}: {exc}") from None
    save_bundle(make_bundle(hand, records, k, eps), args.out)
    log.info("packed %d records into %s", len(records), args.out)
    return EXIT_OK


def cmd_example(args) -> int:
    """Write the planted example scene: demo views, bundle, test cloud, config."""
    from .eval.planted import make_planted
    from .eval.scenes import SceneConfig
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hand = default_hand()
    cfg = RunConfig()
    p = make_planted(SceneConfig(), args.index, hand, cfg.optimizer.knn_k, cfg.optimizer.eps)
    views = []
    for i, v in enumerate(p.scene.demo_views):
        name = f"demo_view{i}.lfc"
        save_feature_cloud(v, out / name)
        views.append(name)
    save_language(p.demo.f_lan_demo, out / "demo_language.json")
    save_distilled_cloud(p.demo.demo_cloud, out / "demo.ldc")
    save_grasps([p.demo.g_gt], out / "demo_grasp.lgr")
    save_distilled_cloud(p.test_cloud, out / "test.ldc")
    save_grasps([p.g_gt], out / "test_gt.lgr")
    save_bundle(make_bundle(hand, [p.demo], cfg.optimizer.knn_k, cfg.optimizer.eps),
                out / "demo.demo")
    write_json({"records": [{"id": p.demo.id, "prompt": p.demo.prompt_text,
                             "primitive": p.demo.primitive.value,
                             "language": "demo_language.json", "grasp": "demo_grasp.lgr",
                             "cloud": "demo.ldc"}]}, out / "manifest.json")
    save_run_config(cfg, out / "config.json")
    write_json({"primitive": p.demo.primitive.value, "views": views,
                "bundle": "demo.demo", "test": "test.ldc", "config": "config.json"})
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _language_flags(p, prefix: str = "", what: str = "language feature"):
    g = p.add_mutually_exclusive_group()
    g.add_argument(f"--{prefix}language", metavar="PATH", help=f"{what} (.json or .npy)")
    g.add_argument(f"--{prefix}prompt-feature", metavar="VALUES",
                   help=f"{what} inline, comma or space separated")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lensdff", description="Few-shot dexterous grasp synthesis on language-aligned feature clouds.",
                                     epilog="exit codes: 0 ok, 1 runtime error, 2 usage or config error, "
                                            "3 no demo for primitive, 4 every seed failed")
    parser.add_argument("--version", action="version", version=f"lensdff {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="more diagnostics (repeat for debug)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=fn)
        p.add_argument("--config", metavar="PATH", help="run config JSON (flags override it)")
        return p

    p = command("distill", cmd_distill, "fuse feature-cloud views into a distilled cloud")
    p.add_argument("--views", nargs="*", default=[], metavar="PATH", help=".lfc view files")
    _language_flags(p)
    _language_flags(p, "other-", "the other side's language feature; enables the gate")
    p.add_argument("--role", choices=("demo", "test"), default="demo",
                   help="which side the views belong to (default demo)")
    p.add_argument("--raw", action="store_true", help="skip language alignment")
    p.add_argument("--voxel", type=float, help="voxel size for downsampling (0 = off)")
    p.add_argument("--tau", type=float, help="gate threshold")
    p.add_argument("--out", required=True, metavar="PATH", help="output .ldc")

    p = command("retrieve", cmd_retrieve, "pick the demo closest to a test prompt")
    p.add_argument("--demo-bundle", required=True, metavar="PATH")
    p.add_argument("--primitive", required=True, type=primitive_arg)
    p.add_argument("--test", metavar="PATH", help=".ldc whose embedded language is the query")
    _language_flags(p)
    p.add_argument("--reduce", choices=("mean", "max"))
    p.add_argument("--out", metavar="PATH", help="write JSON here instead of stdout")

    p = command("sample", cmd_sample, "sample initial grasps on a test cloud")
    p.add_argument("--test", required=True, metavar="PATH")
    p.add_argument("--primitive", required=True, type=primitive_arg)
    p.add_argument("--hand", metavar="PATH", help="hand description JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--out", metavar="PATH")

    p = command("optimize", cmd_optimize, "retrieve, sample and optimize grasps")
    p.add_argument("--demo-bundle", required=True, metavar="PATH")
    p.add_argument("--test", required=True, metavar="PATH")
    p.add_argument("--primitive", required=True, type=primitive_arg)
    _language_flags(p, what="test language feature (default: the one in --test)")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--reduce", choices=("mean", "max"))
    p.add_argument("--threads", type=int, help="worker threads (0 = auto)")
    p.add_argument("--out", required=True, metavar="PATH", help="ranked grasp file (.lgr)")
    p.add_argument("--trace", metavar="PATH", help="JSON-lines trace (default OUT.trace.jsonl)")

    p = command("evaluate", cmd_evaluate, "score grasps with the contact proxy")
    p.add_argument("--grasps", required=True, metavar="PATH")
    p.add_argument("--object", required=True, metavar="PATH", help="object .ldc")
    p.add_argument("--primitive", required=True, type=primitive_arg)
    p.add_argument("--hand", metavar="PATH")
    p.add_argument("--no-close", action="store_true", help="score grasps as given")
    p.add_argument("--out", metavar="PATH")

    p = command("ablate", cmd_ablate, "run the synthetic alignment and representation ablations")
    p.add_argument("--benchmark", dest="config", metavar="PATH",
                   help="benchmark run config (default: built-in)")
    p.add_argument("--scenes", type=int, help="number of scenes")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--format", action="append", choices=("json", "csv"),
                   help="report format; repeat for both (default json)")
    p.add_argument("--out", required=True, metavar="DIR")

    p = command("demo-pack", cmd_demo_pack, "pack demo records into a bundle")
    p.add_argument("--manifest", required=True, metavar="PATH")
    p.add_argument("--hand", metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH")

    p = command("example", cmd_example, "write the planted example scene")
    p.add_argument("--index", type=int, default=0, help="scene index")
    p.add_argument("--out", required=True, metavar="DIR")
    return parser


class _Formatter(logging.Formatter):
    def format(self, record):
        return f"{record.levelname}: {record.getMessage()}"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_Formatter())
    root = logging.getLogger("lensdff")
    root.handlers[:] = [handler]
    root.propagate = False
    root.setLevel(logging.WARNING - 10 * min(args.verbose, 2))
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except NoDemoForPrimitive as exc:
        log.error("%s", exc)
        return EXIT_RETRIEVAL
    except AllSeedsFailed as exc:
        log.error("%s", exc)
        return EXIT_OPTIMIZATION
    except (LensDFFError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
