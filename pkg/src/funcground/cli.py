"""Command-line interface: run, eval, synth, export, ablate.

Configuration layers, weakest first: built-in defaults, then a TOML config
file (``--config``), then ``FUNCGROUND_*`` environment variables, then
explicit flags. Exit codes: 0 success (soft per-query failures included),
1 configuration or I/O error, 2 backend unreachable in non-oracle mode.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import requests

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import evaluation, lifting, synth
from .errors import FuncGroundError, MissingFile
from .mllm import HttpChatBackend
from .pipeline import Backends, PipelineConfig, SceneRuntime, config_label, run_scene
from .sampling import SamplingConfig
from .scene_io import discover_scene_dirs, load_scene, save_scene
from .segmentation import HttpSegBackend
from .serve import serve_backends
from .synth import (
    CompositeChatBackend,
    CompositeSegBackend,
    OracleChatBackend,
    OracleSegBackend,
    SPEC_FILENAME,
    generate,
    load_spec,
    random_spec,
    save_spec,
)

ENV_PREFIX = "FUNCGROUND_"


# ---------------------------------------------------------------------------
# Config layering


def _load_file_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise MissingFile(str(p))
    with open(p, "rb") as fh:
        return tomllib.load(fh)


def _env_config(environ=os.environ) -> dict:
    out = {}
    mapping = {
        "MLLM_URL": ("mllm_url", str),
        "SEG_URL": ("seg_url", str),
        "TAU": ("tau", float),
        "K": ("k", int),
    }
    for suffix, (key, cast) in mapping.items():
        raw = environ.get(ENV_PREFIX + suffix)
        if raw is not None:
            out[key] = cast(raw)
    return out


def _merged_settings(args) -> dict:
    """defaults < config file < environment < flags."""
    settings: dict = {}
    settings.update(_load_file_config(getattr(args, "config", None)))
    settings.update(_env_config())
    flag_map = {
        "tau": args.tau,
        "k": args.k,
        "mllm_url": getattr(args, "mllm_url", None),
        "seg_url": getattr(args, "seg_url", None),
    }
    for key, value in flag_map.items():
        if value is not None:
            settings[key] = value
    if getattr(args, "no_window", False):
        settings["enable_temporal_window"] = False
    if getattr(args, "no_verify", False):
        settings["enable_verification"] = False
    if getattr(args, "no_multisample", False):
        settings["enable_multisampling"] = False
    return settings


def build_pipeline_config(settings: dict) -> PipelineConfig:
    sampling = SamplingConfig(
        frames_per_iteration=int(settings.get("n", 64)),
        iterations=int(settings.get("k", 4)),
        coarse_resolution=tuple(settings.get("coarse_resolution", (512, 384))),
        offset_base=str(settings.get("offset_base", "one")),
    )
    return PipelineConfig(
        sampling=sampling,
        seg_confidence=float(settings.get("seg_confidence", 0.5)),
        tau=float(settings.get("tau", 0.7)),
        enable_multisampling=bool(settings.get("enable_multisampling", True)),
        enable_temporal_window=bool(settings.get("enable_temporal_window", True)),
        enable_verification=bool(settings.get("enable_verification", True)),
        max_concurrency=int(settings.get("max_concurrency", 4)),
    )


# ---------------------------------------------------------------------------
# Backends


def _oracle_backends_for(scene_dir: Path) -> Backends:
    spec_path = scene_dir / SPEC_FILENAME
    if not spec_path.is_file():
        raise MissingFile(
            f"{spec_path}: --oracle needs the generator spec written by 'funcground synth'"
        )
    _, script = generate(load_spec(spec_path))
    return Backends(chat=OracleChatBackend(script), seg=OracleSegBackend(script))


def _probe_endpoint(url: str) -> bool:
    try:
        requests.get(url.rstrip("/") + "/healthz", timeout=5)
        return True
    except requests.RequestException:
        return False


def _http_backends(settings: dict) -> Backends | None:
    mllm_url = settings.get("mllm_url")
    seg_url = settings.get("seg_url")
    if not mllm_url or not seg_url:
        return None
    return Backends(chat=HttpChatBackend(mllm_url), seg=HttpSegBackend(seg_url))


# ---------------------------------------------------------------------------
# run


def cmd_run(args) -> int:
    settings = _merged_settings(args)
    cfg = build_pipeline_config(settings)
    try:
        scene_dirs = discover_scene_dirs(args.scenes)
    except FuncGroundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out_root = Path(args.out)
    trace_root = Path(args.trace_dir) if args.trace_dir else None

    if not args.oracle:
        backends = _http_backends(settings)
        if backends is None:
            print(
                "error: --mllm-url and --seg-url (or FUNCGROUND_MLLM_URL / "
                "FUNCGROUND_SEG_URL, or --oracle) are required",
                file=sys.stderr,
            )
            return 1
        for url in (settings["mllm_url"], settings["seg_url"]):
            if not _probe_endpoint(url):
                print(f"error: backend unreachable: {url}", file=sys.stderr)
                return 2

    summary_queries = []
    for scene_dir in scene_dirs:
        try:
            scene = load_scene(scene_dir)
            backends = _oracle_backends_for(scene_dir) if args.oracle else backends
        except FuncGroundError as exc:
            print(f"error: {scene_dir}: {exc}", file=sys.stderr)
            return 1
        runtime = SceneRuntime(scene, epsilon=cfg.epsilon)
        scene_out = out_root / scene.id
        scene_out.mkdir(parents=True, exist_ok=True)
        scene_runs = run_scene(
            scene, cfg, backends, runtime, parallel_queries=max(1, args.parallel_queries)
        )
        for query, result, mask in scene_runs:
            lifting.write_point_ids(scene_out / f"{query.id}.mask.ids", mask)
            (scene_out / f"{query.id}.trace.json").write_text(
                json.dumps(result.trace.to_dict(include_events=False), indent=2) + "\n"
            )
            if trace_root is not None:
                full_dir = trace_root / scene.id
                full_dir.mkdir(parents=True, exist_ok=True)
                (full_dir / f"{query.id}.trace.json").write_text(
                    json.dumps(result.trace.to_dict(include_events=True), indent=2) + "\n"
                )
            summary_queries.append(
                {
                    "scene": scene.id,
                    "query": query.id,
                    "resolved_object": result.resolved_object,
                    "mask_points": len(mask),
                    "failure": result.trace.failure,
                    "timings_s": {k: round(v, 6) for k, v in result.trace.timings.items()},
                }
            )
            status = "ok" if result.trace.failure is None else "soft-fail"
            print(f"[{scene.id}/{query.id}] {status} points={len(mask)}")
    summary = {
        "config": cfg.to_dict(),
        "config_fingerprint": cfg.fingerprint(),
        "queries": summary_queries,
    }
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "run_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    try:
        scene_dirs = discover_scene_dirs(args.scenes)
    except FuncGroundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    pred_root = Path(args.pred)
    triples = []
    for scene_dir in scene_dirs:
        scene = load_scene(scene_dir)
        for query in scene.queries:
            mask_path = pred_root / scene.id / f"{query.id}.mask.ids"
            ids = lifting.read_point_ids(mask_path) if mask_path.is_file() else np.empty(0, np.int64)
            # Plain id files carry no score; non-empty predictions rank first.
            mask = lifting.Mask3D(point_ids=ids, confidence=1.0 if ids.size else 0.0)
            triples.append((f"{scene.id}/{query.id}", mask, query.gt_mask))
    try:
        report = evaluation.evaluate(triples)
    except FuncGroundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    rows = [("run", report)]
    if args.csv:
        print("\n".join(evaluation.report_csv_rows(rows)))
    else:
        print(evaluation.format_report_table(rows))
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return 0


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    out_root = Path(args.out)
    scripts = []
    for number in range(args.count):
        seed = args.seed + number
        spec = random_spec(
            seed,
            n_parts=args.parts,
            n_frames=args.frames,
            image_size=tuple(args.image_size),
            trajectory_kind=args.trajectory,
        )
        scene, script = generate(spec)
        scene_dir = out_root / scene.id if args.count > 1 else out_root
        save_scene(scene, scene_dir)
        save_spec(spec, scene_dir / SPEC_FILENAME)
        scripts.append(script)
        print(f"wrote {scene_dir} ({len(scene.cloud)} points, {len(scene.frames)} frames, "
              f"{len(scene.queries)} queries)")
    if args.serve:
        if len(scripts) == 1:
            chat_backend = OracleChatBackend(scripts[0])
            seg_backend = OracleSegBackend(scripts[0])
        else:
            chat_backend = CompositeChatBackend(scripts)
            seg_backend = CompositeSegBackend(scripts)
        server = serve_backends(chat_backend, seg_backend, port=args.port)
        server.start()
        print(f"serving oracle backends on {server.base_url} (Ctrl-C to stop)")
        try:
            while True:
                time.sleep(3600)
        except KeyboardInterrupt:
            server.close()
    return 0


# ---------------------------------------------------------------------------
# export


def cmd_export(args) -> int:
    try:
        ids = lifting.read_point_ids(args.mask)
        scene = load_scene(args.scene)
        lifting.export_colored_ply(scene.cloud, ids, args.out)
    except FuncGroundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args) -> int:
    settings = _merged_settings(args)
    base = build_pipeline_config(settings)
    try:
        scene_dirs = discover_scene_dirs(args.scenes)
    except FuncGroundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    http_backends = None
    if not args.oracle:
        http_backends = _http_backends(settings)
        if http_backends is None:
            print(
                "error: --mllm-url and --seg-url (or FUNCGROUND_MLLM_URL / "
                "FUNCGROUND_SEG_URL, or --oracle) are required",
                file=sys.stderr,
            )
            return 1
        for url in (settings["mllm_url"], settings["seg_url"]):
            if not _probe_endpoint(url):
                print(f"error: backend unreachable: {url}", file=sys.stderr)
                return 2
    ks = [int(k) for k in args.grid_k.split(",")]
    grid = []
    for k in ks:
        for window in (True, False):
            for verify in (True, False):
                grid.append(
                    replace(
                        base,
                        sampling=replace(base.sampling, iterations=k),
                        enable_multisampling=True,
                        enable_temporal_window=window,
                        enable_verification=verify,
                    )
                )
    scenes = []
    backend_map = {}
    for scene_dir in scene_dirs:
        try:
            scene = load_scene(scene_dir)
            backend_map[scene.id] = (
                _oracle_backends_for(scene_dir) if args.oracle else http_backends
            )
        except FuncGroundError as exc:
            print(f"error: {scene_dir}: {exc}", file=sys.stderr)
            return 1
        scenes.append(scene)
    rows = evaluation.ablation_grid(scenes, grid, lambda s: backend_map[s.id])
    if args.csv:
        print("\n".join(evaluation.report_csv_rows(rows)))
    else:
        print(evaluation.format_report_table(rows))
    if args.out:
        payload = {label: report.to_dict() for label, report in rows}
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--tau", type=float, default=None, help="consensus threshold")
    parser.add_argument("--k", type=int, default=None, help="sampling iterations K")
    parser.add_argument("--no-window", action="store_true", help="disable the temporal window")
    parser.add_argument("--no-verify", action="store_true", help="disable mask verification")
    parser.add_argument("--no-multisample", action="store_true", help="single survey iteration")
    parser.add_argument("--mllm-url", default=None, help="vision-chat endpoint")
    parser.add_argument("--seg-url", default=None, help="segmentation endpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="funcground",
        description="Ground natural-language tasks into 3D masks of functional parts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the grounding pipeline over scenes")
    p_run.add_argument("--scenes", required=True, help="scene directory or directory of scenes")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--oracle", action="store_true", help="use offline oracle backends")
    p_run.add_argument("--trace-dir", default=None, help="write full model I/O traces here")
    p_run.add_argument("--parallel-queries", type=int, default=1)
    _add_config_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="score predictions against ground truth")
    p_eval.add_argument("--scenes", required=True)
    p_eval.add_argument("--pred", required=True, help="directory written by 'run'")
    p_eval.add_argument("--out", default=None, help="write the JSON report here")
    p_eval.add_argument("--csv", action="store_true", help="emit CSV rows")
    p_eval.set_defaults(func=cmd_eval)

    p_synth = sub.add_parser("synth", help="generate synthetic scenes")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--count", type=int, default=1, help="number of scenes")
    p_synth.add_argument("--frames", type=int, default=120)
    p_synth.add_argument("--parts", type=int, default=6, help="parts (= queries) per scene")
    p_synth.add_argument("--image-size", type=int, nargs=2, default=(192, 144),
                         metavar=("W", "H"))
    p_synth.add_argument("--trajectory", choices=("arc", "line"), default="arc")
    p_synth.add_argument("--serve", action="store_true",
                         help="serve oracle backends over HTTP after generating")
    p_synth.add_argument("--port", type=int, default=0)
    p_synth.set_defaults(func=cmd_synth)

    p_export = sub.add_parser("export", help="export a mask as a colored PLY")
    p_export.add_argument("--mask", required=True, help="mask id file")
    p_export.add_argument("--scene", required=True, help="scene directory")
    p_export.add_argument("--out", required=True, help="output PLY path")
    p_export.set_defaults(func=cmd_export)

    p_ablate = sub.add_parser("ablate", help="run the ablation grid")
    p_ablate.add_argument("--scenes", required=True)
    p_ablate.add_argument("--oracle", action="store_true")
    p_ablate.add_argument("--grid-k", default="1,2,4", help="comma-separated K values")
    p_ablate.add_argument("--csv", action="store_true")
    p_ablate.add_argument("--out", default=None, help="write the JSON report here")
    _add_config_flags(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FuncGroundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
