"""Single entry point: ``railsynth {synth,flow,train,eval,ablate,validate}``.

Exit codes: 0 success, 1 validation/config error, 2 runtime failure.
Every subcommand is re-runnable: identical config and seed produce
byte-identical manifests and metric tables (report timestamps aside).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, ManifestError, RailsynthError, ValidationError

log = logging.getLogger("railsynth")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _default_jobs() -> int:
    env = os.environ.get("RAILSYNTH_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"RAILSYNTH_JOBS={env!r} is not an integer")
    return os.cpu_count() or 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="railsynth",
                     description="Synthetic railway-obstacle data, optical-flow "
                                 "priors, segmentation training and evaluation")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate a composite dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=None)

    p = sub.add_parser("flow", help="estimate flow for every manifest pair")
    p.add_argument("--pairs", required=True, help="dataset manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--plugin", default=None, help="external flow command")
    p.add_argument("--config", default=None)
    p.add_argument("--jobs", type=int, default=None)

    p = sub.add_parser("train", help="train the segmentation model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--use-flow", action="store_true")
    p.add_argument("--flow-dir", default=None)
    p.add_argument("--out", required=True, help="checkpoint directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint over distance bands")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bands", required=True,
                   help="comma list: near=<manifest>,mid=<manifest>,far=<manifest>")
    p.add_argument("--use-flow", action="store_true")
    p.add_argument("--flow-dir", default=None)
    p.add_argument("--plot", default=None, help="directory for overlay figures")
    p.add_argument("--out", default=None, help="report directory")
    p.add_argument("--config", default=None)

    p = sub.add_parser("ablate", help="train/evaluate dataset variants")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("validate", help="check scenes and manifests")
    p.add_argument("--scenes", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--config", default=None)
    return parser


def _parse_bands(spec: str) -> dict[str, str]:
    bands = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"--bands entry {part!r} is not name=<manifest>")
        name, path = part.split("=", 1)
        bands[name.strip()] = path.strip()
    if not bands:
        raise ConfigError("--bands is empty")
    return bands


def cmd_synth(args) -> int:
    from .compositor import synthesize_dataset
    from .config import load_config
    from .datasets import build_cutout_pools, load_scenes_dir

    cfg = load_config(args.config)
    scenes = load_scenes_dir(cfg.paths.scenes_dir)
    pools = build_cutout_pools(cfg.paths.objects_dir, cfg.detect)
    jobs = args.jobs or _default_jobs()
    manifest = synthesize_dataset(scenes, pools, cfg.synthesis, args.out, jobs=jobs)
    print(manifest)
    return 0


def _flow_task(task):
    from . import raster
    from .optical_flow import estimate_flow, write_flow_file

    frame_t, frame_t1, out_path, params = task
    flow = estimate_flow(raster.load_image(frame_t), raster.load_image(frame_t1),
                         params)
    write_flow_file(out_path, flow)
    return out_path


def cmd_flow(args) -> int:
    from . import raster
    from .config import load_config
    from .optical_flow import FlowSolverParams, external_flow, write_flow_file
    from .plugins import PluginClient
    from .scene_model import load_manifest

    params = FlowSolverParams()
    if args.config:
        params = load_config(args.config).flow.params
    manifest_path = Path(args.pairs)
    records = load_manifest(manifest_path)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    tasks = []
    for rec in records:
        out_path = out_dir / (Path(rec.frame_t).stem + ".rsfl")
        tasks.append((manifest_path.parent / rec.frame_t,
                      manifest_path.parent / rec.frame_t1, out_path))

    if args.plugin:
        with PluginClient(args.plugin) as client:
            for frame_t, frame_t1, out_path in tasks:
                flow = external_flow(raster.load_image(frame_t),
                                     raster.load_image(frame_t1),
                                     args.plugin, client=client)
                write_flow_file(out_path, flow)
    else:
        jobs = args.jobs or _default_jobs()
        payload = [(ft, ft1, op, params) for ft, ft1, op in tasks]
        if jobs > 1 and len(payload) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for _ in pool.map(_flow_task, payload, chunksize=4):
                    pass
        else:
            for item in payload:
                _flow_task(item)
    print(f"{len(tasks)} flow fields -> {out_dir}")
    return 0


def _resolved_model_config(cfg, use_flow: bool):
    wanted = 5 if use_flow else 3
    raw_model = (cfg.raw.get("model") or {})
    if "in_channels" in raw_model and raw_model["in_channels"] != wanted:
        raise ConfigError(
            f"model.in_channels={raw_model['in_channels']} conflicts with "
            f"use_flow={use_flow} (expected {wanted})")
    return replace(cfg.model, in_channels=wanted)


def cmd_train(args) -> int:
    from .config import load_config
    from .segmentation import train

    cfg = load_config(args.config)
    model_config = _resolved_model_config(cfg, args.use_flow)
    ckpt, history = train(args.manifest, model_config, cfg.train,
                          use_flow=args.use_flow, flow_dir=args.flow_dir,
                          out_dir=args.out)
    final = history[-1]
    print(f"{ckpt} (final val_miou={final['val_miou']:.4f})")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate_bands
    from .report import config_fingerprint, render_eval_figures, plot_band_summary, write_report

    bands = _parse_bands(args.bands)
    fingerprint_src = {"checkpoint": str(args.checkpoint), "bands": bands,
                       "use_flow": bool(args.use_flow)}
    if args.config:
        from .config import load_config
        fingerprint_src["config"] = load_config(args.config).raw
    report = evaluate_bands(args.checkpoint, bands, use_flow=args.use_flow,
                            flow_dir=args.flow_dir,
                            config_fingerprint=config_fingerprint(fingerprint_src))
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent / "report"
    json_path, csv_path = write_report(report, out_dir)
    if args.plot:
        plot_band_summary(report, Path(args.plot) / "bands_summary.png")
        render_eval_figures(args.checkpoint, bands, args.plot,
                            use_flow=args.use_flow, flow_dir=args.flow_dir)
    for band in sorted(report.per_band):
        m = report.per_band[band]
        print(f"{band}: miou={m.miou:.4f} pixel_accuracy={m.pixel_accuracy:.4f} "
              f"(n={m.sample_count})")
    print(f"report: {json_path} {csv_path}")
    return 0


def cmd_ablate(args) -> int:
    from .config import load_config
    from .evaluation import run_ablation
    from .report import write_ablation_table

    cfg = load_config(args.config)
    abl = cfg.ablation
    if len(abl.variants) < 2:
        raise ConfigError("ablation.variants: need at least 2 variants")
    if not abl.eval_manifests:
        raise ConfigError("ablation.eval_manifests: required")
    model_config = _resolved_model_config(cfg, abl.use_flow)
    out_dir = Path(args.out) if args.out else Path(cfg.paths.out_dir) / "ablation"
    rows = run_ablation(abl.variants, model_config, cfg.train, abl.eval_manifests,
                        use_flow=abl.use_flow, out_dir=out_dir, seeds=abl.seeds)
    json_path, csv_path = write_ablation_table(rows, out_dir)
    for row in rows:
        print(f"{row['variant']} seed={row['seed']}: miou={row['miou']:.4f}")
    print(f"table: {json_path} {csv_path}")
    return 0


def cmd_validate(args) -> int:
    from .datasets import load_scenes_dir
    from .scene_model import load_manifest, validate_scene

    checked = False
    failures = 0
    if args.scenes:
        checked = True
        scenes = load_scenes_dir(args.scenes, strict=False)
        for scene in scenes:
            violations = validate_scene(scene)
            if violations:
                failures += 1
                for v in violations:
                    print(f"scene {scene.scene_id}: {v}")
        print(f"scenes: {len(scenes)} checked, {failures} invalid")
    if args.manifest:
        checked = True
        records = load_manifest(args.manifest)
        base = Path(args.manifest).parent
        missing = 0
        for rec in records:
            for rel in rec.raster_paths():
                if not (base / rel).is_file():
                    print(f"sample {rec.scene_id} (seed {rec.seed}): missing {rel}")
                    missing += 1
        failures += missing
        print(f"manifest: {len(records)} records, {missing} missing rasters")
    if args.config:
        checked = True
        from .config import load_config
        load_config(args.config)
        print(f"config: {args.config} ok")
    if not checked:
        raise ConfigError("validate: pass --scenes, --manifest, and/or --config")
    return 0 if failures == 0 else 1


_COMMANDS = {"synth": cmd_synth, "flow": cmd_flow, "train": cmd_train,
             "eval": cmd_eval, "ablate": cmd_ablate, "validate": cmd_validate}


def dispatch(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            print(parser.format_usage(), file=sys.stderr)
            return 1
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ConfigError, ValidationError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RailsynthError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.exception("unhandled failure")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
