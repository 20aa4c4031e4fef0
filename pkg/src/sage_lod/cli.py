"""Command-line interface: sage-lod <subcommand> --config <path> [...].

Exit codes: 0 success, 1 internal error, 2 invalid input or configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import PipelineConfig
from .errors import InputError, SageLodError
from .lod import SelectionPlan

log = logging.getLogger("sage_lod")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sage-lod",
        description="Semantic-driven adaptive level-of-detail selection "
                    "for Gaussian-splat scenes")
    parser.add_argument("--verbose", "-v", action="store_true",
                        help="log progress details")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, needs_config=True):
        p = sub.add_parser(name, help=help_text)
        if needs_config:
            p.add_argument("--config", required=True, type=Path,
                           help="scene config JSON")
            p.add_argument("--out", type=Path,
                           help="output directory (overrides the config)")
        return p

    add("label", "label the SfM points by majority voting over mask views")
    add("profile", "measure per-(label, iteration, view) quality")
    add("fit", "fit distance-quality curves from the profile")

    p = add("select", "choose the cheapest iteration per label and target")
    p.add_argument("--target", type=float, action="append",
                   help="target SSIM (repeatable; default from config)")
    p.add_argument("--view", help="view id (default: first profiled view)")
    p.add_argument("--mode", choices=["empirical", "model"])

    p = add("compose", "merge the selected checkpoints into one PLY")
    p.add_argument("--plan", type=Path, help="plan JSON (default: from select)")
    p.add_argument("--target", type=float)
    p.add_argument("--view", help="view id used by the plan")
    p.add_argument("--mode", choices=["empirical", "model"])

    p = add("render", "render the composed scene and measure final quality")
    p.add_argument("--plan", type=Path)
    p.add_argument("--target", type=float)
    p.add_argument("--view", help="view id used by the plan")
    p.add_argument("--mode", choices=["empirical", "model"])

    p = add("report", "write the per-label selection table for one view")
    p.add_argument("--view", help="view id (default: first profiled view)")
    p.add_argument("--mode", choices=["empirical", "model"])

    p = add("synth", "generate a synthetic scene directory", needs_config=False)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--spec", type=Path,
                   help="scene spec JSON (default: built-in standard scene)")
    return parser


def _resolve_plan(config: PipelineConfig, args) -> SelectionPlan:
    if args.plan is not None:
        if not args.plan.exists():
            raise InputError(f"plan file not found: {args.plan}")
        return SelectionPlan.from_json(json.loads(args.plan.read_text()))
    targets = [args.target] if args.target is not None else None
    plans = pipeline.cmd_select(config, view_id=args.view, targets=targets,
                                mode=args.mode)
    target = args.target if args.target is not None else sorted(plans)[0]
    return plans[target]


def run(argv: list[str]) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "synth":
        from .synth import (
            STANDARD_ITERATIONS,
            STANDARD_LEVELS,
            SceneSpec,
            generate_scene,
            standard_scene_spec,
            write_scene,
        )

        if args.spec is not None:
            spec = SceneSpec.from_json(json.loads(args.spec.read_text()))
        else:
            spec = standard_scene_spec(args.seed)
        scene = generate_scene(spec)
        write_scene(scene, args.out, STANDARD_LEVELS, STANDARD_ITERATIONS)
        print(f"synthetic scene written to {args.out}")
        return 0

    config = PipelineConfig.load(args.config)
    if getattr(args, "out", None) is not None:
        config.out_dir = args.out

    if args.command == "label":
        out = pipeline.cmd_label(config)
        print(f"labeled points written to {out}")
    elif args.command == "profile":
        profile = pipeline.cmd_profile(config)
        print(f"{len(profile.samples)} samples -> {config.profile_json_path}")
    elif args.command == "fit":
        curves = pipeline.cmd_fit(config)
        print(f"{len(curves)} curves -> {config.curves_path}")
    elif args.command == "select":
        targets = args.target if args.target else None
        plans = pipeline.cmd_select(config, view_id=args.view, targets=targets,
                                    mode=args.mode)
        for target, plan in sorted(plans.items()):
            print(f"t={target:g}: {plan.total_gaussians} gaussians "
                  f"({plan.total_bytes / 1e6:.1f} MB) "
                  f"-> {config.plan_path(target, plan.view_id)}")
    elif args.command == "compose":
        plan = _resolve_plan(config, args)
        out = pipeline.cmd_compose(config, plan)
        print(f"composed cloud written to {out}")
    elif args.command == "render":
        plan = _resolve_plan(config, args)
        results = pipeline.cmd_render(config, plan)
        for view_id, m in results["view_metrics"].items():
            print(f"{view_id}: ssim={m['ssim']:.4f} psnr={m['psnr']}")
    elif args.command == "report":
        report = pipeline.cmd_report(config, view_id=args.view, mode=args.mode)
        print(report.to_text())
    return 0


def main() -> None:
    try:
        sys.exit(run(sys.argv[1:]))
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(2)
    except SageLodError as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(2)


if __name__ == "__main__":
    main()
