"""Command-line entry point: config wiring, guidance selection, run
execution, and artifact export.

Two subcommands:

* ``run`` — the full text/image to orbit pipeline (scaffold, training,
  orbit export) with either the built-in synthetic oracle or a remote
  guidance service;
* ``scaffold`` — geometry and pre-rendering only: RGB-D in, PLY mesh and
  view-bank directory out.

Exit codes: 0 success, 2 usage error, 3 guidance endpoint unreachable,
1 internal failure.  A run directory always ends up with a manifest plus
either the full artifact set or a stage-tagged error file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from .geometry import (build_scaffold, default_intrinsics, load_rgbd,
                       save_mesh_ply)
from .guidance import GuidanceError, RemoteGuidance, TargetSceneOracle
from .prerender import build_view_bank, save_view_bank
from .scenes import make_two_tone_sphere
from .trainer import (PipelineError, TrainConfig, config_from_dict,
                      config_to_dict, run_pipeline)

ENDPOINT_ENV = "ORBITFIELD_ENDPOINT"

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_UNREACHABLE = 3


def _file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _build_identifier() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"],
                             capture_output=True, text=True, timeout=10,
                             cwd=Path(__file__).parent)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    try:
        from importlib.metadata import version
        return "pkg-" + version("orbitfield")
    except Exception:
        return "unknown"


def write_manifest(out_dir: Path, cfg: TrainConfig, mode: str,
                   inputs: dict) -> None:
    """Run manifest: written before training, never touched afterwards."""
    manifest = {
        "config": config_to_dict(cfg),
        "input_hashes": {k: (_file_sha256(v) if v else None)
                         for k, v in inputs.items()},
        "guidance_mode": mode,
        "output_paths": {
            "scaffold": "scaffold.ply", "view_bank": "view_bank",
            "checkpoint": "field.ckpt", "orbit": "orbit",
            "report": "report.json",
        },
        "build": _build_identifier(),
        "seed": cfg.seed,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def _load_config(args) -> TrainConfig:
    if args.config:
        with open(args.config) as fh:
            cfg = config_from_dict(json.load(fh))
    else:
        cfg = TrainConfig()
    # flags override file values
    overrides = {"prompt": args.text}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return config_from_dict({**config_to_dict(cfg), **overrides})


def cmd_run(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if bool(args.image) != bool(args.depth):
        print("error: --image and --depth must be given together",
              file=sys.stderr)
        return EXIT_USAGE

    cfg = _load_config(args)

    if args.guidance == "remote":
        endpoint = args.endpoint or os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            print(f"error: remote guidance needs --endpoint or "
                  f"${ENDPOINT_ENV}", file=sys.stderr)
            return EXIT_USAGE
        guidance = RemoteGuidance(endpoint)
        try:
            guidance.health()
        except GuidanceError as exc:
            print(f"error: guidance endpoint unreachable: {exc}",
                  file=sys.stderr)
            return EXIT_UNREACHABLE
    else:
        guidance = TargetSceneOracle(make_two_tone_sphere(),
                                     resolution=cfg.image_side,
                                     radius=cfg.camera_radius)

    image = None
    if args.image:
        try:
            image = load_rgbd(args.image, args.depth)
        except (OSError, ValueError) as exc:
            print(f"error: cannot load inputs: {exc}", file=sys.stderr)
            return EXIT_USAGE

    write_manifest(out, cfg, args.guidance,
                   {"image": args.image, "depth": args.depth})

    try:
        run_pipeline(cfg, guidance, out, image=image)
    except PipelineError as exc:
        with open(out / "error.json", "w") as fh:
            json.dump({"stage": exc.stage, "message": str(exc)}, fh, indent=2)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


def cmd_scaffold(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        image = load_rgbd(args.image, args.depth)
    except (OSError, ValueError) as exc:
        print(f"error: cannot load inputs: {exc}", file=sys.stderr)
        return EXIT_USAGE

    K = default_intrinsics(image.rgb.shape[0])
    try:
        mesh, transform = build_scaffold(image, K)
        save_mesh_ply(mesh, out / "scaffold.ply")
        bank = build_view_bank(mesh, args.views,
                               (60.0, 120.0, -30.0, 30.0), K,
                               seed=args.seed or 0,
                               resolution=image.rgb.shape[0])
        save_view_bank(bank, out / "view_bank")
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    print(f"scaffold: {mesh.vertices.shape[0]} vertices, "
          f"{mesh.faces.shape[0]} faces, {args.views} views -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orbitfield",
        description="Single-view RGB-D to full-orbit 3D object fields")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="full pipeline: inputs to orbit")
    p_run.add_argument("--text", required=True,
                       help="object description driving guidance")
    p_run.add_argument("--image", help="input RGB image (PNG)")
    p_run.add_argument("--depth", help="input depth (.npy or raw .f32)")
    p_run.add_argument("--guidance", choices=("oracle", "remote"),
                       default="oracle")
    p_run.add_argument("--endpoint",
                       help=f"guidance service URL (or ${ENDPOINT_ENV})")
    p_run.add_argument("--config", help="JSON config file")
    p_run.add_argument("--out", default="orbitfield_run")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.set_defaults(func=cmd_run)

    p_sc = sub.add_parser("scaffold",
                          help="geometry + pre-render only: RGB-D to PLY")
    p_sc.add_argument("--image", required=True)
    p_sc.add_argument("--depth", required=True)
    p_sc.add_argument("--views", type=int, default=64)
    p_sc.add_argument("--out", default="orbitfield_scaffold")
    p_sc.add_argument("--seed", type=int, default=None)
    p_sc.set_defaults(func=cmd_scaffold)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
