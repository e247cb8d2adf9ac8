"""Service entry point: resolve model ids, load them, and serve."""

from __future__ import annotations

import argparse
import os
import sys

from .app import create_app
from .models import ModelLoadError, ModelRegistry

CACHE_ENV = "GUIDANCE_SIDECAR_CACHE"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="guidance-sidecar",
        description="HTTP guidance service: inpainting residuals, image "
                    "generation, depth estimation, latent codec")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8017)
    parser.add_argument("--diffusion-model", default="builtin-harmonizer")
    parser.add_argument("--depth-model", default="builtin-bump-depth")
    parser.add_argument("--codec-model", default="builtin-block-codec")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--cache-dir", default=None,
                        help=f"weight cache directory (default: ${CACHE_ENV})")
    parser.add_argument("--log-level", default="info")
    return parser


def main(argv=None) -> int:
    import uvicorn

    args = build_parser().parse_args(argv)
    cache_dir = args.cache_dir or os.environ.get(CACHE_ENV)
    try:
        registry = ModelRegistry.from_ids(
            diffusion_id=args.diffusion_model, depth_id=args.depth_model,
            codec_id=args.codec_model, device=args.device,
            cache_dir=cache_dir)
    except ModelLoadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    registry.load()
    uvicorn.run(create_app(registry), host=args.host, port=args.port,
                log_level=args.log_level)
    return 0


if __name__ == "__main__":
    sys.exit(main())
