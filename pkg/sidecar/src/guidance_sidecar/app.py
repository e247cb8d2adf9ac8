"""The HTTP surface: six endpoints over the model registry.

POST /v1/residual  {z, mask, prompt, tau, seed}        -> {residual}
POST /v1/generate  {prompt, seed, size}                -> {image}
POST /v1/depth     {image}                             -> {depth}
POST /v1/encode    {image}                             -> {z}
POST /v1/decode    {z}                                 -> {image}
GET  /v1/health                                        -> {models, device}

All tensors travel as {dims, data} with base64 little-endian float32.
Malformed tensors and out-of-contract values return 422; every endpoint
returns 503 until the registry finishes loading.
"""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .models import ModelRegistry
from .wire import WireError, decode_tensor, encode_tensor

REFERENCE_PREFIX = "A whole photo of "
REFERENCE_SUFFIX = " in the white background taken with 50mm lens"

MAX_IMAGE_SIDE = 2048
MAX_LATENT_SIDE = 256


class TensorWire(BaseModel):
    dims: list[int]
    data: str


class ResidualRequest(BaseModel):
    z: TensorWire
    mask: TensorWire
    prompt: str = ""
    tau: float
    seed: int = 0
    guidance_scale: float | None = None  # accepted; builtin models ignore it


class GenerateRequest(BaseModel):
    prompt: str
    seed: int = 0
    size: int = 512
    # None: the server decides by inspecting the prompt for the reference
    # phrasing; True: the client already applied it; False: apply it here.
    prompt_is_templated: bool | None = None


class ImageRequest(BaseModel):
    image: TensorWire


class LatentRequest(BaseModel):
    z: TensorWire


def _read(wire: TensorWire, expect_rank: int = None) -> np.ndarray:
    try:
        return decode_tensor(wire.dims, wire.data, expect_rank=expect_rank)
    except WireError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc


def _read_latent(wire: TensorWire) -> np.ndarray:
    z = _read(wire, expect_rank=3)
    if z.shape[0] != 4 or z.shape[1] != z.shape[2]:
        raise HTTPException(422, f"latent must be (4, L, L), got {z.shape}")
    if z.shape[1] > MAX_LATENT_SIDE:
        raise HTTPException(422, f"latent side {z.shape[1]} exceeds "
                                 f"{MAX_LATENT_SIDE}")
    return z


def _read_image(wire: TensorWire) -> np.ndarray:
    image = _read(wire, expect_rank=3)
    if image.shape[0] != 3:
        raise HTTPException(422, f"image must be (3, H, W), got {image.shape}")
    if max(image.shape[1:]) > MAX_IMAGE_SIDE:
        raise HTTPException(422, f"image exceeds {MAX_IMAGE_SIDE} per side")
    return np.clip(np.moveaxis(image, 0, 2), 0.0, 1.0)


def create_app(registry: ModelRegistry) -> FastAPI:
    app = FastAPI(title="guidance-sidecar")

    def require_ready():
        if not registry.ready:
            raise HTTPException(status_code=503,
                                detail="models are still loading")

    @app.get("/v1/health")
    def health():
        require_ready()
        return {"models": registry.model_names(), "device": registry.device}

    @app.post("/v1/residual")
    def residual(body: ResidualRequest):
        require_ready()
        z = _read_latent(body.z)
        mask = _read(body.mask, expect_rank=3)
        if mask.shape != (1, z.shape[1], z.shape[2]):
            raise HTTPException(422, f"mask must be (1, {z.shape[1]}, "
                                     f"{z.shape[2]}), got {mask.shape}")
        if not 0.0 < body.tau < 1.0:
            raise HTTPException(422, f"tau must lie in (0, 1), got {body.tau}")
        with registry.locks["diffusion"]:
            out = registry.diffusion.residual(
                z, mask, body.prompt, body.tau, body.seed,
                guidance_scale=body.guidance_scale)
        return {"residual": encode_tensor(out)}

    @app.post("/v1/generate")
    def generate(body: GenerateRequest):
        require_ready()
        if not body.prompt:
            raise HTTPException(422, "prompt must be nonempty")
        if not 16 <= body.size <= MAX_IMAGE_SIDE:
            raise HTTPException(422, f"size must lie in [16, "
                                     f"{MAX_IMAGE_SIDE}], got {body.size}")
        templated = body.prompt_is_templated
        if templated is None:
            templated = (body.prompt.startswith(REFERENCE_PREFIX)
                         and body.prompt.endswith(REFERENCE_SUFFIX))
        prompt = (body.prompt if templated
                  else f"{REFERENCE_PREFIX}{body.prompt}{REFERENCE_SUFFIX}")
        with registry.locks["diffusion"]:
            image = registry.diffusion.generate(prompt, body.seed, body.size)
        return {"image": encode_tensor(np.moveaxis(image, 2, 0))}

    @app.post("/v1/depth")
    def depth(body: ImageRequest):
        require_ready()
        image = _read_image(body.image)
        with registry.locks["depth"]:
            out = registry.depth.depth(image)
        return {"depth": encode_tensor(out[None])}

    @app.post("/v1/encode")
    def encode(body: ImageRequest):
        require_ready()
        image = _read_image(body.image)
        if image.shape[0] != image.shape[1]:
            raise HTTPException(422, f"encode needs a square image, got "
                                     f"{image.shape[:2]}")
        if image.shape[0] % registry.codec.downscale:
            raise HTTPException(422, f"image side {image.shape[0]} is not a "
                                     f"multiple of {registry.codec.downscale}")
        with registry.locks["codec"]:
            z = registry.codec.encode(image)
        return {"z": encode_tensor(z)}

    @app.post("/v1/decode")
    def decode(body: LatentRequest):
        require_ready()
        z = _read_latent(body.z)
        with registry.locks["codec"]:
            image = registry.codec.decode(z)
        return {"image": encode_tensor(np.moveaxis(image, 2, 0))}

    return app
