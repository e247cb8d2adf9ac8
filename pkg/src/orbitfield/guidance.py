"""Uniform interface to everything model-shaped the trainer consumes:
inpainting residuals, reference-image generation, depth estimation, and the
latent codec.

Two implementations:

* ``TargetSceneOracle`` — a deterministic test double built around a known
  procedural mesh.  Its "residual" is simply (latent - target latent) on the
  regenerate region, so descending it converges to the target scene; no
  network, no weights, fully reproducible.
* ``RemoteGuidance`` — an HTTP client for a sidecar service speaking the
  JSON wire protocol below, with shape validation on every response.

Mask semantics everywhere: 1 marks pixels to regenerate (inpaint), 0 marks
pixels to keep.

Wire protocol (all tensors as base64 little-endian float32 with dims):
    POST /v1/residual  {z:[4,L,L], mask:[1,L,L], prompt, tau, seed} -> {residual:[4,L,L]}
    POST /v1/generate  {prompt, seed, size} -> {image:[3,512,512]}
    POST /v1/depth     {image:[3,H,W]} -> {depth:[1,H,W]}
    POST /v1/encode    {image:[3,512,512]} -> {z:[4,64,64]}
    POST /v1/decode    {z:[4,L,L]} -> {image:[3,8L,8L]}
    GET  /v1/health -> {models: [...]}
"""

from __future__ import annotations

import base64
import time
from dataclasses import dataclass

import numpy as np

from .codec import StubLatentCodec, resize_latent
from .geometry import CameraIntrinsics, ScaffoldMesh, default_intrinsics
from .prerender import CameraPose, rasterize

REFERENCE_PREFIX = "A whole photo of "
REFERENCE_SUFFIX = " in the white background taken with 50mm lens"


class GuidanceError(RuntimeError):
    """Raised when a guidance backend fails or violates the protocol."""


@dataclass
class GuidanceRequest:
    kind: str                      # residual | generate | depth | encode | decode
    latent: np.ndarray = None      # (4, L, L) for residual/decode
    image: np.ndarray = None       # (H, W, 3) for depth/encode
    mask: np.ndarray = None        # (L, L), 1 = regenerate
    prompt: str = ""
    tau: float = None              # diffusion timestep in (0, 1) for residual
    seed: int = 0
    latent_side: int = 64          # for encode
    size: int = 512                # for generate
    # Pose hints consumed only by in-process oracles; never serialized.
    theta: float = None
    phi: float = None

    def __post_init__(self):
        kinds = {"residual", "generate", "depth", "encode", "decode"}
        if self.kind not in kinds:
            raise ValueError(f"unknown request kind {self.kind!r}")
        if self.kind == "residual":
            if self.latent is None or self.mask is None:
                raise ValueError("residual requests need latent and mask")
            if not (self.tau is not None and 0.0 < self.tau < 1.0):
                raise ValueError("residual requests need tau in (0, 1)")
        if self.kind in ("depth", "encode") and self.image is None:
            raise ValueError(f"{self.kind} requests need an image")
        if self.kind == "decode" and self.latent is None:
            raise ValueError("decode requests need a latent")


@dataclass
class GuidanceResponse:
    kind: str
    data: np.ndarray
    model: str
    wall_ms: float


def compose_prompt(text: str, direction: str = "",
                   reference: bool = False) -> str:
    """Assemble the final prompt for a request.

    Reference-image generation wraps the subject in the fixed photographic
    phrasing; training requests append the viewing direction.  An empty
    direction leaves the text unchanged.
    """
    if not text:
        raise ValueError("prompt text must be nonempty")
    if reference:
        return f"{REFERENCE_PREFIX}{text}{REFERENCE_SUFFIX}"
    if direction:
        return f"{text}, {direction} view"
    return text


def direction_bucket(theta: float, phi: float,
                     anchor_center=(90.0, 0.0)) -> str:
    """Coarse view-direction word for prompt conditioning.

    Azimuthal deviation from the anchor center buckets into front (<45°),
    side (<135°), or back; elevation above 60° overrides to overhead.
    """
    if phi > 60.0:
        return "overhead"
    dev = abs((theta - anchor_center[0] + 180.0) % 360.0 - 180.0)
    if dev < 45.0:
        return "front"
    if dev < 135.0:
        return "side"
    return "back"


class TargetSceneOracle:
    """Deterministic guidance built from a known procedural target mesh.

    residual(z, ...) = (z - target_latent) * mask, where the target latent
    is the stub encoding of the target mesh rasterized at the request pose;
    generate/depth return the frontal render; encode/decode are the stub
    codec.
    """

    model_name = "target-scene-oracle"

    def __init__(self, target_mesh: ScaffoldMesh,
                 K: CameraIntrinsics = None, resolution: int = 512,
                 radius: float = 3.0, anchor_center=(90.0, 0.0)):
        self.mesh = target_mesh
        self.resolution = resolution
        self.K = K or default_intrinsics(resolution)
        self.radius = radius
        self.anchor_center = anchor_center
        self.codec = StubLatentCodec()
        self._latent_cache = {}

    def _divisor_side(self, latent_side: int) -> int:
        """Smallest image-side divisor >= latent_side the codec can pool at.

        The block codec needs the image side to be a multiple of the latent
        side; intermediate refinement sides (e.g. 96 under 512 images) are
        served by encoding at this side and resizing down.
        """
        factor = max(1, self.resolution // latent_side)
        while self.resolution % factor:
            factor -= 1
        return self.resolution // factor

    def target_latent(self, theta: float, phi: float,
                      latent_side: int) -> np.ndarray:
        key = (round(float(theta), 6), round(float(phi), 6), latent_side)
        if key not in self._latent_cache:
            pose = CameraPose(theta=theta, phi=phi, radius=self.radius)
            rgb, _, mask = rasterize(self.mesh, pose, self.K, self.resolution)
            enc_side = self._divisor_side(latent_side)
            z = self.codec.encode(rgb, enc_side, mask=mask)
            if enc_side != latent_side:
                z = resize_latent(z, latent_side)
            self._latent_cache[key] = z
        return self._latent_cache[key]

    def submit(self, req: GuidanceRequest) -> GuidanceResponse:
        t0 = time.perf_counter()
        if req.kind == "residual":
            if req.theta is None or req.phi is None:
                raise GuidanceError("oracle residuals need a pose hint")
            side = req.latent.shape[-1]
            target = self.target_latent(req.theta, req.phi, side)
            data = (req.latent - target) * req.mask[None]
        elif req.kind == "generate":
            pose = CameraPose(theta=self.anchor_center[0],
                              phi=self.anchor_center[1], radius=self.radius)
            K = self.K if req.size == self.resolution else default_intrinsics(req.size)
            data, _, _ = rasterize(self.mesh, pose, K, req.size)
        elif req.kind == "depth":
            pose = CameraPose(theta=self.anchor_center[0],
                              phi=self.anchor_center[1], radius=self.radius)
            side = req.image.shape[0]
            K = self.K if side == self.resolution else default_intrinsics(side)
            _, data, _ = rasterize(self.mesh, pose, K, side)
        elif req.kind == "encode":
            data = self.codec.encode(req.image, req.latent_side, mask=req.mask)
        else:  # decode
            data = self.codec.decode(req.latent)
        ms = (time.perf_counter() - t0) * 1000.0
        return GuidanceResponse(kind=req.kind, data=data,
                                model=self.model_name, wall_ms=ms)

    # Convenience surface shared with RemoteGuidance -------------------

    def residual(self, latent, mask, prompt, tau, seed, theta=None, phi=None):
        req = GuidanceRequest(kind="residual", latent=latent, mask=mask,
                              prompt=prompt, tau=tau, seed=seed,
                              theta=theta, phi=phi)
        return self.submit(req).data

    def generate(self, prompt, seed, size=512):
        return self.submit(GuidanceRequest(kind="generate", prompt=prompt,
                                           seed=seed, size=size)).data

    def depth(self, image):
        return self.submit(GuidanceRequest(kind="depth", image=image)).data

    def encode(self, image, latent_side, mask=None):
        return self.submit(GuidanceRequest(kind="encode", image=image,
                                           mask=mask,
                                           latent_side=latent_side)).data

    def decode(self, latent):
        return self.submit(GuidanceRequest(kind="decode", latent=latent)).data

    def health(self):
        return {"models": [self.model_name]}


# ---------------------------------------------------------------------------
# Wire helpers


def tensor_to_wire(arr: np.ndarray) -> dict:
    """numpy array -> {dims, data(base64 little-endian float32)}."""
    a = np.ascontiguousarray(arr, dtype="<f4")
    return {"dims": list(a.shape),
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def wire_to_tensor(obj: dict, expect_shape=None) -> np.ndarray:
    """Inverse of tensor_to_wire with shape/finiteness validation."""
    try:
        dims = tuple(int(d) for d in obj["dims"])
        raw = base64.b64decode(obj["data"])
    except (KeyError, TypeError, ValueError) as exc:
        raise GuidanceError(f"malformed wire tensor: {exc}") from exc
    data = np.frombuffer(raw, dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise GuidanceError(
            f"wire tensor holds {data.size} values, dims say {dims}")
    arr = data.reshape(dims).astype(np.float64)
    if expect_shape is not None and arr.shape != tuple(expect_shape):
        raise GuidanceError(
            f"expected tensor shape {tuple(expect_shape)}, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise GuidanceError("wire tensor contains non-finite values")
    return arr


def image_to_wire(image_hwc: np.ndarray) -> dict:
    return tensor_to_wire(np.moveaxis(image_hwc, 2, 0))


def wire_to_image(obj: dict, side: int = None) -> np.ndarray:
    arr = wire_to_tensor(obj)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise GuidanceError(f"expected (3, H, W) image tensor, got {arr.shape}")
    if side is not None and arr.shape[1:] != (side, side):
        raise GuidanceError(
            f"expected {side}x{side} image, got {arr.shape[1:]}")
    return np.moveaxis(arr, 0, 2)


class RemoteGuidance:
    """HTTP client for a guidance sidecar; validates every payload shape."""

    def __init__(self, endpoint: str, timeout: float = 120.0,
                 retries: int = 1, session=None):
        import requests

        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self._session = session or requests.Session()
        self.model_name = endpoint

    def _post(self, path: str, payload: dict) -> dict:
        import requests

        url = f"{self.endpoint}{path}"
        last_exc = None
        for _ in range(self.retries + 1):
            try:
                resp = self._session.post(url, json=payload,
                                          timeout=self.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code // 100 != 2:
                raise GuidanceError(
                    f"{path} returned {resp.status_code}: {resp.text[:500]}")
            return resp.json()
        raise GuidanceError(f"{path} unreachable after "
                            f"{self.retries + 1} attempts: {last_exc}")

    def health(self) -> dict:
        import requests

        try:
            resp = self._session.get(f"{self.endpoint}/v1/health",
                                     timeout=self.timeout)
        except requests.RequestException as exc:
            raise GuidanceError(f"health check failed: {exc}") from exc
        if resp.status_code != 200:
            raise GuidanceError(f"health returned {resp.status_code}")
        body = resp.json()
        if "models" not in body:
            raise GuidanceError("health response lacks a model list")
        return body

    def residual(self, latent, mask, prompt, tau, seed,
                 theta=None, phi=None) -> np.ndarray:
        side = latent.shape[-1]
        body = self._post("/v1/residual", {
            "z": tensor_to_wire(latent),
            "mask": tensor_to_wire(np.asarray(mask)[None]),
            "prompt": prompt,
            "tau": float(tau),
            "seed": int(seed),
        })
        if "residual" not in body:
            raise GuidanceError("residual response lacks 'residual'")
        return wire_to_tensor(body["residual"], expect_shape=(4, side, side))

    def generate(self, prompt, seed, size: int = 512) -> np.ndarray:
        body = self._post("/v1/generate", {"prompt": prompt,
                                           "seed": int(seed),
                                           "size": int(size)})
        if "image" not in body:
            raise GuidanceError("generate response lacks 'image'")
        return np.clip(wire_to_image(body["image"], side=size), 0.0, 1.0)

    def depth(self, image) -> np.ndarray:
        h, w = image.shape[:2]
        body = self._post("/v1/depth", {"image": image_to_wire(image)})
        if "depth" not in body:
            raise GuidanceError("depth response lacks 'depth'")
        return wire_to_tensor(body["depth"], expect_shape=(1, h, w))[0]

    def encode(self, image, latent_side: int = 64, mask=None) -> np.ndarray:
        body = self._post("/v1/encode", {"image": image_to_wire(image)})
        if "z" not in body:
            raise GuidanceError("encode response lacks 'z'")
        z = wire_to_tensor(body["z"], expect_shape=(4, 64, 64))
        if latent_side == 64:
            return z
        return resize_latent(z, latent_side)

    def decode(self, latent) -> np.ndarray:
        side = latent.shape[-1]
        body = self._post("/v1/decode", {"z": tensor_to_wire(latent)})
        if "image" not in body:
            raise GuidanceError("decode response lacks 'image'")
        return np.clip(wire_to_image(body["image"], side=8 * side), 0.0, 1.0)

    def submit(self, req: GuidanceRequest) -> GuidanceResponse:
        t0 = time.perf_counter()
        if req.kind == "residual":
            data = self.residual(req.latent, req.mask, req.prompt, req.tau,
                                 req.seed)
        elif req.kind == "generate":
            data = self.generate(req.prompt, req.seed, req.size)
        elif req.kind == "depth":
            data = self.depth(req.image)
        elif req.kind == "encode":
            data = self.encode(req.image, req.latent_side, mask=req.mask)
        else:
            data = self.decode(req.latent)
        ms = (time.perf_counter() - t0) * 1000.0
        return GuidanceResponse(kind=req.kind, data=data,
                                model=self.model_name, wall_ms=ms)
