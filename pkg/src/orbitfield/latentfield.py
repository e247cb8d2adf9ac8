"""The trainable 3D representation: a dense voxel grid carrying a raw
density channel (softplus-activated) and a 4-channel latent feature,
rendered by emission-absorption compositing with hand-derived gradients.

Rendering follows the standard quadrature: along each ray, sample i with
activated density sigma_i over a constant segment length delta contributes
weight w_i = T_i * (1 - exp(-sigma_i * delta)) where T_i is the transmittance
of everything before it.  The rendered latent is the weight-sum of sampled
features and per-ray opacity is the weight total.  ``backprop`` pushes
arbitrary gradients on (latent image, opacity) back to the raw grids exactly
(chain rule through compositing, softplus, and trilinear interpolation), so
training needs no autodiff framework.
"""

from __future__ import annotations

from dataclasses import dataclass

import json
import struct

import numpy as np

from .geometry import CameraIntrinsics
from .prerender import CameraPose

FIELD_MAGIC = b"OFF1"
FEATURE_CHANNELS = 4


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class LatentField:
    resolution: int = 64
    bbox: np.ndarray = None      # (2, 3) [lo, hi], an axis-aligned cube
    density_raw: np.ndarray = None   # (G, G, G)
    features: np.ndarray = None      # (G, G, G, 4)
    density_init: float = -3.0

    def __post_init__(self):
        G = self.resolution
        if G < 2:
            raise ValueError("grid resolution must be at least 2")
        if self.bbox is None:
            self.bbox = np.array([[-0.6] * 3, [0.6] * 3])
        self.bbox = np.asarray(self.bbox, dtype=np.float64)
        sides = self.bbox[1] - self.bbox[0]
        if not (sides > 0).all():
            raise ValueError("bbox must be nondegenerate")
        if not np.allclose(sides, sides[0]):
            raise ValueError("bbox must be a cube")
        if self.density_raw is None:
            self.density_raw = np.full((G, G, G), self.density_init)
        if self.features is None:
            self.features = np.zeros((G, G, G, FEATURE_CHANNELS))
        self.density_raw = np.asarray(self.density_raw, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.density_raw.shape != (G, G, G):
            raise ValueError("density grid shape mismatch")
        if self.features.shape != (G, G, G, FEATURE_CHANNELS):
            raise ValueError("feature grid shape mismatch")


@dataclass
class RayBundle:
    origins: np.ndarray      # (R, 3)
    directions: np.ndarray   # (R, 3) unit
    samples_per_ray: int
    near: float
    far: float
    image_shape: tuple = None  # (h, w) with h*w == R; default (R, 1)

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64)
        self.directions = np.asarray(self.directions, dtype=np.float64)
        norms = np.linalg.norm(self.directions, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("ray directions must be unit length")
        if not self.near < self.far:
            raise ValueError("need near < far")
        if self.samples_per_ray < 1:
            raise ValueError("need at least one sample per ray")
        if self.image_shape is None:
            self.image_shape = (len(self.origins), 1)
        h, w = self.image_shape
        if h * w != len(self.origins):
            raise ValueError("image_shape does not cover the ray count")

    def __len__(self) -> int:
        return len(self.origins)


@dataclass
class RenderOutput:
    latent: np.ndarray    # (4, h, w)
    alpha: np.ndarray     # (h, w) per-ray opacity
    weights: np.ndarray   # (h, w, S) per-sample contribution


class _ForwardCache:
    """Everything backprop needs from the forward pass."""

    __slots__ = ("corner_idx", "corner_w", "sigma_raw", "sigma", "feats",
                 "trans", "absorb", "weights", "delta", "shape")

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


def _interp_setup(field: LatentField, positions: np.ndarray):
    """Trilinear corner indices/weights; out-of-bbox points get zero weight."""
    G = field.resolution
    lo, hi = field.bbox
    g = (positions - lo) / (hi - lo) * (G - 1)
    in_bounds = ((g >= 0.0) & (g <= G - 1.0)).all(axis=-1)
    g = np.clip(g, 0.0, G - 1.0)
    base = np.minimum(g.astype(np.int64), G - 2)
    frac = g - base
    n = len(positions)
    corner_idx = np.empty((n, 8), dtype=np.int64)
    corner_w = np.empty((n, 8))
    k = 0
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                corner_idx[:, k] = ((base[:, 0] + dx) * G + (base[:, 1] + dy)) * G \
                    + (base[:, 2] + dz)
                corner_w[:, k] = wx * wy * wz
                k += 1
    corner_w[~in_bounds] = 0.0
    return corner_idx, corner_w


def query(field: LatentField, positions: np.ndarray):
    """(sigma, feature) at world positions; zero outside the bbox."""
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    idx, w = _interp_setup(field, positions)
    raw_flat = field.density_raw.ravel()
    feat_flat = field.features.reshape(-1, FEATURE_CHANNELS)
    sigma_raw = (raw_flat[idx] * w).sum(axis=1)
    feats = (feat_flat[idx] * w[..., None]).sum(axis=1)
    sigma = softplus(sigma_raw)
    # fully out-of-bounds points carry zero interpolation weight; softplus of
    # the resulting 0 raw value is not 0, so mask explicitly
    covered = w.sum(axis=1) > 0
    sigma = np.where(covered, sigma, 0.0)
    feats = np.where(covered[:, None], feats, 0.0)
    return sigma, feats


def scale_intrinsics(K: CameraIntrinsics, scale: float) -> CameraIntrinsics:
    """Intrinsics for a rescaled image, keeping pixel centers aligned."""
    return CameraIntrinsics(fx=K.fx * scale, fy=K.fy * scale,
                            cx=(K.cx + 0.5) * scale - 0.5,
                            cy=(K.cy + 0.5) * scale - 0.5)


def generate_rays(pose: CameraPose, K: CameraIntrinsics, image_side: int,
                  render_side: int, near: float, far: float,
                  samples_per_ray: int) -> RayBundle:
    """One ray per render pixel, through a downscaled pinhole camera.

    K describes the full ``image_side`` resolution; the ray raster is
    ``render_side`` square.
    """
    Ks = scale_intrinsics(K, render_side / image_side)
    R, C = pose.world_to_camera()
    us, vs = np.meshgrid(np.arange(render_side), np.arange(render_side))
    d_cam = np.stack([(us.ravel() - Ks.cx) / Ks.fx,
                      (vs.ravel() - Ks.cy) / Ks.fy,
                      np.ones(render_side * render_side)], axis=1)
    d_world = d_cam @ R  # rows of R are camera axes in world coords
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(C, d_world.shape).copy()
    return RayBundle(origins=origins, directions=d_world,
                     samples_per_ray=samples_per_ray, near=near, far=far,
                     image_shape=(render_side, render_side))


def render(field: LatentField, rays: RayBundle, rng=None, with_cache=False):
    """Emission-absorption rendering of the latent field.

    With an rng, sample positions are stratified-jittered within their
    segments; without one they sit at segment midpoints (deterministic).
    """
    R = len(rays)
    S = rays.samples_per_ray
    delta = (rays.far - rays.near) / S
    if rng is None:
        jitter = np.full((R, S), 0.5)
    else:
        jitter = rng.random((R, S))
    t = rays.near + (np.arange(S) + jitter) * delta       # (R, S)
    pos = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]

    idx, w = _interp_setup(field, pos.reshape(-1, 3))
    raw_flat = field.density_raw.ravel()
    feat_flat = field.features.reshape(-1, FEATURE_CHANNELS)
    sigma_raw = (raw_flat[idx] * w).sum(axis=1).reshape(R, S)
    feats = (feat_flat[idx] * w[..., None]).sum(axis=1).reshape(R, S,
                                                                FEATURE_CHANNELS)
    covered = w.sum(axis=1).reshape(R, S) > 0
    sigma = np.where(covered, softplus(sigma_raw), 0.0)
    feats = np.where(covered[..., None], feats, 0.0)

    optical = sigma * delta
    trans = np.exp(-np.concatenate(
        [np.zeros((R, 1)), np.cumsum(optical[:, :-1], axis=1)], axis=1))
    absorb = -np.expm1(-optical)          # 1 - exp(-sigma*delta)
    weights = trans * absorb              # (R, S)

    h, w_img = rays.image_shape
    latent = np.moveaxis(
        (weights[..., None] * feats).sum(axis=1).reshape(h, w_img,
                                                         FEATURE_CHANNELS),
        2, 0)
    alpha = weights.sum(axis=1).reshape(h, w_img)
    out = RenderOutput(latent=latent, alpha=alpha,
                       weights=weights.reshape(h, w_img, S))
    if not with_cache:
        return out
    cache = _ForwardCache(corner_idx=idx, corner_w=w, sigma_raw=sigma_raw,
                          sigma=sigma, feats=feats, trans=trans,
                          absorb=absorb, weights=weights, delta=delta,
                          shape=(R, S))
    return out, cache


def backprop(field: LatentField, cache: _ForwardCache,
             dL_dlatent: np.ndarray, dL_dalpha: np.ndarray):
    """Exact gradients of the rendering map w.r.t. both raw grids.

    dL_dlatent has the rendered latent's (4, h, w) shape and dL_dalpha the
    (h, w) opacity shape; returns (d_density_raw, d_features).
    """
    R, S = cache.shape
    if dL_dlatent.size != FEATURE_CHANNELS * R or dL_dalpha.size != R:
        raise ValueError("gradient shapes do not match the cached forward")
    dz = np.moveaxis(dL_dlatent, 0, -1).reshape(R, FEATURE_CHANNELS)
    da = np.asarray(dL_dalpha, dtype=np.float64).reshape(R)

    # dL/dw_i = <dL/dz, f_i> + dL/dalpha
    g = np.einsum("rc,rsc->rs", dz, cache.feats) + da[:, None]
    gw = g * cache.weights
    # sum over later samples: shifted reversed cumulative sum
    suffix = np.cumsum(gw[:, ::-1], axis=1)[:, ::-1]
    later = np.concatenate([suffix[:, 1:], np.zeros((R, 1))], axis=1)
    d_sigma = cache.delta * (g * cache.trans * (1.0 - cache.absorb) - later)
    d_sigma_raw = d_sigma * sigmoid(cache.sigma_raw)

    d_feats = cache.weights[..., None] * dz[:, None, :]   # (R, S, 4)

    d_raw = np.zeros(field.resolution ** 3)
    d_feat = np.zeros((field.resolution ** 3, FEATURE_CHANNELS))
    contrib_raw = cache.corner_w * d_sigma_raw.reshape(-1, 1)
    contrib_feat = cache.corner_w[..., None] * d_feats.reshape(-1, 1,
                                                               FEATURE_CHANNELS)
    np.add.at(d_raw, cache.corner_idx.ravel(), contrib_raw.ravel())
    np.add.at(d_feat, cache.corner_idx.ravel(),
              contrib_feat.reshape(-1, FEATURE_CHANNELS))
    G = field.resolution
    return d_raw.reshape(G, G, G), d_feat.reshape(G, G, G, FEATURE_CHANNELS)


def composite_background(out: RenderOutput, background: np.ndarray) -> np.ndarray:
    """Terminate rays on a constant background latent: z + (1-alpha)*bg."""
    background = np.asarray(background, dtype=np.float64)
    return out.latent + (1.0 - out.alpha)[None] * background[:, None, None]


def save_field(field: LatentField, path, iteration: int = 0) -> None:
    """JSON header plus raw little-endian float32 dumps of both grids."""
    header = json.dumps({
        "resolution": field.resolution,
        "bbox": field.bbox.tolist(),
        "iteration": iteration,
    }).encode()
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(field.density_raw, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(field.features, dtype="<f4").tobytes())


def load_field(path) -> tuple[LatentField, int]:
    with open(path, "rb") as fh:
        if fh.read(4) != FIELD_MAGIC:
            raise ValueError("bad field checkpoint magic")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        G = header["resolution"]
        raw = np.frombuffer(fh.read(4 * G ** 3), dtype="<f4")
        feats = np.frombuffer(fh.read(4 * G ** 3 * FEATURE_CHANNELS),
                              dtype="<f4")
    fld = LatentField(
        resolution=G,
        bbox=np.array(header["bbox"]),
        density_raw=raw.reshape(G, G, G).astype(np.float64),
        features=feats.reshape(G, G, G, FEATURE_CHANNELS).astype(np.float64),
    )
    return fld, header["iteration"]
