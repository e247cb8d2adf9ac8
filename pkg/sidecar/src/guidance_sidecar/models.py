"""Depth and codec builtin models, plus the registry that owns all three
model handles and their serialization locks."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .diffusion import HarmonizingDiffusionModel


class ModelLoadError(RuntimeError):
    """A model id that cannot be resolved to a servable handle."""


def bilinear_upsample(channel: np.ndarray, out_side: int) -> np.ndarray:
    """Pixel-center-aligned bilinear resize of one (H, W) channel."""
    in_side = channel.shape[0]
    coords = (np.arange(out_side) + 0.5) * (in_side / out_side) - 0.5
    lo = np.clip(np.floor(coords).astype(int), 0, in_side - 1)
    hi = np.clip(lo + 1, 0, in_side - 1)
    frac = np.clip(coords - lo, 0.0, 1.0)
    top = channel[lo][:, lo] * (1 - frac)[None, :] + channel[lo][:, hi] * frac[None, :]
    bottom = channel[hi][:, lo] * (1 - frac)[None, :] + channel[hi][:, hi] * frac[None, :]
    rows = top * (1 - frac)[:, None] + bottom * frac[:, None]
    return rows


class BumpDepthModel:
    """Monocular depth stand-in: non-white pixels form the foreground and
    get a convex bump profile in front of a constant backdrop."""

    name = "builtin-bump-depth"
    background_depth = 3.0

    def load(self, cache_dir=None):
        return self

    def depth(self, image_hwc: np.ndarray) -> np.ndarray:
        foreground = (image_hwc < 0.98).any(axis=2)
        out = np.full(foreground.shape, self.background_depth)
        if not foreground.any():
            return out
        rows, cols = np.nonzero(foreground)
        center = np.array([rows.mean(), cols.mean()])
        extent = max(np.hypot(rows - center[0], cols - center[1]).max(), 1.0)
        yy, xx = np.indices(foreground.shape)
        r = np.clip(np.hypot(yy - center[0], xx - center[1]) / extent, 0.0, 1.0)
        bump = 2.55 - 0.45 * np.sqrt(np.clip(1.0 - r ** 2, 0.0, 1.0))
        out[foreground] = bump[foreground]
        return out


class BlockCodecModel:
    """Latent codec stand-in: 8x block pooling into [-1, 1] channels with a
    foreground-coverage fourth channel; decode is bilinear upsampling.

    Conventions match the training side: a pure white image encodes to
    (1, 1, 1, -1) everywhere.
    """

    name = "builtin-block-codec"
    downscale = 8

    def load(self, cache_dir=None):
        return self

    def encode(self, image_hwc: np.ndarray) -> np.ndarray:
        side = image_hwc.shape[0]
        if side % self.downscale:
            raise ValueError(f"image side {side} is not a multiple of "
                             f"{self.downscale}")
        latent_side = side // self.downscale
        blocks = image_hwc.reshape(latent_side, self.downscale,
                                   latent_side, self.downscale, 3)
        means = blocks.mean(axis=(1, 3))
        coverage = (image_hwc < 1.0 - 1e-9).any(axis=2).astype(np.float64)
        coverage = coverage.reshape(latent_side, self.downscale,
                                    latent_side, self.downscale).mean(axis=(1, 3))
        return np.concatenate([np.moveaxis(2.0 * means - 1.0, 2, 0),
                               (2.0 * coverage - 1.0)[None]], axis=0)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        out_side = latent.shape[-1] * self.downscale
        channels = [np.clip(bilinear_upsample((c + 1.0) / 2.0, out_side),
                            0.0, 1.0)
                    for c in latent[:3]]
        return np.stack(channels, axis=2)


DIFFUSION_MODELS = {"builtin-harmonizer": HarmonizingDiffusionModel}
DEPTH_MODELS = {"builtin-bump-depth": BumpDepthModel}
CODEC_MODELS = {"builtin-block-codec": BlockCodecModel}


def _resolve(table: dict, model_id: str, role: str):
    if model_id in table:
        return table[model_id]()
    if model_id.startswith("hf:"):
        raise ModelLoadError(
            f"{role} model {model_id!r} is a weight-backed backend: it needs "
            f"its pretrained weights present under the cache directory and "
            f"the matching runtime installed, neither of which this build "
            f"ships. Available procedural models: {sorted(table)}")
    raise ModelLoadError(
        f"unknown {role} model {model_id!r}; available: {sorted(table)} "
        f"(or hf:<repo> with cached weights)")


@dataclass
class ModelRegistry:
    """The three model handles behind the service, their device, and the
    per-handle locks that serialize inference."""

    diffusion: object
    depth: object
    codec: object
    device: str = "cpu"
    cache_dir: str | None = None
    ready: bool = False
    locks: dict = field(default_factory=dict)

    def __post_init__(self):
        self.locks = {"diffusion": threading.Lock(),
                      "depth": threading.Lock(),
                      "codec": threading.Lock()}

    @classmethod
    def from_ids(cls, diffusion_id: str = "builtin-harmonizer",
                 depth_id: str = "builtin-bump-depth",
                 codec_id: str = "builtin-block-codec",
                 device: str = "cpu", cache_dir: str | None = None):
        return cls(diffusion=_resolve(DIFFUSION_MODELS, diffusion_id,
                                      "diffusion"),
                   depth=_resolve(DEPTH_MODELS, depth_id, "depth"),
                   codec=_resolve(CODEC_MODELS, codec_id, "codec"),
                   device=device, cache_dir=cache_dir)

    def load(self):
        """Load every handle; the service reports healthy only after."""
        for handle in (self.diffusion, self.depth, self.codec):
            handle.load(cache_dir=self.cache_dir)
        self.ready = True
        return self

    def model_names(self) -> list:
        return [self.diffusion.name, self.depth.name, self.codec.name]
