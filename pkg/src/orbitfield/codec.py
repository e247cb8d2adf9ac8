"""Latent image codec interface and the built-in deterministic stub codec.

The pipeline trains a field that emits 4-channel latent images.  A codec maps
between RGB images and that latent space.  The stub codec defined here is the
bit-exact fallback used whenever no external codec service is configured:

  encode: channels 0-2 are the block-averaged RGB mapped from [0,1] to [-1,1];
          channel 3 is the block-averaged foreground mask mapped the same way.
  decode: nearest-neighbour 8x upsample of channels 0-2 mapped back to [0,1].

Consequently ``decode(encode(x))`` equals the 8x-block-averaged ``x`` exactly,
which tests rely on.
"""

from __future__ import annotations

import numpy as np

# Fixed image/latent side ratio of the latent space (a 4xLxL latent decodes
# to an 8L x 8L image).
LATENT_DOWNSCALE = 8

# Latent pixel value of empty white background: white RGB maps to +1 on the
# color channels and an empty mask maps to -1 on the mask channel.
WHITE_BACKGROUND_LATENT = np.array([1.0, 1.0, 1.0, -1.0])


def block_average(img: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool a (H, W) or (H, W, C) array over factor x factor blocks."""
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise ValueError(f"image side {h}x{w} not divisible by {factor}")
    hb, wb = h // factor, w // factor
    if img.ndim == 2:
        return img.reshape(hb, factor, wb, factor).mean(axis=(1, 3))
    return img.reshape(hb, factor, wb, factor, img.shape[2]).mean(axis=(1, 3))


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (H, W) or (H, W, C) array, edge-clamped."""
    h, w = img.shape[:2]
    # Align block centres: output pixel j samples input coordinate
    # (j + 0.5) * h/out_h - 0.5.
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)
    fx = np.clip(xs - x0, 0.0, 1.0)
    if img.ndim == 2:
        a = img[np.ix_(y0, x0)] * np.outer(1 - fy, 1 - fx)
        b = img[np.ix_(y0, x1)] * np.outer(1 - fy, fx)
        c = img[np.ix_(y1, x0)] * np.outer(fy, 1 - fx)
        d = img[np.ix_(y1, x1)] * np.outer(fy, fx)
        return a + b + c + d
    wy = np.stack([1 - fy, fy])  # (2, out_h)
    wx = np.stack([1 - fx, fx])
    out = np.zeros((out_h, out_w, img.shape[2]))
    for iy, yy in enumerate((y0, y1)):
        for ix, xx in enumerate((x0, x1)):
            out += img[np.ix_(yy, xx)] * (np.outer(wy[iy], wx[ix]))[..., None]
    return out


def resize_latent(z: np.ndarray, side: int) -> np.ndarray:
    """Bilinear-resize a (4, L, L) latent to (4, side, side)."""
    if z.shape[1] == side and z.shape[2] == side:
        return z.copy()
    chans = [bilinear_resize(z[c], side, side) for c in range(z.shape[0])]
    return np.stack(chans)


def resize_mask(mask: np.ndarray, side: int) -> np.ndarray:
    """Resize a binary (L, L) mask to (side, side); output stays binary."""
    if mask.shape == (side, side):
        return mask.astype(np.float64)
    soft = bilinear_resize(mask.astype(np.float64), side, side)
    return (soft > 0.5).astype(np.float64)


class StubLatentCodec:
    """Deterministic pooling codec; no external models involved.

    ``encode`` accepts an optional explicit foreground mask.  Without one the
    mask is derived as "not pure white", matching the convention that empty
    background renders white.
    """

    name = "stub"

    def encode(self, rgb: np.ndarray, latent_side: int,
               mask: np.ndarray | None = None) -> np.ndarray:
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got {rgb.shape}")
        h, w = rgb.shape[:2]
        if h != w:
            raise ValueError("stub codec expects square images")
        if mask is None:
            mask = (rgb < 1.0 - 1e-9).any(axis=2)
        factor = h // latent_side
        if factor * latent_side != h:
            raise ValueError(f"image side {h} not divisible by latent side {latent_side}")
        pooled_rgb = block_average(rgb.astype(np.float64), factor)
        pooled_mask = block_average(mask.astype(np.float64), factor)
        z = np.empty((4, latent_side, latent_side))
        z[:3] = np.moveaxis(2.0 * pooled_rgb - 1.0, 2, 0)
        z[3] = 2.0 * pooled_mask - 1.0
        return z

    def decode(self, z: np.ndarray) -> np.ndarray:
        if z.ndim != 3 or z.shape[0] != 4:
            raise ValueError(f"expected (4, L, L) latent, got {z.shape}")
        rgb_small = np.moveaxis((z[:3] + 1.0) / 2.0, 0, 2)
        up = np.repeat(np.repeat(rgb_small, LATENT_DOWNSCALE, axis=0),
                       LATENT_DOWNSCALE, axis=1)
        return np.clip(up, 0.0, 1.0)
