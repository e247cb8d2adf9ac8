"""The diffusion-shaped builtin model: a variance schedule, server-side
noising, a harmonizing denoiser whose noise-prediction error drives the
inpainting residual, and a procedural text-to-image generator.

Residual semantics: the client sends a clean latent; the server draws the
noise from the request seed, forms the noised latent at the requested
timestep, runs the denoiser, and returns (predicted - injected) noise.  For
the builtin model the denoiser's correction pulls the regenerate region of
the latent toward a locally smoothed version of itself, scaled by the noise
level — so residual magnitude grows with the timestep and vanishes as the
timestep approaches zero on already-smooth latents.
"""

from __future__ import annotations

import hashlib

import numpy as np

NOISE_STEPS = 1000
BETA_START = 1e-4
BETA_END = 2e-2

_ALPHA_BAR = np.cumprod(1.0 - np.linspace(BETA_START, BETA_END, NOISE_STEPS))


def signal_retention(tau: float) -> float:
    """Cumulative signal-retention factor at fractional timestep tau.

    tau in (0, 1) maps linearly onto the discrete schedule; the returned
    value is the product of per-step retention factors up to that index,
    monotone decreasing from ~1 toward ~0.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    index = int(round(tau * (NOISE_STEPS - 1)))
    return float(_ALPHA_BAR[index])


def box_blur(arr: np.ndarray) -> np.ndarray:
    """3x3 mean filter over the trailing two axes with edge clamping."""
    pad = [(0, 0)] * (arr.ndim - 2) + [(1, 1), (1, 1)]
    padded = np.pad(arr, pad, mode="edge")
    h, w = arr.shape[-2:]
    acc = np.zeros_like(arr)
    for i in range(3):
        for j in range(3):
            acc += padded[..., i:i + h, j:j + w]
    return acc / 9.0


def _prompt_rng(prompt: str, seed: int) -> np.random.Generator:
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    words = np.frombuffer(digest[:16], dtype="<u4")
    return np.random.default_rng([int(seed) & 0xFFFFFFFF,
                                  *(int(w) for w in words)])


class HarmonizingDiffusionModel:
    """Procedural stand-in for a pretrained inpainting diffusion model.

    No weights are loaded; both capabilities are deterministic functions of
    their request parameters, which is exactly what the protocol promises.
    """

    name = "builtin-harmonizer"

    def load(self, cache_dir=None):
        return self

    def residual(self, latent: np.ndarray, mask: np.ndarray, prompt: str,
                 tau: float, seed: int, guidance_scale=None) -> np.ndarray:
        """(predicted - injected) noise on the masked region.

        ``guidance_scale`` is accepted for protocol compatibility; the
        builtin correction has no conditioning branch to rescale.
        """
        retention = signal_retention(tau)
        rng = np.random.default_rng(int(seed) & 0xFFFFFFFF)
        noise = rng.standard_normal(latent.shape)
        noised = np.sqrt(retention) * latent + np.sqrt(1.0 - retention) * noise
        # invert the forward process assuming zero predicted noise, clamp to
        # the plausible latent range so late timesteps stay bounded
        estimate = np.clip(noised / np.sqrt(retention), -3.0, 3.0)
        correction = (estimate - box_blur(estimate)) * mask
        return np.sqrt(1.0 - retention) * correction

    def generate(self, prompt: str, seed: int, size: int = 512) -> np.ndarray:
        """Deterministic figure on a white background, (size, size, 3) in
        [0, 1]; layout and palette derive from the prompt digest and seed."""
        rng = _prompt_rng(prompt, seed)
        img = np.ones((size, size, 3))
        span = np.linspace(-1.0, 1.0, size)
        xx, yy = np.meshgrid(span, span)
        for _ in range(int(2 + rng.integers(3))):
            cx, cy = rng.uniform(-0.3, 0.3, size=2)
            radius = rng.uniform(0.18, 0.42)
            exponent = rng.uniform(1.6, 3.0)
            color = rng.uniform(0.05, 0.85, size=3)
            dist = ((np.abs(xx - cx) / radius) ** exponent
                    + (np.abs(yy - cy) / radius) ** exponent)
            inside = dist < 1.0
            shade = 0.55 + 0.45 * np.sqrt(np.clip(1.0 - dist, 0.0, 1.0))
            img[inside] = color[None, :] * shade[inside, None]
        return img
