"""Training orchestration: per-iteration pose sampling, loss assembly,
refinement-phase patch masking and resolution growth, and optimizer steps.

Each iteration renders the field from a sampled pose and assembles three
gradient sources on the composited latent image:

* an injected guidance residual (weighted by ``guidance_weight``) — for
  anchored poses the residual is evaluated at the pre-rendered anchor latent
  with the inverse-foreground inpainting mask, for all other poses at the
  live render with a full-frame mask;
* a scaffold-consistency L1 pulling anchored renders toward their
  pre-rendered latent, foreground weighted by a constant and background by
  an exponentially decaying factor (dropped entirely in the refinement
  phase);
* an opacity-entropy penalty pushing per-ray opacity toward 0 or 1.

The final refinement fraction of training also scatters random regenerate
patches over anchored masks and grows the rendered resolution linearly to
double the base side.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dataclass_field, asdict
from pathlib import Path

import numpy as np

from .codec import WHITE_BACKGROUND_LATENT, StubLatentCodec
from .geometry import (CameraIntrinsics, RgbdImage, ScaffoldMesh,
                       build_scaffold, default_intrinsics, save_mesh_ply)
from .guidance import GuidanceError, compose_prompt, direction_bucket
from .latentfield import (LatentField, backprop, composite_background,
                          generate_rays, render, save_field)
from .prerender import (CameraPose, ViewBank, build_view_bank, find_closest,
                        save_view_bank)
from .viewsampler import AngleSchedule, in_anchor_box, sample_angles


class PipelineError(RuntimeError):
    """A pipeline stage failed; carries the stage tag for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[stage:{stage}] {message}")
        self.stage = stage


@dataclass
class TrainConfig:
    prompt: str = ""
    total_iters: int = 5000
    refine_fraction: float = 0.1
    guidance_weight: float = 1.0
    entropy_weight: float = 5e-5
    anchor_weight_fg: float = 2.0
    bg_decay_scale: float = 8.0
    bg_decay_unit: int = 100       # iterations per unit of decay time
    entropy_clip: float = 1e-5
    n_patches: int = 256
    patch_side: int = 16
    schedule: AngleSchedule = None
    anchor_bounds: tuple = (60.0, 120.0, -30.0, 30.0)
    n_anchor_views: int = 64
    grid_resolution: int = 64
    field_bbox_side: float = 1.2
    density_init: float = -3.0
    base_latent_side: int = 64
    max_latent_side: int = 128
    image_side: int = 512
    samples_per_ray: int = 64
    camera_radius: float = 3.0
    near_plane: float = None
    far_plane: float = None
    tau_range: tuple = (0.02, 0.98)
    learning_rate: float = 1e-2
    momentum: float = 0.0
    second_moment_decay: float = 0.99
    optimizer_eps: float = 1e-8
    seed: int = 0
    orbit_frames: int = 120
    scaffold_grid_depth: int = 7
    outlier_k: int = 5
    outlier_std_ratio: float = 1.0
    normal_k: int = 16
    trim_quantile: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.refine_fraction < 1.0:
            raise ValueError("refine_fraction must lie in (0, 1)")
        if min(self.guidance_weight, self.entropy_weight,
               self.anchor_weight_fg) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 < self.entropy_clip < 0.5:
            raise ValueError("entropy_clip must lie in (0, 0.5)")
        if self.schedule is None:
            self.schedule = AngleSchedule(t_total=self.total_iters)
        if self.near_plane is None:
            self.near_plane = self.camera_radius - 1.5
        if self.far_plane is None:
            self.far_plane = self.camera_radius + 1.5
        if self.near_plane <= 0:
            raise ValueError("near plane must be positive")


@dataclass
class LossBreakdown:
    guidance_grad_norm: float  # magnitude of the injected residual gradient
    anchor_loss: float         # scaffold-consistency L1 (0 off-anchor)
    entropy_loss: float        # raw opacity entropy
    scalar_total: float        # anchor_loss + entropy_weight * entropy_loss
    anchored: bool

    def __post_init__(self):
        if not self.anchored and self.anchor_loss != 0.0:
            raise ValueError("anchor loss must be zero off the anchor box")


def refine_start(cfg: TrainConfig) -> int:
    return int(round(cfg.total_iters * (1.0 - cfg.refine_fraction)))


def background_weight(t: float, cfg: TrainConfig) -> float:
    """Exponentially decaying weight on unobserved (background) latents."""
    return float(np.exp(-(t / cfg.bg_decay_unit) / cfg.bg_decay_scale))


def scaffold_consistency_loss(z_render: np.ndarray, z_anchor: np.ndarray,
                              fg_mask: np.ndarray, t: float,
                              cfg: TrainConfig):
    """Mask-weighted L1 between rendered and pre-rendered latents.

    Foreground elements weigh ``anchor_weight_fg``; background weight decays
    exponentially with iteration.  Returns (loss, gradient w.r.t. z_render),
    both averaged over all latent elements.
    """
    if z_render.shape != z_anchor.shape:
        raise ValueError(f"latent shapes differ: {z_render.shape} "
                         f"vs {z_anchor.shape}")
    if fg_mask.shape != z_render.shape[1:]:
        raise ValueError("mask resolution does not match the latents")
    weight = (cfg.anchor_weight_fg * fg_mask
              + background_weight(t, cfg) * (1.0 - fg_mask))
    diff = z_render - z_anchor
    n = diff.size
    loss = float((weight[None] * np.abs(diff)).sum() / n)
    grad = weight[None] * np.sign(diff) / n
    return loss, grad


def opacity_entropy_loss(alpha: np.ndarray, cfg: TrainConfig):
    """Binary-entropy penalty on per-ray opacity, clipped for stability.

    Returns (loss, gradient w.r.t. alpha); the gradient is zero wherever
    the opacity fell outside the clip range.
    """
    eps = cfg.entropy_clip
    a = np.clip(alpha, eps, 1.0 - eps)
    loss = float(-(a * np.log(a) + (1.0 - a) * np.log1p(-a)).mean())
    inside = (alpha >= eps) & (alpha <= 1.0 - eps)
    grad = np.where(inside, -np.log(a / (1.0 - a)) / alpha.size, 0.0)
    return loss, grad


def add_patches(mask: np.ndarray, n_patches: int, patch_side: int,
                rng) -> np.ndarray:
    """Scatter square regenerate patches over a mask (wrap-around placement).

    Each of the n_patches squares of side patch_side sets its pixels to 1;
    anchor positions are uniform over the full mask and squares wrap
    toroidally, so every pixel has identical coverage probability.
    """
    S = mask.shape[0]
    if patch_side > S:
        raise ValueError("patch side exceeds the mask")
    out = np.asarray(mask, dtype=np.float64).copy()
    if n_patches == 0:
        return out
    pos = rng.integers(0, S, size=(n_patches, 2))
    offs = np.arange(patch_side)
    for r, c in pos:
        out[np.ix_((r + offs) % S, (c + offs) % S)] = 1.0
    return out


def render_size_schedule(i: int, cfg: TrainConfig) -> tuple[int, int]:
    """Rendered image side during refinement: linear growth base -> 2x base.

    Defined from the refinement start onward; the side caps at
    ``max_latent_side`` and never decreases with i.
    """
    start = refine_start(cfg)
    if i < start:
        raise ValueError("resolution schedule starts at the refinement phase")
    rate = (i - start) / (cfg.total_iters - start)
    side = min(int(round(cfg.base_latent_side * (1.0 + rate))),
               cfg.max_latent_side)
    return side, side


class MomentOptimizer:
    """Per-parameter adaptive steps from first/second moment accumulators.

    With momentum 0 (the default) the first moment is just the incoming
    gradient, so steps are scaled only by the running RMS magnitude.
    """

    def __init__(self, lr: float = 1e-2, momentum: float = 0.0,
                 second_decay: float = 0.99, eps: float = 1e-8):
        self.lr = lr
        self.momentum = momentum
        self.second_decay = second_decay
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for name, p in params.items():
            g = grads[name]
            m = self._m.setdefault(name, np.zeros_like(p))
            v = self._v.setdefault(name, np.zeros_like(p))
            m *= self.momentum
            m += (1.0 - self.momentum) * g
            v *= self.second_decay
            v += (1.0 - self.second_decay) * g * g
            m_hat = m / (1.0 - self.momentum ** self.t) if self.momentum else m
            v_hat = v / (1.0 - self.second_decay ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainState:
    cfg: TrainConfig
    field: LatentField
    bank: ViewBank
    guidance: object
    K: CameraIntrinsics
    rng: np.random.Generator
    optimizer: MomentOptimizer
    report: list = dataclass_field(default_factory=list)


def init_state(cfg: TrainConfig, scaffold: ScaffoldMesh, guidance,
               K: CameraIntrinsics = None, codec=None) -> TrainState:
    K = K or default_intrinsics(cfg.image_side)
    codec = codec or StubLatentCodec()
    bank = build_view_bank(
        scaffold, cfg.n_anchor_views, cfg.anchor_bounds, K, codec=codec,
        seed=cfg.seed, radius=cfg.camera_radius, resolution=cfg.image_side,
        latent_sides=(cfg.base_latent_side, cfg.max_latent_side))
    half = cfg.field_bbox_side / 2.0
    fld = LatentField(resolution=cfg.grid_resolution,
                      bbox=np.array([[-half] * 3, [half] * 3]),
                      density_init=cfg.density_init)
    opt = MomentOptimizer(lr=cfg.learning_rate, momentum=cfg.momentum,
                          second_decay=cfg.second_moment_decay,
                          eps=cfg.optimizer_eps)
    return TrainState(cfg=cfg, field=fld, bank=bank, guidance=guidance, K=K,
                      rng=np.random.default_rng(cfg.seed), optimizer=opt)


def _sample_pose(state: TrainState, i: int) -> tuple[float, float]:
    rng = state.rng
    u_theta, u_phi = rng.random(), rng.random()
    sign_theta = 1.0 if rng.random() < 0.5 else -1.0
    sign_phi = 1.0 if rng.random() < 0.5 else -1.0
    return sample_angles(i, state.cfg.schedule, u_theta, u_phi,
                         sign_theta, sign_phi)


def fetch_residual(state: TrainState, i: int, z_at: np.ndarray,
                   inpaint_mask: np.ndarray, prompt: str,
                   theta: float, phi: float) -> np.ndarray:
    """Guidance residual at z_at with a fresh diffusion timestep and seed.

    One retry on guidance failure, then the iteration aborts.  The returned
    residual is unscaled; gradient assembly applies the guidance weight.
    """
    cfg = state.cfg
    tau = state.rng.uniform(*cfg.tau_range)
    seed = int(state.rng.integers(2 ** 31))
    last = None
    for _ in range(2):
        try:
            return state.guidance.residual(z_at, inpaint_mask, prompt,
                                           tau, seed, theta=theta, phi=phi)
        except GuidanceError as exc:
            last = exc
    raise PipelineError(
        "train", f"guidance residual failed twice at iteration {i}: {last}")


def assemble_gradients(z_render: np.ndarray, alpha: np.ndarray,
                       residual: np.ndarray, z_anchor, fg_mask,
                       i: int, cfg: TrainConfig, anchored: bool,
                       refining: bool):
    """Compose the per-iteration gradients on the composited latent and on
    opacity from the three loss sources.

    The total is linear in each weight: the injected guidance residual
    scales with ``guidance_weight``, the scaffold-consistency term appears
    only for anchored non-refinement iterations, and the entropy term scales
    with ``entropy_weight``.  Because the composited latent includes the
    ``(1-alpha) * background`` term, every latent gradient chains into an
    opacity gradient as well.

    Returns (dL_dz, dL_dalpha, anchor_loss, entropy_loss).
    """
    dL_dz = cfg.guidance_weight * residual
    anchor_loss = 0.0
    if anchored and not refining:
        anchor_loss, anchor_grad = scaffold_consistency_loss(
            z_render, z_anchor, fg_mask, i, cfg)
        dL_dz = dL_dz + anchor_grad
    entropy_loss, entropy_grad = opacity_entropy_loss(alpha, cfg)
    dL_dalpha = (cfg.entropy_weight * entropy_grad
                 - np.einsum("chw,c->hw", dL_dz, WHITE_BACKGROUND_LATENT))
    return dL_dz, dL_dalpha, anchor_loss, entropy_loss


def _iteration(state: TrainState, i: int, refining: bool) -> LossBreakdown:
    cfg = state.cfg
    theta, phi = _sample_pose(state, i)
    anchored = in_anchor_box(theta, phi, cfg.anchor_bounds)
    side = (render_size_schedule(i, cfg)[0] if refining
            else cfg.base_latent_side)

    pose = CameraPose(theta=theta, phi=phi, radius=cfg.camera_radius)
    rays = generate_rays(pose, state.K, cfg.image_side, side,
                         cfg.near_plane, cfg.far_plane, cfg.samples_per_ray)
    out, cache = render(state.field, rays, rng=state.rng, with_cache=True)
    z_render = composite_background(out, WHITE_BACKGROUND_LATENT)

    prompt = (compose_prompt(cfg.prompt,
                             direction_bucket(theta, phi,
                                              cfg.schedule.anchor_center))
              if cfg.prompt else "")

    z_anchor = fg_mask = None
    if anchored:
        view = find_closest(state.bank, theta, phi)
        fg_mask = view.mask_at(side)
        inpaint_mask = 1.0 - fg_mask
        if refining:
            inpaint_mask = add_patches(inpaint_mask, cfg.n_patches,
                                       cfg.patch_side, state.rng)
        z_anchor = view.latent_at(side)
        residual = fetch_residual(state, i, z_anchor, inpaint_mask,
                                  prompt, theta, phi)
    else:
        inpaint_mask = np.ones((side, side))
        residual = fetch_residual(state, i, z_render, inpaint_mask,
                                  prompt, theta, phi)

    dL_dz, dL_dalpha, anchor_loss, entropy_loss = assemble_gradients(
        z_render, out.alpha, residual, z_anchor, fg_mask, i, cfg,
        anchored, refining)
    g_norm = float(np.linalg.norm(cfg.guidance_weight * residual))

    d_raw, d_feat = backprop(state.field, cache, dL_dz, dL_dalpha)
    state.optimizer.step(
        {"density": state.field.density_raw, "features": state.field.features},
        {"density": d_raw, "features": d_feat})

    breakdown = LossBreakdown(
        guidance_grad_norm=g_norm,
        anchor_loss=anchor_loss,
        entropy_loss=entropy_loss,
        scalar_total=anchor_loss + cfg.entropy_weight * entropy_loss,
        anchored=bool(anchored))
    state.report.append({
        "iteration": i, "theta": float(theta), "phi": float(phi),
        "render_side": side, "anchored": bool(anchored),
        "guidance_grad_norm": breakdown.guidance_grad_norm,
        "anchor_loss": breakdown.anchor_loss,
        "entropy_loss": breakdown.entropy_loss,
        "scalar_total": breakdown.scalar_total,
    })
    return breakdown


def train_step(state: TrainState, i: int) -> LossBreakdown:
    """One main-phase iteration (anchor consistency active, base side)."""
    return _iteration(state, i, refining=False)


def refine_step(state: TrainState, i: int) -> LossBreakdown:
    """One refinement iteration: patched masks, growing resolution, no
    anchor-consistency term."""
    return _iteration(state, i, refining=True)


def train_from_scaffold(cfg: TrainConfig, scaffold: ScaffoldMesh, guidance,
                        K: CameraIntrinsics = None, codec=None,
                        callback=None) -> TrainState:
    """The full training loop over an already-built scaffold."""
    state = init_state(cfg, scaffold, guidance, K=K, codec=codec)
    start = refine_start(cfg)
    for i in range(cfg.total_iters):
        step = train_step if i < start else refine_step
        breakdown = step(state, i)
        if callback is not None:
            callback(state, i, breakdown)
    return state


def render_orbit(state: TrainState, n_frames: int, side: int = None,
                 elevation: float = None, decode=None) -> list[np.ndarray]:
    """Decode an evenly spaced azimuth orbit of the trained field."""
    cfg = state.cfg
    side = side or cfg.max_latent_side
    elevation = (cfg.schedule.anchor_center[1]
                 if elevation is None else elevation)
    decode = decode or StubLatentCodec().decode
    frames = []
    for k in range(n_frames):
        theta = 360.0 * k / n_frames
        pose = CameraPose(theta=theta, phi=elevation,
                          radius=cfg.camera_radius)
        rays = generate_rays(pose, state.K, cfg.image_side, side,
                             cfg.near_plane, cfg.far_plane,
                             cfg.samples_per_ray)
        out = render(state.field, rays)
        z = composite_background(out, WHITE_BACKGROUND_LATENT)
        frames.append(decode(z))
    return frames


def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["schedule"] = asdict(cfg.schedule)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    sched = d.pop("schedule", None)
    if sched is not None:
        for key in ("anchor_center", "theta_range", "phi_range"):
            if key in sched and sched[key] is not None:
                sched[key] = tuple(sched[key])
        d["schedule"] = AngleSchedule(**sched)
    for key in ("anchor_bounds", "tau_range"):
        if key in d and d[key] is not None:
            d[key] = tuple(d[key])
    return TrainConfig(**d)


def run_pipeline(cfg: TrainConfig, guidance, out_dir,
                 image: RgbdImage = None, codec=None) -> TrainState:
    """End-to-end run: inputs -> scaffold -> training -> orbit export.

    Without an input image, a reference image and its depth come from the
    guidance service; with one, generation is skipped.  Writes the scaffold
    mesh, view bank, checkpoint, orbit frames, and a JSON run report.
    """
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timing = {}
    K = default_intrinsics(cfg.image_side)

    if image is None:
        if not cfg.prompt:
            raise PipelineError("reference",
                                "text prompt required to generate a reference")
        t0 = time.perf_counter()
        try:
            ref_prompt = compose_prompt(cfg.prompt, reference=True)
            rgb = guidance.generate(ref_prompt, seed=cfg.seed,
                                    size=cfg.image_side)
            depth = guidance.depth(rgb)
        except GuidanceError as exc:
            raise PipelineError("reference", str(exc)) from exc
        image = RgbdImage(rgb=rgb, depth=depth)
        timing["reference_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        scaffold, transform = build_scaffold(
            image, K, grid_depth=cfg.scaffold_grid_depth,
            outlier_k=cfg.outlier_k, outlier_std_ratio=cfg.outlier_std_ratio,
            normal_k=cfg.normal_k, trim_quantile=cfg.trim_quantile)
    except Exception as exc:
        raise PipelineError("scaffold", str(exc)) from exc
    timing["scaffold_s"] = time.perf_counter() - t0
    save_mesh_ply(scaffold, out / "scaffold.ply")

    t0 = time.perf_counter()
    try:
        state = train_from_scaffold(cfg, scaffold, guidance, K=K, codec=codec)
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError("train", str(exc)) from exc
    timing["train_s"] = time.perf_counter() - t0
    save_view_bank(state.bank, out / "view_bank")
    save_field(state.field, out / "field.ckpt", iteration=cfg.total_iters)

    t0 = time.perf_counter()
    try:
        decode = guidance.decode if hasattr(guidance, "decode") else None
        frames = render_orbit(state, cfg.orbit_frames, decode=decode)
        frame_dir = out / "orbit"
        frame_dir.mkdir(exist_ok=True)
        for k, frame in enumerate(frames):
            img = Image.fromarray(np.round(frame * 255).astype(np.uint8))
            img.save(frame_dir / f"frame_{k:04d}.png")
    except GuidanceError as exc:
        raise PipelineError("export", str(exc)) from exc
    timing["export_s"] = time.perf_counter() - t0

    with open(out / "report.json", "w") as fh:
        json.dump({"config": config_to_dict(cfg), "timing": timing,
                   "iterations": state.report}, fh, indent=2)
    return state
