"""Acceptance gate: one test per top-level criterion, each ending in a
single printed pass line (visible under ``pytest -rA`` / ``-s``) with the
measured quantities.  Tolerances and runtime budgets are asserted inline."""

import copy
import time
from collections import Counter

import numpy as np
from scipy import stats

from orbitfield.codec import WHITE_BACKGROUND_LATENT
from orbitfield.geometry import PointCloud, poisson_reconstruct, remove_outliers
from orbitfield.guidance import TargetSceneOracle
from orbitfield.latentfield import (
    LatentField,
    backprop,
    composite_background,
    generate_rays,
    render,
)
from orbitfield.prerender import CameraPose
from orbitfield.scenes import make_two_tone_sphere
from orbitfield.trainer import (
    TrainConfig,
    add_patches,
    assemble_gradients,
    background_weight,
    opacity_entropy_loss,
    render_size_schedule,
    scaffold_consistency_loss,
    train_from_scaffold,
)
from orbitfield.viewsampler import AngleSchedule, sample_offset, shape_params

LN2 = 0.6931471805599453
PATCH_COVERAGE = 0.9822537203789488

# Beta shape parameters of the offset distribution at the probed iterations
# (t_total = 5000, uniform from iteration 1500 on).
SHAPE_PINS = [(0, (3.0, 9.0)), (750, (2.0, 5.0)),
              (1500, (1.0, 1.0)), (3000, (1.0, 1.0))]


def announce(name, detail):
    print(f"[PASS] {name}: {detail}")


# ---------------------------------------------------------------------------
# 1. progressive view sampling distribution


def test_primary_view_sampling_distribution():
    t0 = time.perf_counter()
    sched = AngleSchedule(t_total=5000)
    assert shape_params(0, sched) == (3.0, 9.0)        # exact start
    assert shape_params(1500, sched) == (1.0, 1.0)     # exact uniform point
    assert shape_params(5000, sched) == (1.0, 1.0)     # exact end
    rng = np.random.default_rng(0)
    pvals = []
    for t, (a, b) in SHAPE_PINS:
        u = rng.random(100_000)
        x = sample_offset(t, sched, u)
        p = stats.kstest(x, lambda q: stats.beta.cdf(q, a, b)).pvalue
        assert p > 0.01, f"KS p={p:.4g} at t={t} against Beta{(a, b)}"
        pvals.append(p)
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0, f"sampling check took {elapsed:.1f}s"
    announce("view-sampling distribution",
             f"KS p-values {['%.3f' % p for p in pvals]} at t=0/750/1500/3000, "
             f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. geometry oracle


def uniform_sphere(n, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v


def undirected_edge_counts(faces):
    counts = Counter()
    for f in faces:
        for e in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            counts[tuple(sorted(e))] += 1
    return counts


def test_primary_geometry_oracle():
    t0 = time.perf_counter()
    pts = uniform_sphere(20_000, seed=11)
    cloud = PointCloud(points=pts, colors=np.full_like(pts, 0.5), normals=pts)

    mesh = poisson_reconstruct(cloud, grid_depth=7)
    radial_err = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 1.0)
    p95 = float(np.percentile(radial_err, 95))
    assert p95 < 0.05, f"p95 radial error {p95:.4f}"
    counts = undirected_edge_counts(mesh.faces)
    assert all(c == 2 for c in counts.values()), "mesh is not watertight"

    planted = uniform_sphere(10, seed=99) * 6.0
    noisy = PointCloud(points=np.vstack([pts, planted]),
                       colors=np.full((20_010, 3), 0.5))
    cleaned = remove_outliers(noisy)
    assert np.linalg.norm(cleaned.points, axis=1).max() < 2.0, \
        "a planted far point survived outlier removal"
    assert len(cleaned.points) <= 20_000

    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0, f"geometry check took {elapsed:.1f}s"
    announce("geometry oracle",
             f"p95 radial {p95:.4f}, watertight ({len(counts)} edges), "
             f"10/10 planted outliers removed, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. renderer gradients


def _random_field(rng, resolution=6, raw_scale=1.0):
    field = LatentField(resolution=resolution,
                        bbox=np.array([[-0.6] * 3, [0.6] * 3]))
    field.density_raw[:] = rng.normal(scale=raw_scale,
                                      size=field.density_raw.shape)
    field.features[:] = rng.normal(size=field.features.shape)
    return field


def _worst_directional_error(field, rays, rng, n_dirs, step=1e-4):
    out, cache = render(field, rays, with_cache=True)
    dz_up = rng.normal(size=out.latent.shape)
    da_up = rng.normal(size=out.alpha.shape)
    d_raw, d_feat = backprop(field, cache, dz_up, da_up)

    def objective(probe):
        o = render(probe, rays)
        return float((dz_up * o.latent).sum() + (da_up * o.alpha).sum())

    worst = 0.0
    for _ in range(n_dirs):
        v_raw = rng.normal(size=field.density_raw.shape)
        v_feat = rng.normal(size=field.features.shape)
        analytic = float((d_raw * v_raw).sum() + (d_feat * v_feat).sum())
        plus = copy.deepcopy(field)
        plus.density_raw += step * v_raw
        plus.features += step * v_feat
        minus = copy.deepcopy(field)
        minus.density_raw -= step * v_raw
        minus.features -= step * v_feat
        fd = (objective(plus) - objective(minus)) / (2.0 * step)
        worst = max(worst, abs(analytic - fd) / max(abs(fd), 1e-12))
    return worst


def test_primary_renderer_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    from orbitfield.geometry import default_intrinsics

    K = default_intrinsics(64)
    worst = 0.0
    for state in range(10):
        field = _random_field(rng, raw_scale=0.5 + 0.3 * state)
        pose = CameraPose(theta=36.0 * state, phi=-20.0 + 5.0 * state,
                          radius=3.0)
        rays = generate_rays(pose, K, 64, 4, 1.5, 4.5, 16)
        worst = max(worst, _worst_directional_error(field, rays, rng,
                                                    n_dirs=32))
    assert worst < 1e-3, f"worst relative gradient error {worst:.2e}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"
    announce("renderer gradients",
             f"worst relative error {worst:.2e} over 32 directions x 10 "
             f"states, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. loss unit values


def test_primary_loss_unit_values():
    cfg = TrainConfig()
    entropy_half, _ = opacity_entropy_loss(np.full((8, 8), 0.5), cfg)
    assert abs(entropy_half - LN2) < 1e-9

    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 8, 8))
    zero_loss, zero_grad = scaffold_consistency_loss(z, z.copy(),
                                                     np.ones((8, 8)), 0, cfg)
    assert zero_loss == 0.0
    np.testing.assert_array_equal(zero_grad, 0.0)

    zp = rng.normal(size=(4, 8, 8))
    scaled, _ = scaffold_consistency_loss(z, zp, np.ones((8, 8)), 0, cfg)
    assert abs(scaled - cfg.anchor_weight_fg * np.abs(z - zp).mean()) < 1e-12

    ws = [background_weight(t, cfg) for t in np.linspace(0, 5000, 26)]
    assert ws[0] == 1.0
    assert all(b < a for a, b in zip(ws, ws[1:]))

    announce("loss unit values",
             f"entropy(0.5)={entropy_half:.12f} (=ln 2), consistency "
             f"zero/scaling exact, background weight monotone "
             f"{ws[0]:.3f}->{ws[-1]:.3g}")


# ---------------------------------------------------------------------------
# 5. refinement schedules


def test_primary_refinement_schedules():
    cfg = TrainConfig()  # 5000 iterations, final 10% refines
    pins = {4500: (64, 64), 4750: (96, 96), 5000: (128, 128)}
    for t, expected in pins.items():
        got = render_size_schedule(t, cfg)
        assert got == expected, f"schedule at {t}: {got} != {expected}"

    coverages = []
    for seed in range(3):
        out = add_patches(np.zeros((128, 128)), 256, 16,
                          np.random.default_rng(seed))
        coverages.append(out.mean())
        assert abs(coverages[-1] - PATCH_COVERAGE) <= 0.02
    announce("refinement schedules",
             f"render sides {pins}, patch coverage "
             f"{['%.3f' % c for c in coverages]} vs {PATCH_COVERAGE:.3f}")


# ---------------------------------------------------------------------------
# 6. end-to-end synthetic run


E2E_CONFIG = dict(total_iters=600, grid_resolution=32, base_latent_side=32,
                  max_latent_side=64, n_anchor_views=16, image_side=256,
                  n_patches=8, patch_side=2, learning_rate=2e-2,
                  guidance_weight=1e-3, entropy_weight=2.0,
                  density_init=-1.0, seed=0)
IB_EVAL_VIEWS = [(90.0, 0.0), (75.0, 10.0), (105.0, -10.0)]
OB_EVAL_VIEWS = [(270.0, 0.0), (0.0, 0.0), (180.0, 0.0)]


def latent_l1_error(field, oracle, cfg, K, views):
    errs = []
    for theta, phi in views:
        pose = CameraPose(theta=theta, phi=phi, radius=cfg.camera_radius)
        rays = generate_rays(pose, K, cfg.image_side, cfg.base_latent_side,
                             cfg.near_plane, cfg.far_plane,
                             cfg.samples_per_ray)
        z = composite_background(render(field, rays), WHITE_BACKGROUND_LATENT)
        target = oracle.target_latent(theta, phi, cfg.base_latent_side)
        errs.append(float(np.abs(z - target).mean()))
    return float(np.mean(errs))


def test_primary_end_to_end_synthetic():
    t0 = time.perf_counter()
    cfg = TrainConfig(**E2E_CONFIG)
    oracle = TargetSceneOracle(make_two_tone_sphere(),
                               resolution=cfg.image_side,
                               radius=cfg.camera_radius)
    snapshots = {}

    def keep_snapshot(state, i, breakdown):
        if i == 49:
            snapshots["at50"] = (state.field.density_raw.copy(),
                                 state.field.features.copy())

    state = train_from_scaffold(cfg, make_two_tone_sphere(), oracle,
                                callback=keep_snapshot)

    early_field = copy.deepcopy(state.field)
    early_field.density_raw[:] = snapshots["at50"][0]
    early_field.features[:] = snapshots["at50"][1]

    ib_early = latent_l1_error(early_field, oracle, cfg, state.K,
                               IB_EVAL_VIEWS)
    ib_final = latent_l1_error(state.field, oracle, cfg, state.K,
                               IB_EVAL_VIEWS)
    ob_final = latent_l1_error(state.field, oracle, cfg, state.K,
                               OB_EVAL_VIEWS)

    ratio = ib_early / ib_final
    assert ratio >= 5.0, (
        f"frontal latent error only improved {ratio:.2f}x "
        f"({ib_early:.4f} -> {ib_final:.4f})")
    assert ob_final < 2.0 * ib_final, (
        f"rear-view error {ob_final:.4f} vs frontal {ib_final:.4f}")

    again = train_from_scaffold(cfg, make_two_tone_sphere(), oracle)
    np.testing.assert_array_equal(state.field.density_raw,
                                  again.field.density_raw)
    np.testing.assert_array_equal(state.field.features, again.field.features)

    elapsed = time.perf_counter() - t0
    assert elapsed < 600.0, f"end-to-end check took {elapsed:.1f}s"
    announce("end-to-end synthetic run",
             f"frontal L1 {ib_early:.4f}->{ib_final:.4f} ({ratio:.1f}x), "
             f"rear/frontal {ob_final / ib_final:.2f}, two same-seed runs "
             f"bit-identical, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 7. gradient gating and composition


def test_primary_gradient_gate_and_composition():
    rng = np.random.default_rng(13)
    z_render = rng.normal(size=(4, 8, 8))
    alpha = rng.random((8, 8))
    residual = rng.normal(size=(4, 8, 8))
    z_anchor = rng.normal(size=(4, 8, 8))
    fg_mask = (rng.random((8, 8)) > 0.5).astype(np.float64)
    i = 200

    def expected_da(cfg, dz, entropy_grad):
        return (cfg.entropy_weight * entropy_grad
                - np.einsum("chw,c->hw", dz, WHITE_BACKGROUND_LATENT))

    # full composition: every term present, exactly as summed internally
    cfg = TrainConfig(guidance_weight=0.7, entropy_weight=0.3)
    dz, da, _, _ = assemble_gradients(z_render, alpha, residual, z_anchor,
                                      fg_mask, i, cfg, anchored=True,
                                      refining=False)
    _, anchor_grad = scaffold_consistency_loss(z_render, z_anchor, fg_mask,
                                               i, cfg)
    _, entropy_grad = opacity_entropy_loss(alpha, cfg)
    np.testing.assert_array_equal(dz, cfg.guidance_weight * residual
                                  + anchor_grad)
    np.testing.assert_array_equal(da, expected_da(cfg, dz, entropy_grad))

    # consistency term gated off outside the anchor box: remaining sum exact
    dz_off, da_off, a_loss, _ = assemble_gradients(
        z_render, alpha, residual, z_anchor, fg_mask, i, cfg,
        anchored=False, refining=False)
    assert a_loss == 0.0
    np.testing.assert_array_equal(dz_off, cfg.guidance_weight * residual)
    np.testing.assert_array_equal(da_off, expected_da(cfg, dz_off,
                                                      entropy_grad))

    # guidance weight ablated: only the consistency term remains in dz
    cfg_g0 = TrainConfig(guidance_weight=0.0, entropy_weight=0.3)
    dz_g0, da_g0, _, _ = assemble_gradients(
        z_render, alpha, residual, z_anchor, fg_mask, i, cfg_g0,
        anchored=True, refining=False)
    _, anchor_grad_g0 = scaffold_consistency_loss(z_render, z_anchor,
                                                  fg_mask, i, cfg_g0)
    np.testing.assert_array_equal(dz_g0, 0.0 * residual + anchor_grad_g0)
    np.testing.assert_array_equal(da_g0, expected_da(cfg_g0, dz_g0,
                                                     entropy_grad))

    # entropy weight ablated: dz untouched, opacity gradient reduces to the
    # background-compositing chain term
    cfg_e0 = TrainConfig(guidance_weight=0.7, entropy_weight=0.0)
    dz_e0, da_e0, _, _ = assemble_gradients(
        z_render, alpha, residual, z_anchor, fg_mask, i, cfg_e0,
        anchored=True, refining=False)
    np.testing.assert_array_equal(dz_e0, dz)
    np.testing.assert_array_equal(da_e0, expected_da(cfg_e0, dz_e0,
                                                     entropy_grad))

    announce("gradient gate and composition",
             "each weight ablation changes exactly its own term; all "
             "remaining sums bit-equal")
