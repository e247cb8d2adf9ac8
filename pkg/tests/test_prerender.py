"""Tests for anchor-view prerendering: pose sampling, the software
rasterizer, nearest-view lookup, and view-bank persistence."""

import numpy as np
import pytest
from scipy import stats

from orbitfield.geometry import CameraIntrinsics, ScaffoldMesh, default_intrinsics
from orbitfield.prerender import (
    CameraPose,
    PrerenderedView,
    ViewBank,
    build_view_bank,
    find_closest,
    latent_mask,
    load_view_bank,
    rasterize,
    read_tensor,
    sample_anchor_poses,
    save_view_bank,
    write_tensor,
)

ANCHOR_BOUNDS = (60.0, 120.0, -30.0, 30.0)


def uv_sphere_mesh(n_theta=96, n_phi=48, radius=1.0, color=0.5):
    """Analytic lat-long sphere triangulation (poles + interior rings)."""
    phis = np.linspace(-np.pi / 2, np.pi / 2, n_phi + 1)[1:-1]
    thetas = np.linspace(0.0, 2 * np.pi, n_theta, endpoint=False)
    verts = [np.array([0.0, 0.0, -radius])]
    for ph in phis:
        for th in thetas:
            verts.append(radius * np.array([np.cos(ph) * np.cos(th),
                                            np.cos(ph) * np.sin(th),
                                            np.sin(ph)]))
    verts.append(np.array([0.0, 0.0, radius]))
    verts = np.array(verts)

    def ring(i, j):  # vertex index of ring i (0-based), column j
        return 1 + i * n_theta + (j % n_theta)

    faces = []
    for j in range(n_theta):  # bottom fan
        faces.append([0, ring(0, j + 1), ring(0, j)])
    for i in range(len(phis) - 1):  # quads between rings
        for j in range(n_theta):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append([a, b, d])
            faces.append([a, d, c])
    top = len(verts) - 1
    for j in range(n_theta):  # top fan
        faces.append([top, ring(len(phis) - 1, j), ring(len(phis) - 1, j + 1)])
    faces = np.array(faces, dtype=np.int64)
    return ScaffoldMesh(vertices=verts,
                        vertex_colors=np.full_like(verts, color),
                        faces=faces,
                        vertex_density=np.ones(len(verts)))


def dummy_view(theta, phi, side=8):
    """Minimal valid PrerenderedView for lookup tests."""
    depth = np.full((side, side), np.inf)
    depth[0, 0] = 1.0
    mask = np.isfinite(depth)
    return PrerenderedView(
        pose=CameraPose(theta=theta, phi=phi),
        rgb=np.ones((side, side, 3)),
        depth=depth,
        mask=mask,
        latents={side // 2: np.zeros((4, side // 2, side // 2))},
        masks={side // 2: np.zeros((side // 2, side // 2))},
    )


# ---------------------------------------------------------------------------
# camera poses


def test_pose_normalizes_azimuth_and_validates():
    assert CameraPose(theta=370.0, phi=0.0).theta == 10.0
    assert CameraPose(theta=-30.0, phi=0.0).theta == 330.0
    with pytest.raises(ValueError):
        CameraPose(theta=0.0, phi=91.0)
    with pytest.raises(ValueError):
        CameraPose(theta=0.0, phi=0.0, radius=0.0)


def test_pose_position_on_orbit():
    np.testing.assert_allclose(CameraPose(theta=90.0, phi=0.0, radius=3.0).position(),
                               [0.0, 3.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(CameraPose(theta=0.0, phi=90.0, radius=2.0).position(),
                               [0.0, 0.0, 2.0], atol=1e-12)


def test_world_to_camera_looks_at_target():
    pose = CameraPose(theta=37.0, phi=12.0, radius=3.0)
    R, C = pose.world_to_camera()
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    # the look-at point projects onto the +z (forward) axis
    cam = R @ (pose.look_at - C)
    np.testing.assert_allclose(cam[:2], 0.0, atol=1e-12)
    assert cam[2] > 0


# ---------------------------------------------------------------------------
# sample_anchor_poses


def test_sampled_poses_stay_inside_bounds():
    poses = sample_anchor_poses(64, ANCHOR_BOUNDS, seed=0)
    assert len(poses) == 64
    for p in poses:
        assert 60.0 <= p.theta <= 120.0
        assert -30.0 <= p.phi <= 30.0


def test_degenerate_bounds_give_exact_pose():
    poses = sample_anchor_poses(1, (90.0, 90.0, 0.0, 0.0), seed=3)
    assert len(poses) == 1
    assert poses[0].theta == 90.0
    assert poses[0].phi == 0.0


def test_pose_sampling_is_uniform_chi_squared():
    poses = sample_anchor_poses(10000, ANCHOR_BOUNDS, seed=1)
    thetas = np.array([p.theta for p in poses])
    phis = np.array([p.phi for p in poses])
    t_bin = np.minimum(((thetas - 60.0) / 10.0).astype(int), 5)
    p_bin = np.minimum(((phis + 30.0) / 10.0).astype(int), 5)
    counts = np.bincount(t_bin * 6 + p_bin, minlength=36)
    _, p_value = stats.chisquare(counts)
    assert p_value > 0.01


def test_pose_sampling_is_deterministic():
    a = sample_anchor_poses(16, ANCHOR_BOUNDS, seed=42)
    b = sample_anchor_poses(16, ANCHOR_BOUNDS, seed=42)
    assert [(p.theta, p.phi) for p in a] == [(p.theta, p.phi) for p in b]


def test_pose_sampling_validation():
    with pytest.raises(ValueError):
        sample_anchor_poses(0, ANCHOR_BOUNDS, seed=0)
    with pytest.raises(ValueError):
        sample_anchor_poses(4, (120.0, 60.0, -30.0, 30.0), seed=0)


# ---------------------------------------------------------------------------
# rasterize


@pytest.fixture(scope="module")
def sphere_raster():
    mesh = uv_sphere_mesh()
    pose = CameraPose(theta=90.0, phi=0.0, radius=3.0)
    K = default_intrinsics(512)
    return rasterize(mesh, pose, K, resolution=512)


def test_silhouette_area_matches_analytic_disc(sphere_raster):
    _, _, mask = sphere_raster
    # a unit sphere seen from distance 3 subtends a disc of pixel radius
    # fx / sqrt(3^2 - 1^2); compare covered area against the analytic disc
    expected_area = np.pi * (640.0 / np.sqrt(8.0)) ** 2
    assert abs(mask.sum() - expected_area) <= 0.03 * expected_area


def test_center_depth_is_nearest_point(sphere_raster):
    _, depth, _ = sphere_raster
    assert abs(depth[256, 256] - 2.0) <= 0.01 * 2.0


def test_mask_equals_finite_depth_and_background_white(sphere_raster):
    rgb, depth, mask = sphere_raster
    np.testing.assert_array_equal(mask, np.isfinite(depth))
    assert (rgb[~mask] == 1.0).all()
    # interior picks up the constant vertex color
    assert abs(rgb[256, 256, 0] - 0.5) < 1e-6


def test_mesh_behind_camera_renders_empty():
    mesh = uv_sphere_mesh(n_theta=16, n_phi=8)
    mesh = ScaffoldMesh(vertices=mesh.vertices + np.array([10.0, 0.0, 0.0]),
                        vertex_colors=mesh.vertex_colors, faces=mesh.faces,
                        vertex_density=mesh.vertex_density)
    # camera at (3,0,0) looks along -x; the mesh at x=10 sits behind it
    pose = CameraPose(theta=0.0, phi=0.0, radius=3.0)
    rgb, depth, mask = rasterize(mesh, pose, default_intrinsics(64), resolution=64)
    assert not mask.any()
    assert (rgb == 1.0).all()
    assert not np.isfinite(depth).any()


def test_rasterize_is_deterministic():
    mesh = uv_sphere_mesh(n_theta=24, n_phi=12)
    pose = CameraPose(theta=75.0, phi=15.0, radius=3.0)
    K = default_intrinsics(96)
    a = rasterize(mesh, pose, K, resolution=96)
    b = rasterize(mesh, pose, K, resolution=96)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_empty_mesh_renders_background():
    mesh = ScaffoldMesh(vertices=np.zeros((0, 3)), vertex_colors=np.zeros((0, 3)),
                        faces=np.zeros((0, 3), dtype=np.int64),
                        vertex_density=np.zeros(0))
    rgb, depth, mask = rasterize(mesh, CameraPose(theta=0, phi=0),
                                 default_intrinsics(32), resolution=32)
    assert not mask.any()
    assert (rgb == 1.0).all()


# ---------------------------------------------------------------------------
# nearest-view lookup


def test_find_closest_returns_exact_match():
    bank = ViewBank(views=[dummy_view(60, 0), dummy_view(90, 10),
                           dummy_view(120, -20)], anchor_bounds=ANCHOR_BOUNDS)
    for v in bank.views:
        assert find_closest(bank, v.pose.theta, v.pose.phi) is v


def test_find_closest_two_view_split():
    bank = ViewBank(views=[dummy_view(60, 0), dummy_view(120, 0)],
                    anchor_bounds=ANCHOR_BOUNDS)
    assert find_closest(bank, 89.0, 0.0) is bank.views[0]
    assert find_closest(bank, 91.0, 0.0) is bank.views[1]


def test_find_closest_matches_brute_force_great_circle():
    rng = np.random.default_rng(5)
    thetas = rng.uniform(0, 360, size=20)
    phis = rng.uniform(-80, 80, size=20)
    bank = ViewBank(views=[dummy_view(t, p) for t, p in zip(thetas, phis)],
                    anchor_bounds=(0, 360, -80, 80))

    def direction(theta, phi):
        th, ph = np.deg2rad(theta), np.deg2rad(phi)
        return np.array([np.cos(ph) * np.cos(th), np.cos(ph) * np.sin(th),
                         np.sin(ph)])

    for theta, phi in rng.uniform([0, -80], [360, 80], size=(25, 2)):
        chosen = find_closest(bank, theta, phi)
        q = direction(theta, phi)
        dots = np.array([direction(v.pose.theta, v.pose.phi) @ q
                         for v in bank.views])
        best = np.arccos(np.clip(dots, -1, 1)).min()
        got = np.arccos(np.clip(direction(chosen.pose.theta, chosen.pose.phi) @ q,
                                -1, 1))
        assert got <= best + 1e-12


def test_find_closest_rejects_empty_bank():
    with pytest.raises(ValueError):
        find_closest(ViewBank(views=[], anchor_bounds=ANCHOR_BOUNDS), 90, 0)


# ---------------------------------------------------------------------------
# prerendered views and banks


def test_view_requires_mask_depth_agreement():
    depth = np.full((4, 4), np.inf)
    with pytest.raises(ValueError):
        PrerenderedView(pose=CameraPose(theta=0, phi=0),
                        rgb=np.ones((4, 4, 3)), depth=depth,
                        mask=np.ones((4, 4), dtype=bool),  # claims coverage
                        latents={2: np.zeros((4, 2, 2))},
                        masks={2: np.zeros((2, 2))})


def test_latent_and_mask_lookup_resize_on_demand():
    view = dummy_view(90, 0, side=8)
    stored = view.latent_at(4)
    assert stored is view.latents[4]
    resized = view.latent_at(8)
    assert resized.shape == (4, 8, 8)
    m = view.mask_at(8)
    assert m.shape == (8, 8)
    assert set(np.unique(m)) <= {0.0, 1.0}


def test_latent_mask_pools_by_majority():
    mask = np.zeros((8, 8), dtype=bool)
    mask[:4, :4] = True          # one fully covered latent block
    mask[:4, 4:6] = True         # half of the next block -> not majority
    out = latent_mask(mask, 2)
    assert out[0, 0] == 1.0
    assert out[0, 1] == 0.0
    assert out[1, 0] == 0.0


@pytest.fixture(scope="module")
def small_bank():
    mesh = uv_sphere_mesh(n_theta=24, n_phi=12, radius=0.4)
    K = default_intrinsics(64)
    return build_view_bank(mesh, 3, ANCHOR_BOUNDS, K, seed=7,
                           resolution=64, latent_sides=(8, 16))


def test_bank_views_inside_bounds_with_latents(small_bank):
    assert len(small_bank) == 3
    for v in small_bank.views:
        assert 60.0 <= v.pose.theta <= 120.0
        assert -30.0 <= v.pose.phi <= 30.0
        assert set(v.latents) == {8, 16}
        assert v.latents[8].shape == (4, 8, 8)
        assert v.mask.any()  # the object is visible from anchor poses
        np.testing.assert_array_equal(v.mask, np.isfinite(v.depth))


def test_bank_build_is_deterministic(small_bank):
    mesh = uv_sphere_mesh(n_theta=24, n_phi=12, radius=0.4)
    again = build_view_bank(mesh, 3, ANCHOR_BOUNDS, default_intrinsics(64),
                            seed=7, resolution=64, latent_sides=(8, 16))
    for a, b in zip(small_bank.views, again.views):
        assert a.pose.theta == b.pose.theta
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.latents[8], b.latents[8])


def test_bank_save_load_round_trip(small_bank, tmp_path):
    save_view_bank(small_bank, tmp_path / "bank")
    loaded = load_view_bank(tmp_path / "bank")
    assert len(loaded) == len(small_bank)
    assert loaded.anchor_bounds == tuple(small_bank.anchor_bounds)
    for a, b in zip(small_bank.views, loaded.views):
        assert a.pose.theta == b.pose.theta
        assert a.pose.phi == b.pose.phi
        np.testing.assert_array_equal(a.mask, b.mask)
        # depth survives as float32; +inf round-trips exactly
        np.testing.assert_array_equal(b.depth, a.depth.astype("<f4"))
        np.testing.assert_allclose(b.rgb, a.rgb, atol=0.5 / 255 + 1e-9)
        for side in (8, 16):
            np.testing.assert_allclose(b.latents[side], a.latents[side],
                                       rtol=1e-6, atol=1e-6)
            np.testing.assert_array_equal(b.masks[side], a.masks[side])


# ---------------------------------------------------------------------------
# tensor files


def test_tensor_file_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    z = rng.normal(size=(4, 8, 8))
    path = tmp_path / "z.bin"
    write_tensor(path, z)
    back = read_tensor(path)
    np.testing.assert_array_equal(back, z.astype("<f4").astype(np.float64))


def test_tensor_file_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 28)
    with pytest.raises(ValueError):
        read_tensor(path)


def test_tensor_file_rejects_truncation(tmp_path):
    path = tmp_path / "short.bin"
    write_tensor(path, np.zeros((2, 2, 2)))
    data = path.read_bytes()
    path.write_bytes(data[:-4])
    with pytest.raises(ValueError):
        read_tensor(path)


def test_tensor_file_requires_rank_three(tmp_path):
    with pytest.raises(ValueError):
        write_tensor(tmp_path / "x.bin", np.zeros((4, 4)))
