"""Anchor-view pre-rendering: orbit cameras, a software rasterizer, and the
view bank.

The scaffold mesh is rendered from uniformly sampled poses inside the anchor
angle box.  Each pose yields an RGB image (white background), a depth map,
a coverage mask, and encoded latents cached at the sides the training loop
will ask for.  During training the bank answers nearest-view queries by
great-circle distance.

Camera convention: a pose (theta, phi, radius) in degrees places the camera
at look_at + radius * (cos phi cos theta, cos phi sin theta, sin phi) — +z is
up — looking at ``look_at``; image axes follow the usual computer-vision
layout (x right, y down, z forward), pixel centers at integer coordinates.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .codec import StubLatentCodec, block_average, resize_latent, resize_mask
from .geometry import CameraIntrinsics, ScaffoldMesh

TENSOR_MAGIC = b"OFT1"
BACKGROUND_WHITE = 1.0


@dataclass
class CameraPose:
    theta: float            # azimuth degrees, normalized to [0, 360)
    phi: float              # elevation degrees in [-90, 90]
    radius: float = 3.0
    look_at: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not -90.0 <= self.phi <= 90.0:
            raise ValueError("phi must lie in [-90, 90]")
        self.theta = float(self.theta) % 360.0
        self.look_at = np.asarray(self.look_at, dtype=np.float64)

    def position(self) -> np.ndarray:
        th = np.deg2rad(self.theta)
        ph = np.deg2rad(self.phi)
        offset = np.array([np.cos(ph) * np.cos(th),
                           np.cos(ph) * np.sin(th),
                           np.sin(ph)])
        return self.look_at + self.radius * offset

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        """Rotation R and camera center C with p_cam = R @ (p_world - C)."""
        C = self.position()
        forward = self.look_at - C
        forward /= np.linalg.norm(forward)
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:  # looking straight up/down
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.vstack([right, down, forward])
        return R, C


def angles_to_direction(theta, phi) -> np.ndarray:
    """Unit view direction(s) for azimuth/elevation in degrees."""
    th = np.deg2rad(np.asarray(theta, dtype=np.float64))
    ph = np.deg2rad(np.asarray(phi, dtype=np.float64))
    return np.stack([np.cos(ph) * np.cos(th),
                     np.cos(ph) * np.sin(th),
                     np.sin(ph)], axis=-1)


def great_circle_deg(theta1, phi1, theta2, phi2):
    """Angular distance in degrees between two directions on the sphere."""
    d1 = angles_to_direction(theta1, phi1)
    d2 = angles_to_direction(theta2, phi2)
    dot = np.clip((d1 * d2).sum(axis=-1), -1.0, 1.0)
    return np.rad2deg(np.arccos(dot))


def sample_anchor_poses(n: int, bounds, seed: int, radius: float = 3.0,
                        look_at=(0.0, 0.0, 0.0)) -> list[CameraPose]:
    """n poses i.i.d. uniform over the closed bounds rectangle."""
    if n < 1:
        raise ValueError("need at least one pose")
    tmin, tmax, pmin, pmax = bounds
    if tmin > tmax or pmin > pmax:
        raise ValueError("bounds must be ordered")
    rng = np.random.default_rng(seed)
    thetas = rng.uniform(tmin, tmax, size=n) if tmax > tmin else np.full(n, tmin)
    phis = rng.uniform(pmin, pmax, size=n) if pmax > pmin else np.full(n, pmin)
    return [CameraPose(theta=t, phi=p, radius=radius,
                       look_at=np.asarray(look_at, dtype=np.float64))
            for t, p in zip(thetas, phis)]


def project_points(points: np.ndarray, pose: CameraPose,
                   K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project world points; returns (N,2) pixel coords and (N,) depths."""
    R, C = pose.world_to_camera()
    cam = (points - C) @ R.T
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * cam[:, 0] / z + K.cx
        v = K.fy * cam[:, 1] / z + K.cy
    return np.column_stack([u, v]), z


def rasterize(mesh: ScaffoldMesh, pose: CameraPose, K: CameraIntrinsics,
              resolution: int = 512, near_clip: float = 1e-3):
    """Z-buffered perspective rasterization with vertex-color interpolation.

    Returns (rgb, depth, mask): rgb has a white background, depth is +inf
    where nothing is covered, mask is the binary coverage.  Triangles with
    any vertex at or behind the near clip are skipped (a mesh entirely
    behind the camera renders as empty background).  Both triangle sides
    are kept — the scaffold is an open shell.
    """
    H = W = int(resolution)
    rgb = np.full((H, W, 3), BACKGROUND_WHITE)
    depth = np.full((H, W), np.inf)
    if len(mesh.faces) == 0:
        return rgb, depth, np.zeros((H, W), dtype=bool)

    pix, z = project_points(mesh.vertices, pose, K)
    tri_pix = pix[mesh.faces]          # (F, 3, 2)
    tri_z = z[mesh.faces]              # (F, 3)
    tri_col = mesh.vertex_colors[mesh.faces]

    ok = (tri_z > near_clip).all(axis=1)
    x0 = np.maximum(np.ceil(tri_pix[:, :, 0].min(axis=1)), 0).astype(np.int64)
    x1 = np.minimum(np.floor(tri_pix[:, :, 0].max(axis=1)), W - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(tri_pix[:, :, 1].min(axis=1)), 0).astype(np.int64)
    y1 = np.minimum(np.floor(tri_pix[:, :, 1].max(axis=1)), H - 1).astype(np.int64)
    ok &= (x1 >= x0) & (y1 >= y0)
    if not ok.any():
        return rgb, depth, np.zeros((H, W), dtype=bool)

    tri_pix, tri_z, tri_col = tri_pix[ok], tri_z[ok], tri_col[ok]
    x0, x1, y0, y1 = x0[ok], x1[ok], y0[ok], y1[ok]

    # Expand each face's pixel bounding box into one flat instance list.
    bw = x1 - x0 + 1
    bh = y1 - y0 + 1
    cells = bw * bh
    starts = np.concatenate(([0], np.cumsum(cells)[:-1]))
    total = int(cells.sum())
    face_of = np.repeat(np.arange(len(cells)), cells)
    local = np.arange(total) - starts[face_of]
    px = x0[face_of] + local % bw[face_of]
    py = y0[face_of] + local // bw[face_of]

    # Signed-area barycentrics of pixel centers in the projected triangles.
    a = tri_pix[face_of, 0]
    b = tri_pix[face_of, 1]
    c = tri_pix[face_of, 2]
    qx = px - a[:, 0]
    qy = py - a[:, 1]
    abx, aby = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    acx, acy = c[:, 0] - a[:, 0], c[:, 1] - a[:, 1]
    area = abx * acy - aby * acx
    degenerate = np.abs(area) < 1e-12
    area = np.where(degenerate, 1.0, area)
    w1 = (qx * acy - qy * acx) / area
    w2 = (abx * qy - aby * qx) / area
    w0 = 1.0 - w1 - w2
    inside = (~degenerate) & (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    if not inside.any():
        return rgb, depth, np.zeros((H, W), dtype=bool)

    face_of = face_of[inside]
    px, py = px[inside], py[inside]
    w0, w1, w2 = w0[inside], w1[inside], w2[inside]

    # Perspective-correct interpolation via reciprocal depth.
    inv_z = (w0 / tri_z[face_of, 0] + w1 / tri_z[face_of, 1]
             + w2 / tri_z[face_of, 2])
    z_pix = 1.0 / inv_z
    col = (w0[:, None] * tri_col[face_of, 0] / tri_z[face_of, 0, None]
           + w1[:, None] * tri_col[face_of, 1] / tri_z[face_of, 1, None]
           + w2[:, None] * tri_col[face_of, 2] / tri_z[face_of, 2, None]) * z_pix[:, None]

    # Z-buffer resolve: nearest instance wins each pixel.
    pixel_id = py * W + px
    order = np.lexsort((z_pix, pixel_id))
    pixel_id, z_pix, col = pixel_id[order], z_pix[order], col[order]
    first = np.concatenate(([True], pixel_id[1:] != pixel_id[:-1]))
    win_pix = pixel_id[first]
    wy, wx = win_pix // W, win_pix % W
    depth[wy, wx] = z_pix[first]
    rgb[wy, wx] = np.clip(col[first], 0.0, 1.0)
    mask = np.isfinite(depth)
    return rgb, depth, mask


@dataclass
class PrerenderedView:
    pose: CameraPose
    rgb: np.ndarray            # (S, S, 3) in [0, 1]
    depth: np.ndarray          # (S, S), +inf where uncovered
    mask: np.ndarray           # (S, S) bool coverage
    latents: dict              # latent side -> (4, side, side)
    masks: dict                # latent side -> (side, side) binary float

    def __post_init__(self):
        if bool((self.mask != np.isfinite(self.depth)).any()):
            raise ValueError("mask must equal the finite-depth set")

    def latent_at(self, side: int) -> np.ndarray:
        if side in self.latents:
            return self.latents[side]
        source = max(self.latents)
        return resize_latent(self.latents[source], side)

    def mask_at(self, side: int) -> np.ndarray:
        if side in self.masks:
            return self.masks[side]
        source = max(self.masks)
        return resize_mask(self.masks[source], side)


@dataclass
class ViewBank:
    views: list
    anchor_bounds: tuple  # (theta_min, theta_max, phi_min, phi_max)

    def __len__(self) -> int:
        return len(self.views)


def encode_view(rgb: np.ndarray, mask: np.ndarray, codec,
                latent_side: int) -> np.ndarray:
    """Encode one rendered view to a (4, L, L) latent."""
    return codec.encode(rgb, latent_side, mask=mask)


def latent_mask(mask: np.ndarray, latent_side: int) -> np.ndarray:
    """Downsample a pixel coverage mask to a binary latent-side mask."""
    pooled = block_average(mask.astype(np.float64),
                           mask.shape[0] // latent_side)
    return (pooled > 0.5).astype(np.float64)


def build_view_bank(mesh: ScaffoldMesh, n_views: int, bounds, K, codec=None,
                    seed: int = 0, radius: float = 3.0, resolution: int = 512,
                    latent_sides=(64, 128)) -> ViewBank:
    """Render n uniformly placed anchor poses and encode their latents."""
    codec = codec or StubLatentCodec()
    poses = sample_anchor_poses(n_views, bounds, seed, radius=radius)
    views = []
    for pose in poses:
        rgb, depth, mask = rasterize(mesh, pose, K, resolution)
        latents = {side: encode_view(rgb, mask, codec, side)
                   for side in latent_sides}
        masks = {side: latent_mask(mask, side) for side in latent_sides}
        views.append(PrerenderedView(pose=pose, rgb=rgb, depth=depth,
                                     mask=mask, latents=latents, masks=masks))
    return ViewBank(views=views, anchor_bounds=tuple(bounds))


def find_closest(bank: ViewBank, theta: float, phi: float) -> PrerenderedView:
    """The bank view nearest in great-circle distance; ties to lowest index."""
    if not bank.views:
        raise ValueError("view bank is empty")
    thetas = np.array([v.pose.theta for v in bank.views])
    phis = np.array([v.pose.phi for v in bank.views])
    dists = great_circle_deg(theta, phi, thetas, phis)
    return bank.views[int(np.argmin(dists))]


# ---------------------------------------------------------------------------
# Persistence


def write_tensor(path, tensor: np.ndarray) -> None:
    """Raw little-endian float32 tensor with a 16-byte (magic, dims) header."""
    t = np.ascontiguousarray(tensor, dtype="<f4")
    if t.ndim != 3:
        raise ValueError("tensor files hold rank-3 tensors")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<III", *t.shape))
        fh.write(t.tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if header[:4] != TENSOR_MAGIC:
            raise ValueError("bad tensor file magic")
        dims = struct.unpack("<III", header[4:])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != dims[0] * dims[1] * dims[2]:
        raise ValueError("tensor file size does not match dims")
    return data.reshape(dims).astype(np.float64)


def save_view_bank(bank: ViewBank, out_dir) -> None:
    """Persist a bank: PNGs for rgb/mask, raw f32 depth, tensor latents."""
    from pathlib import Path

    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"anchor_bounds": list(bank.anchor_bounds), "views": []}
    for i, view in enumerate(bank.views):
        stem = f"view_{i:04d}"
        Image.fromarray(
            np.round(view.rgb * 255).astype(np.uint8)).save(out / f"{stem}_rgb.png")
        Image.fromarray(
            (view.mask * 255).astype(np.uint8)).save(out / f"{stem}_mask.png")
        view.depth.astype("<f4").tofile(out / f"{stem}_depth.f32")
        for side, z in view.latents.items():
            write_tensor(out / f"{stem}_z{side}.bin", z)
        manifest["views"].append({
            "index": i,
            "theta": view.pose.theta,
            "phi": view.pose.phi,
            "radius": view.pose.radius,
            "resolution": view.rgb.shape[0],
            "latent_sides": sorted(view.latents),
        })
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_view_bank(in_dir) -> ViewBank:
    from pathlib import Path

    from PIL import Image

    src = Path(in_dir)
    with open(src / "manifest.json") as fh:
        manifest = json.load(fh)
    views = []
    for entry in manifest["views"]:
        stem = f"view_{entry['index']:04d}"
        rgb = np.asarray(Image.open(src / f"{stem}_rgb.png"),
                         dtype=np.float64) / 255.0
        mask = np.asarray(Image.open(src / f"{stem}_mask.png")) > 127
        res = entry["resolution"]
        depth = np.fromfile(src / f"{stem}_depth.f32",
                            dtype="<f4").reshape(res, res).astype(np.float64)
        latents = {side: read_tensor(src / f"{stem}_z{side}.bin")
                   for side in entry["latent_sides"]}
        masks = {side: latent_mask(mask, side) for side in entry["latent_sides"]}
        pose = CameraPose(theta=entry["theta"], phi=entry["phi"],
                          radius=entry["radius"])
        views.append(PrerenderedView(pose=pose, rgb=rgb, depth=depth,
                                     mask=mask, latents=latents, masks=masks))
    return ViewBank(views=views, anchor_bounds=tuple(manifest["anchor_bounds"]))
