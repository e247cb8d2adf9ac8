"""Scaffold construction from a single RGB-D view.

A photograph with relative depth becomes a partial 3D object in four steps:
unproject pixels to a colored point cloud, drop statistical outliers,
estimate oriented normals, and reconstruct a surface by solving a Poisson
equation for a soft indicator function on a regular grid.  Low-support parts
of the reconstruction (surface hallucinated far from any sample) are trimmed
by a density quantile.

World frame convention downstream of ``build_scaffold``: the object is
centered at the origin with a unit bounding-box diagonal, +z is up, and the
photographed face looks toward +y (so an orbit camera on the +y side sees
the original photo's content).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

# Rotation taking source-photo camera axes (x right, y down, z forward) to
# the canonical object frame (+z up, photographed face toward +y): the
# camera's forward axis maps to -y (it looks from +y toward the origin) and
# its down axis maps to -z.
CAMERA_TO_ANCHOR_FRAME = np.array([
    [-1.0, 0.0, 0.0],
    [0.0, 0.0, -1.0],
    [0.0, -1.0, 0.0],
])

FALLBACK_NORMAL = np.array([0.0, 0.0, -1.0])


@dataclass
class CameraIntrinsics:
    """Pinhole parameters in pixels; pixel centers sit at integer coords."""

    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.skew != 0.0:
            raise ValueError("nonzero skew is not supported")


def default_intrinsics(resolution: int = 512) -> CameraIntrinsics:
    """45mm-equivalent lens on a 36mm sensor, principal point at center."""
    f = resolution * 45.0 / 36.0
    c = resolution / 2.0
    return CameraIntrinsics(fx=f, fy=f, cx=c, cy=c)


@dataclass
class RgbdImage:
    """An RGB image in [0,1] with a same-size positive relative depth map."""

    rgb: np.ndarray    # (H, W, 3)
    depth: np.ndarray  # (H, W); <=0 or non-finite marks invalid pixels

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be (H, W, 3), got {self.rgb.shape}")
        if self.depth.shape != self.rgb.shape[:2]:
            raise ValueError("depth resolution must match rgb")
        if self.rgb.min() < 0.0 or self.rgb.max() > 1.0:
            raise ValueError("rgb values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.depth) & (self.depth > 0)


@dataclass
class PointCloud:
    points: np.ndarray                      # (N, 3)
    colors: np.ndarray                      # (N, 3) in [0, 1]
    normals: np.ndarray | None = None       # (N, 3) unit vectors
    normal_fallback: np.ndarray | None = None  # (N,) bool; True where the
    # neighborhood was too degenerate for a real estimate

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("points must be (N, 3)")
        if self.colors.shape != self.points.shape:
            raise ValueError("colors must match points")
        if not np.isfinite(self.points).all():
            raise ValueError("points must be finite")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            norms = np.linalg.norm(self.normals, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise ValueError("normals must be unit length")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class ScaffoldMesh:
    vertices: np.ndarray        # (V, 3)
    vertex_colors: np.ndarray   # (V, 3) in [0, 1]
    faces: np.ndarray           # (F, 3) int indices
    vertex_density: np.ndarray  # (V,) nonnegative reconstruction support

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.vertex_colors = np.asarray(self.vertex_colors, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.vertex_density = np.asarray(self.vertex_density, dtype=np.float64)
        if len(self.faces) and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")
        if self.vertex_density.min(initial=0.0) < 0.0:
            raise ValueError("vertex_density must be nonnegative")


def unproject(image: RgbdImage, K: CameraIntrinsics,
              depth_scale: float = 1.0) -> PointCloud:
    """Lift every valid pixel to a 3D point through the pinhole model.

    Pixel (u, v) at metric depth z lands at (z*(u-cx)/fx, z*(v-cy)/fy, z).
    """
    if depth_scale <= 0:
        raise ValueError("depth_scale must be positive")
    valid = image.valid_mask
    if not valid.any():
        raise ValueError("no valid depth pixels to unproject")
    rows, cols = np.nonzero(valid)
    z = depth_scale * image.depth[rows, cols]
    x = z * (cols - K.cx) / K.fx
    y = z * (rows - K.cy) / K.fy
    return PointCloud(points=np.column_stack([x, y, z]),
                      colors=image.rgb[rows, cols])


def _knn_mean_distances(points: np.ndarray, k: int) -> np.ndarray:
    tree = cKDTree(points)
    # first hit is the point itself at distance 0
    dists, _ = tree.query(points, k=k + 1)
    return dists[:, 1:].mean(axis=1)


def remove_outliers(pc: PointCloud, k_neighbors: int = 5,
                    std_ratio: float = 1.0) -> PointCloud:
    """Drop points whose mean k-nearest-neighbor distance is anomalous.

    A point survives iff its mean distance to its k nearest neighbors is at
    most the global mean of that statistic plus std_ratio standard
    deviations.  Order and colors are preserved.
    """
    if len(pc) < k_neighbors + 1:
        raise ValueError(f"need at least {k_neighbors + 1} points")
    stat = _knn_mean_distances(pc.points, k_neighbors)
    keep = stat <= stat.mean() + std_ratio * stat.std()
    return PointCloud(
        points=pc.points[keep],
        colors=pc.colors[keep],
        normals=None if pc.normals is None else pc.normals[keep],
        normal_fallback=(None if pc.normal_fallback is None
                         else pc.normal_fallback[keep]),
    )


def estimate_normals(pc: PointCloud, k_neighbors: int = 16) -> PointCloud:
    """Per-point PCA normals from k-NN neighborhoods, facing the origin.

    The normal is the least-eigenvalue eigenvector of the neighborhood
    covariance (point itself included), sign-flipped so dot(n, -p) >= 0,
    i.e. toward the capture camera at the origin.  Neighborhoods with
    covariance rank < 2 get the fallback normal (0, 0, -1) and a flag.
    """
    if len(pc) < k_neighbors + 1:
        raise ValueError(f"need at least {k_neighbors + 1} points")
    tree = cKDTree(pc.points)
    _, idx = tree.query(pc.points, k=k_neighbors + 1)
    hoods = pc.points[idx]                       # (N, k+1, 3)
    centered = hoods - hoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k_neighbors + 1)
    evals, evecs = np.linalg.eigh(cov)           # ascending eigenvalues
    normals = evecs[:, :, 0].copy()
    fallback = evals[:, 1] <= 1e-12 * np.maximum(evals[:, 2], 1e-300)
    normals[fallback] = FALLBACK_NORMAL
    flip = np.einsum("ni,ni->n", normals, -pc.points) < 0
    normals[flip & ~fallback] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(points=pc.points.copy(), colors=pc.colors.copy(),
                      normals=normals, normal_fallback=fallback)


def _trilinear_splat(coords: np.ndarray, values: np.ndarray,
                     grid_shape: tuple[int, int, int]) -> np.ndarray:
    """Scatter per-point values onto grid nodes with trilinear weights."""
    out_shape = grid_shape + values.shape[1:]
    acc = np.zeros(out_shape)
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                w = wx * wy * wz
                ix = np.clip(base[:, 0] + dx, 0, grid_shape[0] - 1)
                iy = np.clip(base[:, 1] + dy, 0, grid_shape[1] - 1)
                iz = np.clip(base[:, 2] + dz, 0, grid_shape[2] - 1)
                if values.ndim == 1:
                    np.add.at(acc, (ix, iy, iz), w * values)
                else:
                    np.add.at(acc, (ix, iy, iz), w[:, None] * values)
    return acc


def _trilinear_gather(grid: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample a scalar grid at fractional node coordinates."""
    n = np.array(grid.shape)
    base = np.clip(np.floor(coords).astype(np.int64), 0, n - 2)
    frac = np.clip(coords - base, 0.0, 1.0)
    out = np.zeros(len(coords))
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                out += (wx * wy * wz) * grid[base[:, 0] + dx,
                                             base[:, 1] + dy,
                                             base[:, 2] + dz]
    return out


def _central_difference(F: np.ndarray, axis: int, h: float) -> np.ndarray:
    pad = [(1, 1) if ax == axis else (0, 0) for ax in range(F.ndim)]
    Fp = np.pad(F, pad)
    lo = [slice(None)] * F.ndim
    hi = [slice(None)] * F.ndim
    lo[axis] = slice(0, -2)
    hi[axis] = slice(2, None)
    return (Fp[tuple(hi)] - Fp[tuple(lo)]) / (2.0 * h)


def poisson_reconstruct(pc: PointCloud, grid_depth: int = 7,
                        padding: float = 0.15, cg_rtol: float = 1e-5,
                        cg_maxiter: int = 3000) -> ScaffoldMesh:
    """Surface reconstruction from oriented points on a regular grid.

    The splatted normal field V defines a Poisson problem lap(chi) = div V
    for a soft indicator chi (zero Dirichlet boundary); the surface is the
    chi level set at the mean chi over the input samples, extracted with
    marching cubes.  Vertex density is the interpolated sample-support
    count, vertex colors are inverse-distance blends of nearby points.
    """
    if pc.normals is None:
        raise ValueError("point cloud must carry normals")
    if len(pc) < 100:
        raise ValueError("need at least 100 points")
    n = 2 ** grid_depth
    lo, hi = pc.points.min(axis=0), pc.points.max(axis=0)
    side = float((hi - lo).max()) * (1.0 + 2.0 * padding)
    if side <= 0:
        raise ValueError("degenerate point cloud extent")
    origin = (lo + hi) / 2.0 - side / 2.0
    h = side / (n - 1)
    coords = (pc.points - origin) / h

    splat_normals = pc.normals.copy()
    if pc.normal_fallback is not None:
        splat_normals[pc.normal_fallback] = 0.0  # no orientation evidence
    V = _trilinear_splat(coords, splat_normals, (n, n, n))
    support = _trilinear_splat(coords, np.ones(len(pc)), (n, n, n))

    div = sum(_central_difference(V[..., ax], ax, h) for ax in range(3))
    b = (-h * h) * div

    def neg_laplacian(x: np.ndarray) -> np.ndarray:
        u = x.reshape(n, n, n)
        out = 6.0 * u
        out[1:, :, :] -= u[:-1, :, :]
        out[:-1, :, :] -= u[1:, :, :]
        out[:, 1:, :] -= u[:, :-1, :]
        out[:, :-1, :] -= u[:, 1:, :]
        out[:, :, 1:] -= u[:, :, :-1]
        out[:, :, :-1] -= u[:, :, 1:]
        return out.ravel()

    A = LinearOperator((n ** 3, n ** 3), matvec=neg_laplacian)
    chi_flat, info = cg(A, b.ravel(), rtol=cg_rtol, atol=0.0,
                        maxiter=cg_maxiter)
    if info != 0:
        residual = np.linalg.norm(A.matvec(chi_flat) - b.ravel())
        raise RuntimeError(
            f"Poisson solve did not converge (info={info}, "
            f"residual={residual:.3e})")
    chi = chi_flat.reshape(n, n, n)

    isovalue = float(_trilinear_gather(chi, coords).mean())
    verts, faces, _, _ = marching_cubes(chi, level=isovalue)

    density = _trilinear_gather(support, verts)
    tree = cKDTree(pc.points)
    world_verts = origin + verts * h
    dists, idx = tree.query(world_verts, k=4)
    weights = 1.0 / np.maximum(dists, 1e-12)
    weights /= weights.sum(axis=1, keepdims=True)
    colors = np.einsum("vk,vkc->vc", weights, pc.colors[idx])

    distinct = ((faces[:, 0] != faces[:, 1])
                & (faces[:, 1] != faces[:, 2])
                & (faces[:, 0] != faces[:, 2]))
    return ScaffoldMesh(vertices=world_verts,
                        vertex_colors=np.clip(colors, 0.0, 1.0),
                        faces=faces[distinct],
                        vertex_density=np.maximum(density, 0.0))


def trim_low_density(mesh: ScaffoldMesh, quantile: float) -> ScaffoldMesh:
    """Remove vertices whose support density falls below a quantile.

    Incident faces go with them; surviving vertices are re-indexed
    compactly.
    """
    if not 0.0 <= quantile <= 1.0:
        raise ValueError("quantile must lie in [0, 1]")
    if len(mesh.vertices) == 0:
        return mesh
    threshold = np.quantile(mesh.vertex_density, quantile)
    keep = mesh.vertex_density >= threshold
    new_index = np.cumsum(keep) - 1
    face_ok = keep[mesh.faces].all(axis=1) if len(mesh.faces) else np.zeros(0, bool)
    return ScaffoldMesh(
        vertices=mesh.vertices[keep],
        vertex_colors=mesh.vertex_colors[keep],
        faces=new_index[mesh.faces[face_ok]],
        vertex_density=mesh.vertex_density[keep],
    )


def canonicalize(pc: PointCloud) -> tuple[PointCloud, dict]:
    """Move a camera-frame cloud into the canonical object frame.

    Centers the bounding box at the origin, rotates camera axes into the
    anchor frame, and scales to a unit bounding-box diagonal.  Returns the
    transformed cloud and the transform record {center, scale}.
    """
    lo, hi = pc.points.min(axis=0), pc.points.max(axis=0)
    center = (lo + hi) / 2.0
    diagonal = float(np.linalg.norm(hi - lo))
    if diagonal <= 0:
        raise ValueError("degenerate cloud: zero bounding-box diagonal")
    scale = 1.0 / diagonal
    points = scale * (pc.points - center) @ CAMERA_TO_ANCHOR_FRAME.T
    normals = None if pc.normals is None else pc.normals @ CAMERA_TO_ANCHOR_FRAME.T
    out = PointCloud(points=points, colors=pc.colors.copy(), normals=normals,
                     normal_fallback=pc.normal_fallback)
    return out, {"center": center, "scale": scale}


def build_scaffold(image: RgbdImage, K: CameraIntrinsics,
                   grid_depth: int = 7, outlier_k: int = 5,
                   outlier_std_ratio: float = 1.0, normal_k: int = 16,
                   trim_quantile: float = 0.1) -> tuple[ScaffoldMesh, dict]:
    """Full scaffold chain: unproject, clean, orient, reconstruct, trim."""
    cloud = unproject(image, K, depth_scale=1.0)
    cloud = remove_outliers(cloud, outlier_k, outlier_std_ratio)
    cloud = estimate_normals(cloud, normal_k)
    cloud, transform = canonicalize(cloud)
    mesh = poisson_reconstruct(cloud, grid_depth=grid_depth)
    mesh = trim_low_density(mesh, trim_quantile)
    return mesh, transform


# ---------------------------------------------------------------------------
# PLY serialization


def save_point_cloud_ply(pc: PointCloud, path) -> None:
    """ASCII PLY with positions, 8-bit colors, and normals when present."""
    has_normals = pc.normals is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pc)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue"]
    if has_normals:
        lines += ["property float nx", "property float ny", "property float nz"]
    lines += ["end_header"]
    rgb255 = np.clip(np.round(pc.colors * 255), 0, 255).astype(int)
    for i in range(len(pc)):
        row = (f"{pc.points[i, 0]:.7g} {pc.points[i, 1]:.7g} "
               f"{pc.points[i, 2]:.7g} {rgb255[i, 0]} {rgb255[i, 1]} {rgb255[i, 2]}")
        if has_normals:
            row += (f" {pc.normals[i, 0]:.7g} {pc.normals[i, 1]:.7g} "
                    f"{pc.normals[i, 2]:.7g}")
        lines.append(row)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def save_mesh_ply(mesh: ScaffoldMesh, path) -> None:
    """ASCII PLY with colors and a per-vertex density property."""
    lines = ["ply", "format ascii 1.0",
             f"element vertex {len(mesh.vertices)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue",
             "property float density",
             f"element face {len(mesh.faces)}",
             "property list uchar int vertex_indices", "end_header"]
    rgb255 = np.clip(np.round(mesh.vertex_colors * 255), 0, 255).astype(int)
    for i in range(len(mesh.vertices)):
        lines.append(
            f"{mesh.vertices[i, 0]:.7g} {mesh.vertices[i, 1]:.7g} "
            f"{mesh.vertices[i, 2]:.7g} {rgb255[i, 0]} {rgb255[i, 1]} "
            f"{rgb255[i, 2]} {mesh.vertex_density[i]:.7g}")
    for f in mesh.faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh_ply(path) -> ScaffoldMesh:
    """Read back the ASCII PLY layout written by save_mesh_ply."""
    with open(path) as fh:
        tokens = fh.read().split("\n")
    if tokens[0] != "ply":
        raise ValueError("not a PLY file")
    n_vert = n_face = 0
    header_end = 0
    for i, line in enumerate(tokens):
        if line.startswith("element vertex"):
            n_vert = int(line.split()[-1])
        elif line.startswith("element face"):
            n_face = int(line.split()[-1])
        elif line == "end_header":
            header_end = i + 1
            break
    verts = np.zeros((n_vert, 3))
    colors = np.zeros((n_vert, 3))
    density = np.zeros(n_vert)
    for i in range(n_vert):
        parts = tokens[header_end + i].split()
        verts[i] = [float(p) for p in parts[:3]]
        colors[i] = [int(p) / 255.0 for p in parts[3:6]]
        density[i] = float(parts[6])
    faces = np.zeros((n_face, 3), dtype=np.int64)
    for i in range(n_face):
        parts = tokens[header_end + n_vert + i].split()
        faces[i] = [int(p) for p in parts[1:4]]
    return ScaffoldMesh(vertices=verts, vertex_colors=colors, faces=faces,
                        vertex_density=density)


def load_rgbd(image_path, depth_path) -> RgbdImage:
    """Load an 8-bit RGB image plus a float depth file (.npy or raw f32).

    A raw depth file must hold exactly H*W little-endian float32 values in
    row-major order matching the image resolution.
    """
    from PIL import Image

    rgb = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.float64) / 255.0
    h, w = rgb.shape[:2]
    depth_path = str(depth_path)
    if depth_path.endswith(".npy"):
        depth = np.load(depth_path).astype(np.float64)
    else:
        raw = np.fromfile(depth_path, dtype="<f4")
        if raw.size != h * w:
            raise ValueError(
                f"raw depth holds {raw.size} values, expected {h * w}")
        depth = raw.reshape(h, w).astype(np.float64)
    return RgbdImage(rgb=rgb, depth=depth)
