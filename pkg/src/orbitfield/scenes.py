"""Procedural meshes used as synthetic targets and test fixtures."""

from __future__ import annotations

import numpy as np

from .geometry import ScaffoldMesh


def make_uv_sphere(radius: float = 1.0, n_rings: int = 32,
                   n_segments: int = 64, center=(0.0, 0.0, 0.0)) -> ScaffoldMesh:
    """Latitude/longitude triangulated sphere with unit density and gray
    vertex colors (recolor afterwards as needed)."""
    if n_rings < 2 or n_segments < 3:
        raise ValueError("sphere tessellation too coarse")
    center = np.asarray(center, dtype=np.float64)
    verts = [center + np.array([0.0, 0.0, radius])]
    for i in range(1, n_rings):
        polar = np.pi * i / n_rings
        z = radius * np.cos(polar)
        ring_r = radius * np.sin(polar)
        for j in range(n_segments):
            az = 2.0 * np.pi * j / n_segments
            verts.append(center + np.array([ring_r * np.cos(az),
                                            ring_r * np.sin(az), z]))
    verts.append(center + np.array([0.0, 0.0, -radius]))
    verts = np.array(verts)

    faces = []
    def ring_index(i, j):
        return 1 + (i - 1) * n_segments + (j % n_segments)

    for j in range(n_segments):  # top cap
        faces.append([0, ring_index(1, j), ring_index(1, j + 1)])
    for i in range(1, n_rings - 1):
        for j in range(n_segments):
            a, b = ring_index(i, j), ring_index(i, j + 1)
            c, d = ring_index(i + 1, j), ring_index(i + 1, j + 1)
            faces.append([a, c, b])
            faces.append([b, c, d])
    bottom = len(verts) - 1
    for j in range(n_segments):  # bottom cap
        faces.append([bottom, ring_index(n_rings - 1, j + 1),
                      ring_index(n_rings - 1, j)])

    return ScaffoldMesh(vertices=verts,
                        vertex_colors=np.full((len(verts), 3), 0.5),
                        faces=np.array(faces, dtype=np.int64),
                        vertex_density=np.ones(len(verts)))


def make_two_tone_sphere(radius: float = 0.45, n_rings: int = 32,
                         n_segments: int = 64,
                         front_color=(0.9, 0.15, 0.1),
                         back_color=(0.1, 0.2, 0.85)) -> ScaffoldMesh:
    """Sphere whose +y half (the side anchor cameras see) and -y half carry
    contrasting colors — a target whose hidden side differs maximally from
    its photographed side."""
    mesh = make_uv_sphere(radius=radius, n_rings=n_rings, n_segments=n_segments)
    front = mesh.vertices[:, 1] > 0
    colors = np.where(front[:, None], np.asarray(front_color, dtype=np.float64),
                      np.asarray(back_color, dtype=np.float64))
    mesh.vertex_colors = colors
    return mesh
