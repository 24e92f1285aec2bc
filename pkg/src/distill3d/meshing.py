"""Mesh extraction from a density field, UV atlas, texture baking and OBJ export."""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .field import _field_dtype
from .kernels import marching, raster


@dataclass
class TexturedMesh:
    """Triangle mesh with an OBJ-style UV layout.

    ``uv`` holds texture coordinates in [0, 1]^2 (u along texture columns, v
    along rows, top row first) and ``uv_faces`` indexes them per face corner,
    so a vertex can carry different UVs on either side of a seam.
    """

    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    uv: np.ndarray = dc_field(default_factory=lambda: np.zeros((0, 2)))
    uv_faces: np.ndarray = dc_field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    texture: np.ndarray | None = None  # (K, K, 3) in [0, 1]
    vertex_colors: np.ndarray | None = None  # (V, 3)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.max() >= len(self.vertices) or self.faces.min() < 0):
            raise ValueError("face index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0


def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def marching_cubes(grid: np.ndarray, threshold: float, bounds: tuple[float, float] = (-1.0, 1.0),
                   min_area: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Isosurface of ``grid`` at ``threshold`` with linear edge interpolation.

    ``grid[i, j, k]`` is the value at ``lo + (i, j, k) * (hi - lo) / (n - 1)``.
    Triangles are wound with normals pointing towards lower values, triangles
    with area below ``min_area`` are dropped, and unused vertices removed.
    A grid that never crosses the threshold yields empty arrays.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or min(grid.shape) < 2:
        raise ValueError(f"grid must be 3-D with at least 2 samples per axis, got {grid.shape}")
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    tri_edges = marching.triangulate(grid, threshold)
    if len(tri_edges) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    edge_ids, inverse = np.unique(tri_edges, return_inverse=True)
    faces = inverse.reshape(-1, 3)

    nx, ny, nz = grid.shape
    axis = edge_ids % 3
    point = edge_ids // 3
    p0 = np.stack(np.unravel_index(point, (nx, ny, nz)), -1)
    p1 = p0 + np.eye(3, dtype=np.int64)[axis]
    v0 = grid[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = grid[p1[:, 0], p1[:, 1], p1[:, 2]]
    s = np.clip((threshold - v0) / (v1 - v0), 0.0, 1.0)
    lattice = p0 + s[:, None] * (p1 - p0)
    lo, hi = bounds
    scale = (hi - lo) / (np.array(grid.shape) - 1)
    verts = lo + lattice * scale

    keep = triangle_areas(verts, faces) >= min_area
    faces = faces[keep]
    used, faces = np.unique(faces, return_inverse=True)
    return verts[used], faces.reshape(-1, 3)


def enclosed_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    """Signed volume by the divergence theorem (positive for outward winding)."""
    v = vertices[faces]
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def edge_face_counts(faces: np.ndarray) -> np.ndarray:
    """Number of faces incident to each undirected edge."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    _, counts = np.unique(np.sort(e, 1), axis=0, return_counts=True)
    return counts


def is_watertight(faces: np.ndarray) -> bool:
    return len(faces) > 0 and bool(np.all(edge_face_counts(faces) == 2))


@torch.no_grad()
def query_colors(field, points: np.ndarray, chunk: int = 1 << 16) -> np.ndarray:
    dtype = _field_dtype(field)
    out = np.empty((len(points), 3))
    for s in range(0, len(points), chunk):
        p = torch.as_tensor(points[s : s + chunk], dtype=dtype)
        out[s : s + chunk] = field.color(p).double().numpy()
    return out


def vertex_colors(field, vertices: np.ndarray) -> np.ndarray:
    """Colour head evaluated at each vertex (the field's colour is view-independent)."""
    if len(vertices) == 0:
        return np.zeros((0, 3))
    return query_colors(field, np.asarray(vertices, dtype=np.float64))


def atlas_grid(n_faces: int) -> int:
    return max(1, math.ceil(math.sqrt(n_faces)))


def unwrap_uv(vertices: np.ndarray, faces: np.ndarray, texture_size: int = 1024,
              gutter_texels: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Default unwrapper: one right-triangle chart per face, packed row-major in a grid.

    Each chart is inset ``gutter_texels`` from its cell border, so
    neighbouring charts are at least two texels apart.  Returns ``(uv,
    uv_faces)`` with three UV entries per face.
    """
    n = len(faces)
    if n == 0:
        return np.zeros((0, 2)), np.zeros((0, 3), dtype=np.int64)
    g = atlas_grid(n)
    cell = 1.0 / g
    m = gutter_texels / texture_size
    if cell * texture_size < 2 * gutter_texels + 1:
        raise ValueError(
            f"{n} faces do not fit a {texture_size}^2 texture with a {gutter_texels}-texel gutter; "
            "use a larger texture"
        )
    k = np.arange(n)
    x0 = (k % g) * cell
    y0 = (k // g) * cell
    corners = np.stack(
        [
            np.stack([x0 + m, y0 + m], -1),
            np.stack([x0 + cell - m, y0 + m], -1),
            np.stack([x0 + m, y0 + cell - m], -1),
        ],
        1,
    )
    return corners.reshape(-1, 2), np.arange(3 * n, dtype=np.int64).reshape(n, 3)


Unwrapper = Callable[[np.ndarray, np.ndarray, int], tuple[np.ndarray, np.ndarray]]


def chart_overlap(uv: np.ndarray, uv_faces: np.ndarray, texture_size: int) -> int:
    """Number of texels covered by more than one chart."""
    _, count, _ = raster.raster_uv(uv[uv_faces] * texture_size, texture_size)
    return int((count > 1).sum())


def bake_texture(field, vertices: np.ndarray, faces: np.ndarray, uv: np.ndarray, uv_faces: np.ndarray,
                 texture_size: int = 1024) -> np.ndarray:
    """Query the field at the 3D point behind every chart texel; fill gutters from the nearest chart texel."""
    owner, _, bary = raster.raster_uv(uv[uv_faces] * texture_size, texture_size)
    covered = owner >= 0
    tex = np.ones((texture_size, texture_size, 3))
    if not covered.any():
        return tex
    f = owner[covered]
    pts = np.einsum("nk,nkd->nd", bary[covered], vertices[faces[f]])
    tex[covered] = query_colors(field, pts)
    _, (ii, jj) = ndimage.distance_transform_edt(~covered, return_indices=True)
    tex = tex[ii, jj]
    return np.clip(tex, 0.0, 1.0).astype(np.float32)


def extract_textured_mesh(field, grid: np.ndarray, threshold: float, bounds=(-1.0, 1.0),
                          texture_size: int = 1024, unwrapper: Unwrapper | None = None) -> TexturedMesh:
    verts, faces = marching_cubes(grid, threshold, bounds)
    if len(faces) == 0:
        raise ValueError(
            f"empty extraction: density never exceeds threshold {threshold} (grid max {float(np.max(grid)):.4g})"
        )
    colors = vertex_colors(field, verts)
    uv, uv_faces = (unwrapper or unwrap_uv)(verts, faces, texture_size)
    tex = bake_texture(field, verts, faces, uv, uv_faces, texture_size)
    return TexturedMesh(verts, faces, uv, uv_faces, tex, colors)


def save_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    Image.fromarray((arr * 255 + 0.5).astype(np.uint8)).save(path)


def write_obj(mesh: TexturedMesh, path, texture_name: str | None = None) -> list[Path]:
    """Write ``name.obj`` + ``name.mtl`` + texture PNG; returns the written paths.

    Vertex colours, when present, are appended to the ``v`` lines as the
    common ``v x y z r g b`` extension.
    """
    path = Path(path)
    stem = path.with_suffix("")
    mtl_path = stem.with_suffix(".mtl")
    texture_name = texture_name or f"{stem.name}_albedo.png"
    written = [path, mtl_path]
    lines = [f"mtllib {mtl_path.name}", "usemtl material0"]
    for k, v in enumerate(mesh.vertices):
        if mesh.vertex_colors is not None:
            c = mesh.vertex_colors[k]
            lines.append(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c[0]:.4f} {c[1]:.4f} {c[2]:.4f}")
        else:
            lines.append(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}")
    has_uv = len(mesh.uv_faces) == len(mesh.faces) and len(mesh.faces) > 0
    if has_uv:
        # OBJ puts v = 0 at the bottom of the image
        lines += [f"vt {u:.6f} {1.0 - v:.6f}" for u, v in mesh.uv]
        for f, t in zip(mesh.faces + 1, mesh.uv_faces + 1):
            lines.append(f"f {f[0]}/{t[0]} {f[1]}/{t[1]} {f[2]}/{t[2]}")
    else:
        lines += [f"f {f[0]} {f[1]} {f[2]}" for f in mesh.faces + 1]
    path.write_text("\n".join(lines) + "\n")
    mtl = ["newmtl material0", "Ka 1.0 1.0 1.0", "Kd 1.0 1.0 1.0", "Ks 0.0 0.0 0.0", "d 1.0", "illum 1"]
    if mesh.texture is not None:
        mtl.append(f"map_Kd {texture_name}")
        save_png(path.parent / texture_name, mesh.texture)
        written.append(path.parent / texture_name)
    mtl_path.write_text("\n".join(mtl) + "\n")
    return written


def read_obj(path) -> TexturedMesh:
    """Minimal reader for files produced by :func:`write_obj`."""
    path = Path(path)
    verts, colors, uv, faces, uv_faces = [], [], [], [], []
    texture = None
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
            if len(parts) >= 7:
                colors.append([float(x) for x in parts[4:7]])
        elif parts[0] == "vt":
            uv.append([float(parts[1]), 1.0 - float(parts[2])])
        elif parts[0] == "f":
            idx = [p.split("/") for p in parts[1:4]]
            faces.append([int(i[0]) - 1 for i in idx])
            if len(idx[0]) > 1 and idx[0][1]:
                uv_faces.append([int(i[1]) - 1 for i in idx])
        elif parts[0] == "mtllib":
            for mline in (path.parent / parts[1]).read_text().splitlines():
                if mline.startswith("map_Kd"):
                    img = Image.open(path.parent / mline.split(maxsplit=1)[1].strip()).convert("RGB")
                    texture = np.asarray(img, dtype=np.float64) / 255.0
    return TexturedMesh(
        np.array(verts),
        np.array(faces, dtype=np.int64),
        np.array(uv).reshape(-1, 2),
        np.array(uv_faces, dtype=np.int64).reshape(-1, 3),
        texture,
        np.array(colors) if colors else None,
    )


def with_texture(mesh: TexturedMesh, texture: np.ndarray) -> TexturedMesh:
    return replace(mesh, texture=texture)
