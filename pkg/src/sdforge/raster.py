"""Deterministic z-buffer rasterizer for triangle meshes.

Triangles are processed in index order with a strict depth test, so ties go
to the lower triangle index.  Coverage is tested at pixel centres; attributes
use perspective-correct barycentric interpolation.  Any triangle with a
vertex at or behind the near plane is dropped whole (no clipping).
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .camera import NEAR, View


@numba.njit(cache=True)
def _zbuffer(cam_verts, faces, width, height, focal, near, zbuf, tri_id, bary):
    cx = 0.5 * width
    cy = 0.5 * height
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        z0, z1, z2 = cam_verts[i0, 2], cam_verts[i1, 2], cam_verts[i2, 2]
        if z0 <= near or z1 <= near or z2 <= near:
            continue
        x0 = cx + focal * cam_verts[i0, 0] / z0
        y0 = cy + focal * cam_verts[i0, 1] / z0
        x1 = cx + focal * cam_verts[i1, 0] / z1
        y1 = cy + focal * cam_verts[i1, 1] / z1
        x2 = cx + focal * cam_verts[i2, 0] / z2
        y2 = cy + focal * cam_verts[i2, 1] / z2
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        c0 = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        c1 = min(int(np.ceil(max(x0, x1, x2) - 0.5)), width - 1)
        r0 = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        r1 = min(int(np.ceil(max(y0, y1, y2) - 0.5)), height - 1)
        for r in range(r0, r1 + 1):
            py = r + 0.5
            for c in range(c0, c1 + 1):
                px = c + 0.5
                l0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                l1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                l2 = 1.0 - l0 - l1
                if l0 < 0.0 or l1 < 0.0 or l2 < 0.0:
                    continue
                q0 = l0 / z0
                q1 = l1 / z1
                q2 = l2 / z2
                qs = q0 + q1 + q2
                z = 1.0 / qs
                if z < zbuf[r, c]:
                    zbuf[r, c] = z
                    tri_id[r, c] = f
                    bary[r, c, 0] = q0 / qs
                    bary[r, c, 1] = q1 / qs
                    bary[r, c, 2] = q2 / qs


@dataclass
class Raster:
    """Per-pixel rasterization result; background pixels have ``tri_id == -1``."""

    mask: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    position: np.ndarray
    tri_id: np.ndarray
    bary: np.ndarray
    color: np.ndarray | None = None


def rasterize_mesh(mesh, view: View, smooth_normals: bool = False, want_color: bool = True) -> Raster:
    """Render mask, camera depth, world normal, world position and colour images.

    Normals are geometric face normals (or interpolated vertex normals when
    ``smooth_normals`` and the mesh carries them), flipped to face the camera.
    Background depth is 0 and background normals/colours are zero.
    """
    h, w = view.height, view.width
    zbuf = np.full((h, w), np.inf)
    tri_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    faces = np.asarray(mesh.faces, dtype=np.int64)
    if len(faces):
        _zbuffer(view.to_camera(verts), faces, w, h, view.focal, NEAR, zbuf, tri_id, bary)
    hit = tri_id >= 0
    mask = hit.astype(np.float64)
    depth = np.where(hit, zbuf, 0.0)
    normal = np.zeros((h, w, 3))
    position = np.zeros((h, w, 3))
    color = None
    if hit.any():
        tri = faces[tri_id[hit]]
        b = bary[hit]
        pos = np.einsum("pk,pkd->pd", b, verts[tri])
        position[hit] = pos
        if smooth_normals and mesh.normals is not None:
            n = np.einsum("pk,pkd->pd", b, np.asarray(mesh.normals)[tri])
        else:
            e1 = verts[tri[:, 1]] - verts[tri[:, 0]]
            e2 = verts[tri[:, 2]] - verts[tri[:, 0]]
            n = np.cross(e1, e2)
        n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-300)
        to_cam = view.position - pos
        flip = np.einsum("pd,pd->p", n, to_cam) < 0
        n[flip] *= -1.0
        normal[hit] = n
        if want_color and mesh.colors is not None:
            color = np.zeros((h, w, 3))
            color[hit] = np.einsum("pk,pkd->pd", b, np.asarray(mesh.colors)[tri])
    elif want_color and mesh.colors is not None:
        color = np.zeros((h, w, 3))
    return Raster(mask, depth, normal, position, tri_id, bary, color)


def render_views(mesh, views, smooth_normals: bool = False):
    """Rasterize ``mesh`` into every view, returning :class:`ViewImages` records."""
    from .camera import ViewImages

    out = []
    for v in views:
        r = rasterize_mesh(mesh, v, smooth_normals=smooth_normals)
        out.append(ViewImages(v, r.mask, r.normal, r.depth, r.color))
    return out
