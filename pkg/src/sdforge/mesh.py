"""Triangle meshes: isosurface extraction, Loop subdivision, sampling, voxel occupancy, I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy import sparse

from .errors import FormatError, ParameterError
from .sdf import SdfGrid, sample_trilinear


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self) -> None:
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ParameterError("mesh has non-finite vertex coordinates")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ParameterError("face index out of range")
        if len(f) and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ParameterError("mesh has a degenerate triangle (repeated index)")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        for name in ("colors", "normals"):
            a = getattr(self, name)
            if a is not None:
                a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
                if len(a) != len(v):
                    raise ParameterError(f"{name} must have one row per vertex")
                object.__setattr__(self, name, a)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def replace(self, **kw) -> "TriMesh":
        d = {"vertices": self.vertices, "faces": self.faces, "colors": self.colors, "normals": self.normals}
        d.update(kw)
        return TriMesh(**d)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def empty_mesh() -> TriMesh:
    return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def face_areas(mesh: TriMesh) -> np.ndarray:
    v = mesh.vertices[mesh.faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def face_normals(mesh: TriMesh) -> np.ndarray:
    v = mesh.vertices[mesh.faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted vertex normals."""
    v = mesh.vertices[mesh.faces]
    fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    vn = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(vn, mesh.faces[:, k], fn)
    return vn / np.maximum(np.linalg.norm(vn, axis=1, keepdims=True), 1e-300)


def signed_volume(mesh: TriMesh) -> float:
    v = mesh.vertices[mesh.faces]
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def edges_with_faces(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unique undirected edges, the edge id of each face corner edge and per-edge face counts.

    Corner edge ``k`` of face ``f`` joins ``faces[f, k]`` and ``faces[f, (k+1) % 3]``.
    """
    e = np.stack([faces, np.roll(faces, -1, axis=1)], axis=-1).reshape(-1, 2)
    e = np.sort(e, axis=1)
    uniq, inv, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
    return uniq, inv.reshape(-1, 3), counts


def euler_characteristic(mesh: TriMesh) -> int:
    edges, _, _ = edges_with_faces(mesh.faces)
    used = np.unique(mesh.faces)
    return int(len(used) - len(edges) + len(mesh.faces))


def is_watertight(mesh: TriMesh) -> bool:
    if mesh.is_empty:
        return True
    _, _, counts = edges_with_faces(mesh.faces)
    return bool(np.all(counts == 2))


def weld(mesh: TriMesh, decimals: int = 12) -> TriMesh:
    """Merge coincident vertices and drop triangles that collapse."""
    if mesh.is_empty:
        return mesh
    key = np.round(mesh.vertices, decimals)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inv = inv.reshape(-1)
    # keep first-occurrence order so output is independent of hashing
    order = np.argsort(first, kind="stable")
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    faces = remap[inv[mesh.faces]]
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[keep]
    verts = mesh.vertices[first[order]]
    cols = None if mesh.colors is None else mesh.colors[first[order]]
    nrm = None if mesh.normals is None else mesh.normals[first[order]]
    return compact(TriMesh(verts, faces, cols, nrm))


def compact(mesh: TriMesh) -> TriMesh:
    """Drop vertices no face references."""
    used = np.unique(mesh.faces)
    if len(used) == len(mesh.vertices):
        return mesh
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    pick = lambda a: None if a is None else a[used]  # noqa: E731
    return TriMesh(mesh.vertices[used], remap[mesh.faces], pick(mesh.colors), pick(mesh.normals))


# --------------------------------------------------------------------------
# isosurface extraction
# --------------------------------------------------------------------------

def marching_cubes(grid: SdfGrid, level: float = 0.0, close_borders: bool = False) -> TriMesh:
    """Extract the ``level`` isosurface; triangles wind counter-clockwise seen from outside.

    Uses scikit-image's Lewiner marching cubes.  Vertices are indexed per
    lattice edge and never merged by position: where the field meets ``level``
    at a node, triangles may have zero area, but the mesh stays manifold.  With ``close_borders`` the field is
    padded by one outside voxel, so a surface cut by the grid boundary is
    capped there and the mesh stays closed.  Returns an empty mesh when the
    field does not cross ``level``.
    """
    from skimage import measure

    v = grid.values
    if not (v.min() < level < v.max()):
        return empty_mesh()
    origin = np.asarray(grid.origin, dtype=np.float64)
    if close_borders:
        v = np.pad(v, 1, mode="constant", constant_values=max(float(v.max()), level + grid.spacing))
        origin = origin - grid.spacing
    verts, faces, _, _ = measure.marching_cubes(v, level=level, allow_degenerate=True)
    verts = _refine_edge_vertices(v, verts.astype(np.float64), level)
    return compact(TriMesh(verts * grid.spacing + origin, faces.astype(np.int64)))


def _refine_edge_vertices(v: np.ndarray, u: np.ndarray, level: float) -> np.ndarray:
    """Redo the edge interpolation in double precision (the extractor works in float32).

    Every vertex lies on a lattice edge: two index coordinates are integers
    and the third is interpolated between the edge's end nodes.
    """
    r = np.rint(u)
    off = np.abs(u - r) > 1e-4
    out = np.where(off, u, r)
    for a in range(3):
        sel = off[:, a]
        if not sel.any():
            continue
        lo_idx = np.rint(out[sel]).astype(np.int64)
        lo_idx[:, a] = np.minimum(np.floor(u[sel, a]).astype(np.int64), v.shape[a] - 2)
        hi_idx = lo_idx.copy()
        hi_idx[:, a] += 1
        f0 = v[lo_idx[:, 0], lo_idx[:, 1], lo_idx[:, 2]]
        f1 = v[hi_idx[:, 0], hi_idx[:, 1], hi_idx[:, 2]]
        den = f1 - f0
        ok = den != 0
        t = np.where(ok, (level - f0) / np.where(ok, den, 1.0), u[sel, a] - lo_idx[:, a])
        out[sel, a] = lo_idx[:, a] + np.clip(t, 0.0, 1.0)
    return out


# --------------------------------------------------------------------------
# Loop subdivision
# --------------------------------------------------------------------------

def _loop_matrix(mesh: TriMesh):
    faces = mesh.faces
    nv = len(mesh.vertices)
    edges, corner_edge, counts = edges_with_faces(faces)
    bad = np.nonzero(counts > 2)[0]
    if len(bad):
        a, b = edges[bad[0]]
        raise ParameterError(f"non-manifold edge ({a}, {b}) shared by {counts[bad[0]]} faces")
    ne = len(edges)
    boundary_edge = counts == 1

    rows, cols, vals = [], [], []

    # odd (edge) vertices
    opp = np.full((ne, 2), -1, dtype=np.int64)
    slot = np.zeros(ne, dtype=np.int64)
    for k in range(3):
        eid = corner_edge[:, k]
        third = faces[:, (k + 2) % 3]
        # deterministic fill: faces in index order
        for f_idx in range(len(faces)):
            e = eid[f_idx]
            opp[e, slot[e]] = third[f_idx]
            slot[e] += 1
    er = nv + np.arange(ne)
    inner = ~boundary_edge
    for end in (0, 1):
        rows.append(er)
        cols.append(edges[:, end])
        vals.append(np.where(inner, 3.0 / 8.0, 0.5))
    for s in (0, 1):
        rows.append(er[inner])
        cols.append(opp[inner, s])
        vals.append(np.full(inner.sum(), 1.0 / 8.0))

    # even (original) vertices
    boundary_vertex = np.zeros(nv, dtype=bool)
    boundary_vertex[edges[boundary_edge].ravel()] = True
    nbr_count = np.bincount(edges.ravel(), minlength=nv).astype(np.float64)
    n = np.maximum(nbr_count, 1.0)
    beta = (5.0 / 8.0 - (3.0 / 8.0 + 0.25 * np.cos(2.0 * np.pi / n)) ** 2) / n
    interior_v = ~boundary_vertex
    vi = np.arange(nv)
    rows.append(vi)
    cols.append(vi)
    vals.append(np.where(interior_v, 1.0 - n * beta, 0.75))
    # interior neighbours
    a, b = edges[:, 0], edges[:, 1]
    for src, dst in ((a, b), (b, a)):
        m = interior_v[src]
        rows.append(src[m])
        cols.append(dst[m])
        vals.append(beta[src[m]])
    # boundary neighbours along boundary edges only
    ba, bb = edges[boundary_edge, 0], edges[boundary_edge, 1]
    for src, dst in ((ba, bb), (bb, ba)):
        rows.append(src)
        cols.append(dst)
        vals.append(np.full(len(src), 1.0 / 8.0))

    s = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nv + ne, nv)
    ).tocsr()
    m0 = nv + corner_edge[:, 0]
    m1 = nv + corner_edge[:, 1]
    m2 = nv + corner_edge[:, 2]
    f0, f1, f2 = faces[:, 0], faces[:, 1], faces[:, 2]
    new_faces = np.concatenate([
        np.stack([f0, m0, m2], 1),
        np.stack([f1, m1, m0], 1),
        np.stack([f2, m2, m1], 1),
        np.stack([m0, m1, m2], 1),
    ])
    return s, new_faces


def loop_subdivide(mesh: TriMesh, rounds: int = 1) -> TriMesh:
    """Loop subdivision; colours and normals follow the same stencils (normals renormalized)."""
    if rounds < 0:
        raise ParameterError("rounds must be >= 0")
    for _ in range(rounds):
        if mesh.is_empty:
            return mesh
        s, faces = _loop_matrix(mesh)
        verts = s @ mesh.vertices
        cols = None if mesh.colors is None else np.clip(s @ mesh.colors, 0.0, 1.0)
        nrm = None
        if mesh.normals is not None:
            nrm = s @ mesh.normals
            nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-300)
        mesh = TriMesh(verts, faces, cols, nrm)
    return mesh


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def sample_surface(mesh: TriMesh, count: int, seed: int = 0, return_faces: bool = False):
    """Area-weighted uniform surface samples."""
    if mesh.is_empty:
        raise ParameterError("cannot sample an empty mesh")
    if count < 1:
        raise ParameterError("count must be >= 1")
    rng = np.random.default_rng(seed)
    areas = face_areas(mesh)
    total = areas.sum()
    if not total > 0:
        raise ParameterError("mesh has zero surface area")
    fid = rng.choice(len(areas), size=count, p=areas / total)
    r1 = np.sqrt(rng.uniform(size=count))
    r2 = rng.uniform(size=count)
    w = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    pts = np.einsum("pk,pkd->pd", w, mesh.vertices[mesh.faces[fid]])
    return (pts, fid) if return_faces else pts


# --------------------------------------------------------------------------
# occupancy
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Lattice:
    """``res``^3 cells tiling the box ``[lo, hi]``; occupancy is tested at cell centres."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    res: int

    def axes(self) -> list[np.ndarray]:
        return [self.lo[a] + (np.arange(self.res) + 0.5) * (self.hi[a] - self.lo[a]) / self.res for a in range(3)]

    def centers(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    @property
    def cell_volume(self) -> float:
        return float(np.prod((np.asarray(self.hi) - np.asarray(self.lo)) / self.res))


def padded_lattice(lo, hi, res: int, pad: float = 0.05) -> Lattice:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    margin = pad * (hi - lo) + 1e-9
    return Lattice(tuple(lo - margin), tuple(hi + margin), int(res))


def shape_bounds(obj, level: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Bounding box of a mesh, or of the voxels of a grid whose value is below ``level``."""
    if isinstance(obj, SdfGrid):
        inside = np.argwhere(obj.values < level)
        if len(inside) == 0:
            return np.asarray(obj.origin), np.asarray(obj.origin)
        o = np.asarray(obj.origin)
        return o + obj.spacing * (inside.min(0) - 1), o + obj.spacing * (inside.max(0) + 1)
    if obj.is_empty:
        return np.zeros(3), np.zeros(3)
    return obj.bounds()


JITTER = (1.234567e-7, 7.654321e-8)


@numba.njit(cache=True)
def _parity_fill(verts, faces, y0, z0, dy, dz, ny, nz, x0, dx, nx, occ, jy, jz):
    counts = np.zeros((ny, nz), dtype=np.int64)
    # pass 1: count crossings per (y, z) column; pass 2: store them
    for sweep in range(2):
        if sweep == 1:
            total = 0
            start = np.zeros((ny, nz), dtype=np.int64)
            for j in range(ny):
                for k in range(nz):
                    start[j, k] = total
                    total += counts[j, k]
            xs = np.empty(total)
            fill = start.copy()
        for f in range(faces.shape[0]):
            a = verts[faces[f, 0]]
            b = verts[faces[f, 1]]
            c = verts[faces[f, 2]]
            ymin = min(a[1], b[1], c[1])
            ymax = max(a[1], b[1], c[1])
            zmin = min(a[2], b[2], c[2])
            zmax = max(a[2], b[2], c[2])
            j0 = max(int(np.ceil((ymin - y0 - jy) / dy - 0.5)), 0)
            j1 = min(int(np.floor((ymax - y0 - jy) / dy - 0.5)), ny - 1)
            k0 = max(int(np.ceil((zmin - z0 - jz) / dz - 0.5)), 0)
            k1 = min(int(np.floor((zmax - z0 - jz) / dz - 0.5)), nz - 1)
            area = (b[1] - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (b[2] - a[2])
            if area == 0.0:
                continue
            for j in range(j0, j1 + 1):
                py = y0 + (j + 0.5) * dy + jy
                for k in range(k0, k1 + 1):
                    pz = z0 + (k + 0.5) * dz + jz
                    l0 = ((b[1] - py) * (c[2] - pz) - (c[1] - py) * (b[2] - pz)) / area
                    l1 = ((c[1] - py) * (a[2] - pz) - (a[1] - py) * (c[2] - pz)) / area
                    l2 = 1.0 - l0 - l1
                    if l0 < 0.0 or l1 < 0.0 or l2 < 0.0:
                        continue
                    if sweep == 0:
                        counts[j, k] += 1
                    else:
                        xs[fill[j, k]] = l0 * a[0] + l1 * b[0] + l2 * c[0]
                        fill[j, k] += 1
    odd = 0
    for j in range(ny):
        for k in range(nz):
            n = counts[j, k]
            if n == 0:
                continue
            if n % 2 == 1:
                odd += 1
                continue
            col = np.sort(xs[start[j, k]:start[j, k] + n])
            for p in range(0, n, 2):
                ia = max(int(np.ceil((col[p] - x0) / dx - 0.5)), 0)
                ib = min(int(np.floor((col[p + 1] - x0) / dx - 0.5)), nx - 1)
                for i in range(ia, ib + 1):
                    occ[i, j, k] = not occ[i, j, k]
    return odd


def occupancy(obj, resolution: int = 128, lattice: Lattice | None = None, level: float = 0.0) -> np.ndarray:
    """Boolean ``res``^3 inside/outside field.

    Grids are sampled trilinearly at the lattice cell centres (inside when the
    value is below ``level``).  Meshes must be watertight and use parity ray
    casting along +x; the column rays are shifted by the fixed sub-cell offsets
    ``JITTER`` so they never pass exactly through mesh edges or vertices.
    """
    if lattice is None:
        lo, hi = shape_bounds(obj, level)
        if isinstance(obj, SdfGrid):
            h = obj.spacing
            lo = np.asarray(obj.origin) - 0.5 * h
            hi = obj.upper + 0.5 * h
            lattice = Lattice(tuple(lo), tuple(hi), resolution)
        else:
            lattice = padded_lattice(lo, hi, resolution)
    res = lattice.res
    if isinstance(obj, SdfGrid):
        return sample_trilinear(obj, lattice.centers()) < level
    occ = np.zeros((res, res, res), dtype=np.bool_)
    if obj.is_empty:
        return occ
    if not is_watertight(obj):
        raise ParameterError("mesh is not watertight; parity occupancy is undefined")
    d = (np.asarray(lattice.hi) - np.asarray(lattice.lo)) / res
    odd = _parity_fill(obj.vertices, obj.faces, lattice.lo[1], lattice.lo[2], d[1], d[2], res, res,
                       lattice.lo[0], d[0], res, occ, JITTER[0] * d[1], JITTER[1] * d[2])
    if odd:
        raise ParameterError(f"{odd} ray columns crossed the mesh an odd number of times")
    return occ


# --------------------------------------------------------------------------
# primitives used by tests and fixtures
# --------------------------------------------------------------------------

def box_mesh(lo, hi) -> TriMesh:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    v = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=np.float64)
    v = lo + v * (hi - lo)
    f = np.array([
        [0, 2, 1], [1, 2, 3],  # z = lo
        [4, 5, 6], [5, 7, 6],  # z = hi
        [0, 1, 4], [1, 5, 4],  # y = lo
        [2, 6, 3], [3, 6, 7],  # y = hi
        [0, 4, 2], [2, 4, 6],  # x = lo
        [1, 3, 5], [3, 7, 5],  # x = hi
    ])
    return TriMesh(v, f)


def icosahedron(radius: float = 1.0) -> TriMesh:
    t = (1.0 + 5.0 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    v *= radius / np.linalg.norm(v[0])
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return TriMesh(v, f)


def icosphere(radius: float = 1.0, rounds: int = 3, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Loop-subdivided icosahedron projected back onto the sphere."""
    m = icosahedron(1.0)
    for _ in range(rounds):
        m = loop_subdivide(m, 1)
        m = m.replace(vertices=m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True))
    return m.replace(vertices=m.vertices * radius + np.asarray(center, dtype=np.float64))


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------

def write_obj(mesh: TriMesh, path) -> None:
    lines = ["# sdforge mesh"]
    lines += ["v %.9g %.9g %.9g" % tuple(p) for p in mesh.vertices]
    if mesh.normals is not None:
        lines += ["vn %.9g %.9g %.9g" % tuple(n) for n in mesh.normals]
        lines += ["f %d//%d %d//%d %d//%d" % (a + 1, a + 1, b + 1, b + 1, c + 1, c + 1) for a, b, c in mesh.faces]
    else:
        lines += ["f %d %d %d" % (a + 1, b + 1, c + 1) for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriMesh:
    try:
        return _parse_obj(Path(path).read_text())
    except (ValueError, IndexError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: malformed OBJ ({exc})") from exc


def _parse_obj(text: str) -> TriMesh:
    verts, normals, faces = [], [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vn":
            normals.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    nrm = np.asarray(normals) if normals and len(normals) == len(verts) else None
    return TriMesh(np.asarray(verts).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3), None, nrm)


def write_ply(mesh: TriMesh, path) -> None:
    """Binary little-endian PLY with float32 positions/normals and uchar colours."""
    nv, nf = len(mesh.vertices), len(mesh.faces)
    head = ["ply", "format binary_little_endian 1.0", "comment sdforge", f"element vertex {nv}",
            "property float x", "property float y", "property float z"]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if mesh.normals is not None:
        head += ["property float nx", "property float ny", "property float nz"]
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if mesh.colors is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    head += [f"element face {nf}", "property list uchar int vertex_indices", "end_header"]
    rec = np.zeros(nv, dtype=fields)
    for a, name in enumerate("xyz"):
        rec[name] = mesh.vertices[:, a]
    if mesh.normals is not None:
        for a, name in enumerate(("nx", "ny", "nz")):
            rec[name] = mesh.normals[:, a]
    if mesh.colors is not None:
        c = np.clip(np.rint(mesh.colors * 255.0), 0, 255).astype(np.uint8)
        for a, name in enumerate(("red", "green", "blue")):
            rec[name] = c[:, a]
    frec = np.zeros(nf, dtype=[("n", "u1"), ("i", "<i4", (3,))])
    frec["n"] = 3
    frec["i"] = mesh.faces
    Path(path).write_bytes(("\n".join(head) + "\n").encode("ascii") + rec.tobytes() + frec.tobytes())


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "uchar": "u1", "uint8": "u1",
              "int": "<i4", "int32": "<i4", "uint": "<u4", "short": "<i2", "ushort": "<u2", "char": "i1"}


def read_ply(path) -> TriMesh:
    """Reader for binary little-endian PLY files with triangle faces."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    try:
        return _parse_ply(data, end + len(b"end_header\n"), path)
    except (ValueError, KeyError, IndexError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: malformed PLY ({exc})") from exc


def _parse_ply(data: bytes, end: int, path) -> TriMesh:
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise FormatError(f"{path}: only binary little-endian PLY is supported")
    elements, cur = [], None
    for line in header:
        parts = line.split()
        if parts[0] == "element":
            cur = [parts[1], int(parts[2]), []]
            elements.append(cur)
        elif parts[0] == "property" and cur is not None:
            if parts[1] == "list":
                cur[2].append((parts[4], "list", parts[2], parts[3]))
            else:
                cur[2].append((parts[2], _PLY_TYPES[parts[1]]))
    off = end
    verts = faces = cols = nrm = None
    for name, count, props in elements:
        if name == "vertex":
            dt = np.dtype([(p[0], p[1]) for p in props])
            rec = np.frombuffer(data, dtype=dt, count=count, offset=off)
            off += dt.itemsize * count
            verts = np.stack([rec["x"], rec["y"], rec["z"]], 1).astype(np.float64)
            if "nx" in rec.dtype.names:
                nrm = np.stack([rec["nx"], rec["ny"], rec["nz"]], 1).astype(np.float64)
            if "red" in rec.dtype.names:
                cols = np.stack([rec["red"], rec["green"], rec["blue"]], 1).astype(np.float64) / 255.0
        elif name == "face":
            _, _, ctype, itype = props[0]
            dt = np.dtype([("n", _PLY_TYPES[ctype]), ("i", _PLY_TYPES[itype], (3,))])
            rec = np.frombuffer(data, dtype=dt, count=count, offset=off)
            if count and np.any(rec["n"] != 3):
                raise FormatError(f"{path}: only triangle faces are supported")
            off += dt.itemsize * count
            faces = rec["i"].astype(np.int64)
    return TriMesh(verts, faces if faces is not None else np.zeros((0, 3), dtype=np.int64), cols, nrm)


def read_mesh(path) -> TriMesh:
    p = Path(path)
    if p.suffix.lower() == ".ply":
        return read_ply(p)
    if p.suffix.lower() == ".obj":
        return read_obj(p)
    raise ParameterError(f"unsupported mesh format: {p.suffix}")


def write_mesh(mesh: TriMesh, path) -> None:
    p = Path(path)
    if p.suffix.lower() == ".ply":
        write_ply(mesh, p)
    elif p.suffix.lower() == ".obj":
        write_obj(mesh, p)
    else:
        raise ParameterError(f"unsupported mesh format: {p.suffix}")

