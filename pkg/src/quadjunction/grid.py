"""Voxel occupancy grids and file export (legacy VTK, Wavefront OBJ)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .domain import Domain
from .errors import ResolutionTooCoarse, ValidationError

logger = logging.getLogger(__name__)

OUTSIDE = 0


@dataclass
class OccupancyGrid:
    """Cubic voxel grid; ``label[i, j, k]`` is OUTSIDE or a region 1..4 for
    the voxel centred at ``origin + (idx + 0.5) * h``."""

    origin: np.ndarray
    spacing: float
    label: np.ndarray

    @property
    def dims(self):
        return self.label.shape

    @property
    def h(self):
        return self.spacing

    @property
    def inside(self):
        return self.label != OUTSIDE

    def axis(self, k):
        return self.origin[k] + (np.arange(self.dims[k]) + 0.5) * self.spacing

    def centers(self, mask=None):
        x, y, z = np.meshgrid(self.axis(0), self.axis(1), self.axis(2), indexing="ij")
        pts = np.stack([x, y, z], axis=-1)
        return pts.reshape(-1, 3) if mask is None else pts[mask]

    def with_labels(self, label) -> "OccupancyGrid":
        return OccupancyGrid(self.origin.copy(), self.spacing, np.asarray(label, dtype=np.int8))


def grid_geometry(dims, radius):
    """Origin and spacing of a cube grid covering the ball of given radius
    with two voxels of padding on every side."""
    dims = tuple(int(d) for d in np.broadcast_to(dims, 3))
    n = min(dims)
    if n < 32:
        raise ValidationError(f"dims must be at least 32 per axis, got {dims}")
    half = radius * n / (n - 4.0)
    h = 2.0 * half / n
    origin = -0.5 * h * np.array(dims, dtype=float)
    return dims, origin, h


def voxelize(domain: Domain, dims, chunk=300_000) -> OccupancyGrid:
    spec = domain.spec
    dims, origin, h = grid_geometry(dims, spec.outer_radius)
    if h > spec.r_star / 4:
        raise ResolutionTooCoarse(
            f"spacing h={h:.4g} exceeds r_star/4={spec.r_star / 4:.4g}; increase dims"
        )
    grid = OccupancyGrid(origin, h, np.zeros(dims, dtype=np.int8))
    pts = grid.centers()
    # only points inside the outer ball can be inside
    cand = np.flatnonzero(np.linalg.norm(pts, axis=1) < spec.outer_radius)
    flat = grid.label.reshape(-1)
    for s in range(0, len(cand), chunk):
        idx = cand[s : s + chunk]
        p = pts[idx]
        ins = domain.inside(p)
        flat[idx[ins]] = domain.cone.region_of(p[ins])
    logger.info("voxelized %s grid, h=%.4g, %d inside voxels", dims, h, int(grid.inside.sum()))
    return grid


def cone_partition(grid: OccupancyGrid, cone) -> OccupancyGrid:
    """Relabel the inside voxels by region_of (the cone partition)."""
    lab = grid.label.copy()
    m = grid.inside
    lab[m] = cone.region_of(grid.centers(m))
    return grid.with_labels(lab)


def ball_partition(dims, cone, radius=1.0) -> OccupancyGrid:
    """Cone partition of the plain ball (no troughs or valleys)."""
    dims, origin, h = grid_geometry(dims, radius)
    grid = OccupancyGrid(origin, h, np.zeros(dims, dtype=np.int8))
    pts = grid.centers()
    m = np.linalg.norm(pts, axis=1) < radius
    lab = grid.label.reshape(-1)
    lab[m] = cone.region_of(pts[m])
    return grid


def surface_consistency(grid: OccupancyGrid, domain: Domain, n=121) -> dict:
    """Compare grid inside/outside status against the exact patches.

    Voxel centres within h of an exact patch are classified by the side of
    the nearest patch sample's tangent plane. Samples on patch borders are
    dropped so voxels whose nearest surface point lies off the exact patches
    do not enter the statistic.
    """
    pts_all, nrm_all = [], []
    for patch in domain.patches:
        nu, nv = (n, 4 * n) if patch.kind == "valley" else (n, max(n // 2, 9))
        p, q, _, _ = patch.sample(nu, nv)
        if patch.kind == "valley":
            p, q = p[:-1], q[:-1]  # drop the rim circle
        else:
            p, q = p[1:-1, 1:-1], q[1:-1, 1:-1]
        pts_all.append(p.reshape(-1, 3))
        nrm_all.append(q.reshape(-1, 3))
    sp = np.vstack(pts_all)
    sn = np.vstack(nrm_all)
    tree = cKDTree(sp)
    centres = grid.centers()
    dist, idx = tree.query(centres, distance_upper_bound=grid.h)
    near = np.isfinite(dist)
    c = centres[near]
    side = np.sum((c - sp[idx[near]]) * sn[idx[near]], axis=1)
    # only voxels clearly off the surface (beyond the sampling resolution)
    spacing = 2 * domain.spec.r_star / n
    clear = np.abs(side) > spacing
    exact_inside = side < 0
    grid_inside = grid.inside.reshape(-1)[near]
    mismatch = (exact_inside != grid_inside) & clear
    total = int(clear.sum())
    return {
        "voxels": total,
        "mismatched": int(mismatch.sum()),
        "fraction": float(mismatch.sum() / max(total, 1)),
    }


# --------------------------------------------------------------------------
# export


def write_vtk_labels(path, grid: OccupancyGrid, name="label"):
    nx, ny, nz = grid.dims
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("occupancy grid\nASCII\nDATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {nx + 1} {ny + 1} {nz + 1}\n")
        fh.write("ORIGIN {:.17g} {:.17g} {:.17g}\n".format(*grid.origin))
        fh.write("SPACING {0:.17g} {0:.17g} {0:.17g}\n".format(grid.spacing))
        fh.write(f"CELL_DATA {nx * ny * nz}\n")
        fh.write(f"SCALARS {name} int 1\nLOOKUP_TABLE default\n")
        # VTK orders cells with x fastest
        _write_rows(fh, grid.label.transpose(2, 1, 0).reshape(-1), "{:d}")


def write_vtk_field(path, grid: OccupancyGrid, u, name="u"):
    """``u`` has shape dims + (3,); outside voxels are written as zeros."""
    nx, ny, nz = grid.dims
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("phase field\nASCII\nDATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {nx + 1} {ny + 1} {nz + 1}\n")
        fh.write("ORIGIN {:.17g} {:.17g} {:.17g}\n".format(*grid.origin))
        fh.write("SPACING {0:.17g} {0:.17g} {0:.17g}\n".format(grid.spacing))
        fh.write(f"CELL_DATA {nx * ny * nz}\n")
        fh.write(f"SCALARS {name} double 3\nLOOKUP_TABLE default\n")
        vals = np.asarray(u, float).transpose(2, 1, 0, 3).reshape(-1, 3)
        np.savetxt(fh, vals, fmt="%.10g")
        fh.write("SCALARS label int 1\nLOOKUP_TABLE default\n")
        _write_rows(fh, grid.label.transpose(2, 1, 0).reshape(-1), "{:d}")


def _write_rows(fh, values, fmt, per_line=20):
    for s in range(0, len(values), per_line):
        fh.write(" ".join(fmt.format(int(v)) for v in values[s : s + per_line]) + "\n")


def read_vtk_labels(path) -> OccupancyGrid:
    with open(path) as fh:
        lines = fh.read().split("\n")
    header = {}
    body_start = None
    for k, line in enumerate(lines):
        parts = line.split()
        if not parts:
            continue
        if parts[0] in ("DIMENSIONS", "ORIGIN", "SPACING"):
            header[parts[0]] = [float(v) for v in parts[1:]]
        if parts[0] == "LOOKUP_TABLE":
            body_start = k + 1
            break
    dims = tuple(int(d) - 1 for d in header["DIMENSIONS"])
    count = dims[0] * dims[1] * dims[2]
    vals = np.array(" ".join(lines[body_start:]).split()[:count], dtype=np.int8)
    label = vals.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
    return OccupancyGrid(np.array(header["ORIGIN"]), header["SPACING"][0], label.copy())


def write_obj(path, groups):
    """``groups`` is an iterable of (name, vertices, normals, faces) with
    0-based triangle indices."""
    offset = 1
    with open(path, "w") as fh:
        for name, verts, normals, faces in groups:
            fh.write(f"g {name}\n")
            for v in verts:
                fh.write("v {:.10g} {:.10g} {:.10g}\n".format(*v))
            for v in normals:
                fh.write("vn {:.10g} {:.10g} {:.10g}\n".format(*v))
            for f in np.asarray(faces) + offset:
                fh.write("f {0}//{0} {1}//{1} {2}//{2}\n".format(*f))
            offset += len(verts)


def patch_mesh(patch, nu=24, nv=12):
    p, q, _, _ = patch.sample(nu, nv)
    verts = p.reshape(-1, 3)
    normals = q.reshape(-1, 3)
    idx = np.arange(nu * nv).reshape(nu, nv)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    # orient faces so their geometric normal agrees with the outward normal
    tri = verts[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.sum(fn * normals[faces].mean(axis=1), axis=1) < 0
    faces[flip] = faces[flip][:, ::-1]
    return verts, normals, faces


def boundary_mesh(domain: Domain, grid: OccupancyGrid):
    """Marching-cubes mesh of the implicit boundary on the grid's lattice,
    with outward normals (the field decreases outward)."""
    vals = np.full(grid.dims, -1.0)
    pts = grid.centers()
    cand = np.linalg.norm(pts, axis=1) < domain.bounding_radius + 2 * grid.h
    flat = vals.reshape(-1)
    idx = np.flatnonzero(cand)
    for s in range(0, len(idx), 300_000):
        sl = idx[s : s + 300_000]
        flat[sl] = domain.field(pts[sl])
    # "ascent" winds the faces so their normals point toward decreasing field
    verts, faces, _, _ = measure.marching_cubes(vals, 0.0, spacing=(grid.h,) * 3, gradient_direction="ascent")
    verts = verts + grid.origin + 0.5 * grid.h
    tri = verts[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    vn = np.zeros_like(verts)
    for k in range(3):
        np.add.at(vn, faces[:, k], fn)
    vn /= np.maximum(np.linalg.norm(vn, axis=1, keepdims=True), 1e-300)
    return verts, vn, faces


def export_surface(path, domain: Domain, grid: OccupancyGrid | None = None):
    groups = [(p.name, *patch_mesh(p)) for p in domain.patches]
    if grid is not None:
        groups.append(("boundary", *boundary_mesh(domain, grid)))
    write_obj(path, groups)
