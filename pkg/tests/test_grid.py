import numpy as np
import pytest

from quadjunction.cone import region_of
from quadjunction.domain import Domain, DomainSpec
from quadjunction.errors import ResolutionTooCoarse, ValidationError
from quadjunction.grid import (
    OUTSIDE,
    OccupancyGrid,
    ball_partition,
    boundary_mesh,
    cone_partition,
    export_surface,
    grid_geometry,
    read_vtk_labels,
    surface_consistency,
    voxelize,
    write_vtk_field,
    write_vtk_labels,
)


def test_grid_geometry_covers_ball():
    dims, origin, h = grid_geometry(64, 1.25)
    assert dims == (64, 64, 64)
    assert np.all(origin <= -1.25 - 2 * h + 1e-12)
    with pytest.raises(ValidationError):
        grid_geometry(31, 1.0)


def test_resolution_too_coarse(sym_cone):
    dom = Domain(DomainSpec(sym_cone, r_star=0.05))
    with pytest.raises(ResolutionTooCoarse):
        voxelize(dom, 32)


def test_labels_match_occupancy(grid64, domain):
    c = grid64.centers()
    lab = grid64.label.reshape(-1)
    ins = lab != OUTSIDE
    field = domain.field(c[np.linalg.norm(c, axis=1) < 1.3])
    assert np.array_equal(field > 0, ins[np.linalg.norm(c, axis=1) < 1.3])
    assert np.array_equal(lab[ins], region_of(domain.cone, c[ins]))


def test_outside_bounding_sphere(grid64, spec):
    c = grid64.centers()
    far = np.linalg.norm(c, axis=1) > spec.outer_radius + grid64.h
    assert np.all(grid64.label.reshape(-1)[far] == OUTSIDE)


def test_volume_monte_carlo(grid64, domain, spec):
    rng = np.random.default_rng(7)
    n = 2_000_000
    R = spec.outer_radius
    # uniform in the bounding ball by rejection from the cube
    pts = rng.uniform(-R, R, size=(int(n * 6 / np.pi) + 1000, 3))
    pts = pts[np.linalg.norm(pts, axis=1) < R][:n]
    frac = domain.inside(pts).mean()
    vol_mc = 4 / 3 * np.pi * R**3 * frac
    vol_grid = grid64.inside.sum() * grid64.h**3
    assert abs(vol_grid / vol_mc - 1) < 0.05


def test_surface_consistency(grid64, grid128, domain):
    for g in (grid64, grid128):
        rep = surface_consistency(g, domain)
        assert rep["voxels"] > 1000
        assert rep["fraction"] < 0.01


def test_cone_partition_relabels(grid64, sym_cone):
    part = cone_partition(grid64, sym_cone)
    assert np.array_equal(part.inside, grid64.inside)
    assert set(np.unique(part.label)) == {0, 1, 2, 3, 4}


def test_ball_partition(sym_cone):
    g = ball_partition(48, sym_cone)
    vol = g.inside.sum() * g.h**3
    assert vol == pytest.approx(4 / 3 * np.pi, rel=0.02)
    counts = [np.sum(g.label == k) for k in range(1, 5)]
    assert max(counts) / min(counts) < 1.05


def test_vtk_roundtrip(tmp_path, grid64):
    p = tmp_path / "g.vtk"
    write_vtk_labels(p, grid64)
    back = read_vtk_labels(p)
    assert np.array_equal(back.label, grid64.label)
    assert back.h == grid64.h
    assert np.array_equal(back.origin, grid64.origin)


def test_vtk_field_layout(tmp_path):
    lab = np.zeros((3, 4, 5), np.int8)
    lab[1, 2, 3] = 2
    g = OccupancyGrid(np.zeros(3), 0.5, lab)
    u = np.zeros((3, 4, 5, 3))
    u[1, 2, 3] = [1.5, -2, 3]
    p = tmp_path / "f.vtk"
    write_vtk_field(p, g, u)
    text = p.read_text().splitlines()
    k = text.index("SCALARS u double 3")
    rows = np.loadtxt(text[k + 2 : k + 2 + 60])
    # x fastest: flat index = i + nx * (j + ny * k)
    assert np.array_equal(rows[1 + 3 * (2 + 4 * 3)], [1.5, -2, 3])


def test_boundary_mesh_outward(domain, grid64):
    v, vn, f = boundary_mesh(domain, grid64)
    tri = v[f]
    av = 0.5 * np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    # divergence theorem: the flux of x through a closed outward surface is 3 |Omega|
    flux = np.sum(np.einsum("ij,ij->i", av, tri.mean(axis=1)))
    vol = grid64.inside.sum() * grid64.h**3
    assert flux / 3 == pytest.approx(vol, rel=0.03)


def test_obj_export_groups(tmp_path, domain, grid64):
    p = tmp_path / "s.obj"
    export_surface(p, domain, grid64)
    groups = [line.split()[1] for line in p.read_text().splitlines() if line.startswith("g ")]
    assert len(groups) == len(domain.patches) + 1
    assert groups[-1] == "boundary"
    text = p.read_text()
    assert text.count("\nvn ") == text.count("\nv ")
