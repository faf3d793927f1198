"""Sharp-interface quantities: weighted perimeter, the degenerate metric,
calibration identities, infiltration constants and a minimality probe."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree
from skimage import measure

from .cone import PAIRS, TRIPLES, TetrahedralCone, WeightSet, check_close
from .errors import ClosenessViolation, DecompositionResidual, NonconvergentPath, ValidationError
from .grid import OUTSIDE, OccupancyGrid, boundary_mesh

logger = logging.getLogger(__name__)

N_LABELS = 5  # OUTSIDE plus regions 1..4


# --------------------------------------------------------------------------
# interface extraction


def _smooth7(f):
    g = np.pad(f, 1, mode="edge")
    return (
        g[1:-1, 1:-1, 1:-1]
        + g[2:, 1:-1, 1:-1]
        + g[:-2, 1:-1, 1:-1]
        + g[1:-1, 2:, 1:-1]
        + g[1:-1, :-2, 1:-1]
        + g[1:-1, 1:-1, 2:]
        + g[1:-1, 1:-1, :-2]
    ) / 7.0


@dataclass
class TriangleSet:
    """Triangles in world coordinates; ``area_vectors`` are half cross
    products oriented from ``labels[0]`` into ``labels[1]``."""

    labels: tuple
    vertices: np.ndarray
    faces: np.ndarray
    area_vectors: np.ndarray
    centroids: np.ndarray

    @property
    def area(self) -> float:
        return float(np.linalg.norm(self.area_vectors, axis=1).sum())


class IndicatorStack:
    """Smoothed label indicators on a one-cell edge-padded grid.

    Without a domain, OUTSIDE is treated as a fifth label and interfaces
    stop where it dominates (one smoothing pass). With a domain, inside
    labels are extended outward by nearest inside voxel, smoothed
    ``passes`` times, and triangles are clipped by the exact domain field;
    this removes the half-voxel truncation at the boundary.
    """

    def __init__(self, grid: OccupancyGrid, domain=None, passes=None):
        self.grid = grid
        self.domain = domain
        if domain is None:
            lab = grid.label
            passes = 1 if passes is None else passes
        else:
            ins = grid.inside
            _, ind = ndimage.distance_transform_edt(~ins, return_indices=True)
            lab = grid.label[tuple(ind)]
            passes = 3 if passes is None else passes
        lab = np.pad(lab, 1, mode="edge")
        self.lab = lab
        phi = []
        for k in range(N_LABELS):
            f = (lab == k).astype(float)
            for _ in range(passes):
                f = _smooth7(f)
            phi.append(f)
        self.phi = np.stack(phi)
        self.present = [bool(np.any(grid.label == k)) for k in range(N_LABELS)]
        self.passes = passes
        self._near = {}

    def near(self, k):
        if k not in self._near:
            self._near[k] = ndimage.maximum_filter(self.lab == k, size=3)
        return self._near[k]

    def to_world(self, idx_coords):
        g = self.grid
        w = g.origin + (idx_coords - 1.0 + 0.5) * g.h
        hi = g.origin + np.array(g.dims) * g.h
        return np.clip(w, g.origin, hi)

    def sample(self, idx_coords):
        return np.stack(
            [ndimage.map_coordinates(self.phi[k], idx_coords.T, order=1, mode="nearest") for k in range(N_LABELS)]
        )

    def _triangles(self, f, level, mask, keep_fn, labels):
        if not np.any(mask):
            return _empty(labels)
        try:
            v, fc, _, _ = measure.marching_cubes(f, level, mask=mask)
        except (ValueError, RuntimeError):
            return _empty(labels)
        if len(fc) == 0:
            return _empty(labels)
        cen_idx = v[fc].mean(axis=1)
        keep = keep_fn(self.sample(cen_idx))
        w = self.to_world(v)
        if self.domain is not None:
            keep &= self.domain.field(w[fc].mean(axis=1)) > 0
        fc = fc[keep]
        cen_idx = cen_idx[keep]
        if len(fc) == 0:
            return _empty(labels)
        tri = w[fc]
        av = 0.5 * np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        # orient along -grad f, i.e. from the first label into the second
        grad = np.stack(
            [ndimage.map_coordinates(np.gradient(f, axis=a), cen_idx.T, order=1, mode="nearest") for a in range(3)],
            axis=1,
        )
        s = np.sign(np.sum(av * grad, axis=1))
        s[s == 0] = 1.0
        av = -s[:, None] * av
        return TriangleSet(labels, w, fc, av, tri.mean(axis=1))

    def pair(self, a, b) -> TriangleSet:
        """Interface between labels a and b (0 = outside), oriented a -> b."""
        if not (self.present[a] and self.present[b]):
            return _empty((a, b))
        f = self.phi[a] - self.phi[b]
        mask = self.near(a) & self.near(b)

        def keep(vals):
            others = np.max(np.delete(vals, [a, b], axis=0), axis=0)
            return np.minimum(vals[a], vals[b]) >= others

        return self._triangles(f, 0.0, mask, keep, (a, b))

    def region_boundary(self, i) -> TriangleSet:
        """Boundary of region i inside the domain."""
        if not self.present[i]:
            return _empty((i, -1))
        mask = self.near(i) & ndimage.maximum_filter(self.lab != i, size=3)

        def keep(vals):
            rest = np.max(np.delete(vals, [0, i], axis=0), axis=0)
            return rest >= vals[0]

        return self._triangles(self.phi[i], 0.5, mask, keep, (i, -1))


class BallDomain:
    """The plain ball as a domain (field positive inside)."""

    def __init__(self, radius=1.0):
        self.radius = radius
        self.bounding_radius = radius

    def field(self, points):
        return self.radius - np.linalg.norm(np.atleast_2d(points), axis=1)


def _empty(labels):
    z = np.zeros((0, 3))
    return TriangleSet(labels, z, np.zeros((0, 3), dtype=int), z, z)


@dataclass
class InterfaceMeasure:
    """``areas[i, j]`` for regions 0..3 (labels 1..4); ``boundary_traces[i]``
    is the area of the trace of region i on the domain boundary."""

    areas: np.ndarray
    boundary_traces: np.ndarray
    meshes: dict = field(default_factory=dict, repr=False)
    stack: IndicatorStack | None = field(default=None, repr=False)


def interface_areas(part: OccupancyGrid, domain=None, boundary=None, passes=None) -> InterfaceMeasure:
    """Pairwise interface areas and boundary traces of a labeled grid.

    ``domain`` (anything with ``field(points)``, positive inside) switches on
    boundary clipping; ``boundary`` is an optional precomputed boundary mesh
    used for the traces in that mode.
    """
    stack = IndicatorStack(part, domain, passes)
    areas = np.zeros((4, 4))
    traces = np.zeros(4)
    meshes = {}
    for i, j in PAIRS:
        t = stack.pair(i + 1, j + 1)
        areas[i, j] = areas[j, i] = t.area
        meshes[(i + 1, j + 1)] = t
    if domain is None:
        for i in range(4):
            t = stack.pair(i + 1, OUTSIDE)
            traces[i] = t.area
            meshes[(i + 1, OUTSIDE)] = t
    else:
        verts, _, faces = boundary if boundary is not None else boundary_mesh(domain, part)
        tri = verts[faces]
        area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        lab = _boundary_labels(part, tri.mean(axis=1))
        traces = np.array([area[lab == k + 1].sum() for k in range(4)])
    return InterfaceMeasure(areas, traces, meshes, stack)


@dataclass
class PerimeterReport:
    pairwise: float
    by_region: float
    relative_difference: float
    agree: bool


def weighted_perimeter(
    part: OccupancyGrid, w: WeightSet, measure_=None, domain=None, boundary=None, tol=0.02, both=True
) -> PerimeterReport:
    """E0 = sum_{i<j} c_ij |Sigma_ij| and the equivalent sum_i c_i |dR_i in Omega|."""
    m = measure_ or interface_areas(part, domain, boundary)
    pairwise = float(sum(w.cij[i, j] * m.areas[i, j] for i, j in PAIRS))
    if not both:
        return PerimeterReport(pairwise, np.nan, np.nan, True)
    stack = m.stack if m.stack is not None else IndicatorStack(part)
    by_region = float(sum(w.c[i] * stack.region_boundary(i + 1).area for i in range(4)))
    scale = max(abs(pairwise), abs(by_region), 1e-300)
    rel = abs(pairwise - by_region) / scale if (pairwise or by_region) else 0.0
    agree = rel <= tol
    if not agree:
        logger.warning("E0 forms disagree: pairwise %.6g vs per-region %.6g", pairwise, by_region)
    return PerimeterReport(pairwise, by_region, rel, agree)


# --------------------------------------------------------------------------
# calibration


def _boundary_labels(part: OccupancyGrid, points):
    """Label of the nearest inside voxel for points on the domain boundary."""
    ins = part.inside
    shell = ins & ndimage.maximum_filter(~ins, size=5)
    centres = part.centers(shell)
    labels = part.label[shell]
    _, k = cKDTree(centres).query(points)
    return labels[k]


def calibration_check(part: OccupancyGrid, cone: TetrahedralCone, w: WeightSet, domain, boundary=None, measure_=None) -> dict:
    """Bulk side, boundary side and E0 of the calibration identity.

    ``boundary`` is a (vertices, normals, faces) mesh of the domain boundary
    with outward winding, computed from ``domain`` when omitted. With A_i the cone vertices, c_ij n_ij = A_j - A_i,
    so the bulk side is sum over interfaces of (A_j - A_i) . nu_{i->j} and
    the boundary side is sum_i int_{dR_i cap dOmega} (A_i - A_4) . nu.
    """
    if boundary is None:
        boundary = boundary_mesh(domain, part)
    m = measure_ or interface_areas(part, domain, boundary)
    A = cone.vertices
    bulk = 0.0
    max_dot = -np.inf
    for i, j in PAIRS:
        t = m.meshes.get((i + 1, j + 1))
        if t is None or len(t.faces) == 0:
            continue
        bulk += float(np.sum(t.area_vectors @ (A[j] - A[i])))
        unit = t.area_vectors / np.maximum(np.linalg.norm(t.area_vectors, axis=1, keepdims=True), 1e-300)
        max_dot = max(max_dot, float(np.max(np.abs(unit @ cone.normals[i, j]))))
    verts, _, faces = boundary
    tri = verts[faces]
    av = 0.5 * np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    lab = _boundary_labels(part, tri.mean(axis=1)) - 1
    bside = float(np.sum(np.einsum("ij,ij->i", av, A[lab] - A[3])))
    e0 = float(sum(w.cij[i, j] * m.areas[i, j] for i, j in PAIRS))
    return {
        "E0": e0,
        "bulk_side": bulk,
        "boundary_side": bside,
        "relative_residual": abs(e0 - bside) / e0 if e0 else 0.0,
        "bulk_boundary_gap": abs(bulk - bside),
        "calibration_gap": e0 - bulk,
        "max_normal_dot": max_dot,
    }


# --------------------------------------------------------------------------
# metric


@dataclass
class MetricPath:
    points: np.ndarray
    action: float
    lattice_action: float = np.nan
    trace: list = field(default_factory=list)


def discrete_action(W, pts) -> float:
    pts = np.asarray(pts, float)
    seg = np.diff(pts, axis=0)
    mid = 0.5 * (pts[1:] + pts[:-1])
    w = np.maximum(W.evaluate(mid), 0.0)
    return float(np.sqrt(2.0) * np.sum(np.sqrt(w) * np.linalg.norm(seg, axis=1)))


def _action_and_grad(interior, W, p, q):
    pts = np.vstack([p, interior.reshape(-1, 3), q])
    seg = np.diff(pts, axis=0)
    length = np.linalg.norm(seg, axis=1)
    mid = 0.5 * (pts[1:] + pts[:-1])
    w = np.maximum(W.evaluate(mid), 0.0)
    s = np.sqrt(w)
    gs = W.gradient(mid) / np.maximum(2.0 * s, 1e-300)[:, None]
    unit = seg / np.maximum(length, 1e-300)[:, None]
    root2 = np.sqrt(2.0)
    # d a_k / d x_k and d a_k / d x_{k+1}
    g_left = root2 * (0.5 * gs * length[:, None] - s[:, None] * unit)
    g_right = root2 * (0.5 * gs * length[:, None] + s[:, None] * unit)
    grad = g_right[:-1] + g_left[1:]
    return float(root2 * np.sum(s * length)), grad.ravel()


def _resample(pts, n):
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0:
        return np.repeat(pts[:1], n, axis=0)
    t = np.linspace(0.0, s[-1], n)
    return np.stack([np.interp(t, s, pts[:, k]) for k in range(3)], axis=1)


def _lattice_path(W, p, q, n):
    lo = np.minimum(p, q)
    hi = np.maximum(p, q)
    pad = 0.35 * np.linalg.norm(q - p) + 1e-9
    lo, hi = lo - pad, hi + pad
    axes = [np.linspace(lo[k], hi[k], n) for k in range(3)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    idx = np.arange(n**3).reshape(n, n, n)
    rows, cols, vals = [], [], []
    offs = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1) if (a, b, c) > (0, 0, 0)]
    for a, b, c in offs:
        sl_from = tuple(slice(max(0, -d), n - max(0, d)) for d in (a, b, c))
        sl_to = tuple(slice(max(0, d), n - max(0, -d)) for d in (a, b, c))
        u = idx[sl_from].ravel()
        v = idx[sl_to].ravel()
        mid = 0.5 * (X[u] + X[v])
        length = np.linalg.norm(X[v] - X[u], axis=1)
        wt = np.sqrt(2.0) * np.sqrt(np.maximum(W.evaluate(mid), 0.0)) * length
        wt = np.maximum(wt, 1e-15)  # csgraph treats explicit zeros as missing edges
        rows += [u, v]
        cols += [v, u]
        vals += [wt, wt]
    graph = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n**3, n**3)).tocsr()
    start = int(np.argmin(np.linalg.norm(X - p, axis=1)))
    end = int(np.argmin(np.linalg.norm(X - q, axis=1)))
    _, pred = dijkstra(graph, indices=start, return_predecessors=True)
    chain = [end]
    while chain[-1] != start:
        nxt = pred[chain[-1]]
        if nxt < 0:
            raise NonconvergentPath("lattice is disconnected")
        chain.append(nxt)
    pts = X[chain[::-1]]
    pts[0], pts[-1] = p, q
    return pts


def metric_distance(W, p, q, lattice=33, samples=65, max_rounds=30, rtol=1e-10) -> MetricPath:
    """Approximate d(p, q) = inf sqrt(2) int sqrt(W(gamma)) |gamma'| over curves.

    Lattice Dijkstra seeds a polyline; alternating L-BFGS descent on the
    midpoint-rule action and equal-arclength resampling refines it. A step
    is only accepted when it does not raise the action, so the trace is
    monotone by construction (and asserted).
    """
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    if np.allclose(p, q, rtol=0, atol=1e-15):
        return MetricPath(np.vstack([p, q]), 0.0, 0.0, [0.0])
    seed = _lattice_path(W, p, q, lattice)
    lattice_action = discrete_action(W, seed)
    pts = _resample(seed, samples)
    current = discrete_action(W, pts)
    if current > lattice_action:
        # resampling a lattice path can clip corners into higher W; refine from it anyway
        logger.debug("resampled seed action %.6g above lattice %.6g", current, lattice_action)
    trace = [current]
    for _ in range(max_rounds):
        res = optimize.minimize(
            _action_and_grad,
            pts[1:-1].ravel(),
            args=(W, p, q),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": 200, "gtol": 1e-12, "ftol": 1e-15},
        )
        cand = np.vstack([p, res.x.reshape(-1, 3), q])
        a = discrete_action(W, cand)
        if a <= current:
            pts, current = cand, a
        re = _resample(pts, samples)
        a = discrete_action(W, re)
        if a <= current:
            pts, current = re, a
        assert current <= trace[-1] + 1e-15, "action increased during refinement"
        improved = trace[-1] - current
        trace.append(current)
        if improved <= rtol * max(current, 1e-300):
            break
    if current > lattice_action * (1 + 1e-9):
        raise NonconvergentPath(
            f"refined action {current:.6g} did not fall below the lattice value {lattice_action:.6g}"
        )
    return MetricPath(pts, current, lattice_action, trace)


def coefficients_from_potential(W, wells=None, rel_tol=1e-3, **kwargs):
    """Pairwise actions c_ij = d(p_i, p_j), their least-squares split into
    c_i + c_j, and the split residual. Returns ``(weights, residual, paths)``."""
    wells = np.asarray(W.wells if wells is None else wells, float)
    if len(wells) != 4:
        raise ValidationError("need exactly four wells")
    cij = np.zeros((4, 4))
    paths = {}
    for i, j in PAIRS:
        path = metric_distance(W, wells[i], wells[j], **kwargs)
        cij[i, j] = cij[j, i] = path.action
        paths[(i + 1, j + 1)] = path
    weights, residual = WeightSet.from_pairwise(cij, check_closeness=False)
    if residual > rel_tol * cij.max():
        warnings.warn(DecompositionResidual(f"c_i + c_j misfit {residual:.3g}"), stacklevel=2)
    check_close(weights.c)
    return weights, residual, paths


# --------------------------------------------------------------------------
# infiltration constants


def infiltration_constants(w, C0=0.1, r=(1.0, 1.0, 1.0)):
    """Lambda, eps0 = (Lambda/6)^3 and delta from the infiltration argument.

    The isoperimetric constant C0 is an input; all outputs are conditional
    on it.
    """
    c = np.asarray(w.c if isinstance(w, WeightSet) else w, dtype=float)
    if not C0 > 0:
        raise ValidationError(f"C0 must be positive, got {C0}")
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValidationError("radii must be positive")
    gap = min(2 * c[i] - c[j] for i in range(4) for j in range(4) if i != j)
    if gap <= 0:
        raise ClosenessViolation(f"min(2 c_i - c_j) = {gap:g} is not positive")
    cmin, cmax = c.min(), c.max()
    lam = min(C0 * cmin / (cmax + cmin), C0 * cmin / (3 * cmax), C0 * gap / (5 * cmax))
    eps0 = (lam / 6.0) ** 3
    delta = min(float(np.min((r / 2.0) ** 4)), 0.5 * (lam / 6.0) ** 4)
    return float(lam), float(eps0), float(delta)


# --------------------------------------------------------------------------
# minimality probe


@dataclass
class Competitor:
    name: str
    label: np.ndarray
    volume: float = 0.0
    margin: float = np.nan
    tolerance: float = np.nan


def _relabel(base, mask, new):
    lab = base.label.copy()
    m = mask & base.inside
    if np.isscalar(new):
        lab[m] = new
    else:
        lab[m] = new[m]
    return lab


def build_competitors(part: OccupancyGrid, cone: TetrahedralCone, shift=2.0, ball=4.0):
    """Structured competitors near the cone partition.

    ``shift`` and ``ball`` are in voxel units: plane translation distance
    and radius of injected balls and bulges.
    """
    h = part.h
    X = part.centers().reshape(part.dims + (3,))
    lab = part.label
    out = [Competitor("identity", lab.copy())]
    d = shift * h
    for i, j in PAIRS:
        n = cone.normals[i, j]
        s = X @ n
        both = (lab == i + 1) | (lab == j + 1)
        new = np.where(s > d, j + 1, i + 1).astype(np.int8)
        out.append(Competitor(f"translate_{i + 1}{j + 1}", _relabel(part, both, new)))
    rad = ball * h
    # a foreign phase injected at each junction point on the boundary
    for tri in TRIPLES:
        (l,) = set(range(4)) - set(tri)
        q = cone.rays[tri]
        depth = _boundary_depth(part, q)
        c = (depth - 0.5 * rad) * q
        m = np.linalg.norm(X - c, axis=-1) < rad
        out.append(Competitor(f"junction_ball_{''.join(str(t + 1) for t in tri)}_{l + 1}", _relabel(part, m, l + 1)))
    # a foreign phase on a trough midpoint, and a bulge of one interface
    for i, j in PAIRS[:2]:
        k = next(t for t in range(4) if t not in (i, j))
        mid = _arc_midpoint(cone, i, j)
        depth = _boundary_depth(part, mid)
        c = (depth - 0.5 * rad) * mid
        m = np.linalg.norm(X - c, axis=-1) < rad
        out.append(Competitor(f"trough_ball_{i + 1}{j + 1}_{k + 1}", _relabel(part, m, k + 1)))
        centre = 0.5 * mid
        m = (np.linalg.norm(X - centre, axis=-1) < rad) & (lab == i + 1)
        out.append(Competitor(f"bulge_{i + 1}{j + 1}", _relabel(part, m, j + 1)))
    # a foreign phase pushed into the middle of a region's free boundary
    for i in range(2):
        v = cone.vertices[i] / np.linalg.norm(cone.vertices[i])
        depth = _boundary_depth(part, v)
        c = (depth - 0.5 * rad) * v
        m = np.linalg.norm(X - c, axis=-1) < rad
        out.append(Competitor(f"boundary_ball_{i + 1}_{(i + 1) % 4 + 1}", _relabel(part, m, (i + 1) % 4 + 1)))
    for comp in out:
        comp.volume = float(np.count_nonzero(comp.label != lab) * h**3)
    return out


def _boundary_depth(part, direction, step=0.25):
    """Distance from the origin to the last inside voxel along a ray."""
    direction = np.asarray(direction) / np.linalg.norm(direction)
    h = part.h
    t = np.arange(0.0, np.abs(part.origin).max() * 2, step * h)
    idx = np.floor((t[:, None] * direction - part.origin) / h).astype(int)
    ok = np.all((idx >= 0) & (idx < np.array(part.dims)), axis=1)
    idx = idx[ok]
    ins = part.inside[idx[:, 0], idx[:, 1], idx[:, 2]]
    last = np.flatnonzero(ins)
    return float(t[ok][last[-1]]) if len(last) else 0.0


def _arc_midpoint(cone, i, j):
    k, l = sorted(set(range(4)) - {i, j})
    a = cone.rays[tuple(sorted((i, j, k)))]
    b = cone.rays[tuple(sorted((i, j, l)))]
    m = a + b
    return m / np.linalg.norm(m)


def minimality_probe(part: OccupancyGrid, cone, w: WeightSet, volume_budget, domain=None, tol_rel=1e-3, **kw) -> dict:
    """E0(T) - E0(S) for each structured competitor T within ``volume_budget``.

    A margin passes when it exceeds ``tol_rel * E0(S)``. On kinked
    competitors the smoothed estimator rounds the new corners and so
    underestimates margins; the test is conservative in that direction.
    """
    boundary = boundary_mesh(domain, part) if domain is not None else None
    base = weighted_perimeter(part, w, domain=domain, boundary=boundary, both=False).pairwise
    tol = tol_rel * base
    rows = []
    ok = True
    for comp in build_competitors(part, cone, **kw):
        if comp.volume > volume_budget:
            rows.append({"name": comp.name, "volume": comp.volume, "skipped": "outside volume budget"})
            continue
        grid = part.with_labels(comp.label)
        e = weighted_perimeter(grid, w, domain=domain, boundary=boundary, both=False).pairwise
        margin = e - base
        passed = comp.name == "identity" or margin > tol
        ok &= passed
        rows.append(
            {"name": comp.name, "volume": comp.volume, "E0": e, "margin": margin, "tolerance": tol, "pass": bool(passed)}
        )
    tested = sum(1 for r in rows if "margin" in r and r["name"] != "identity")
    return {"E0_base": base, "volume_budget": volume_budget, "tolerance": tol, "tested": tested,
            "competitors": rows, "ok": bool(ok)}
