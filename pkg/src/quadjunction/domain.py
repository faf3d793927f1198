"""Perturbed-ball domain with troughs along the cone arcs and valleys at the
triple points.

Everything near an arc gamma_ij is a pipe surface of radius ``r_star``:
circular cross-sections perpendicular to a planar profile curve lying in the
(i, j) interface plane. The profile runs

    valley floor (hemisphere) -> interpolating arch -> unit-circle trough ->
    arch -> valley floor

and the domain locally lies outside the pipe. Carving those pipes out of a
ball of radius ``1 + lam`` gives the domain; the outer sphere is blended in
with a C1 smooth minimum.

Patches are evaluated in a canonical frame where the valley sits on the +z
axis and the interface plane is y = 0; a rotation per (arc, valley) pair
places them. Canonical coordinates are ``(x, y, z)``, profile curves are
written in the ``(x, z)`` half-plane.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .cone import PAIRS, TRIPLES, TetrahedralCone
from .errors import (
    DomainError,
    GoodnormalsViolation,
    InterpolantInfeasible,
    PatchOverlap,
    ValidationError,
)

logger = logging.getLogger(__name__)

R_STAR_MAX = np.sqrt(2.0) / 4.0


@dataclass(frozen=True)
class DomainSpec:
    cone: TetrahedralCone
    r_star: float = 0.25
    lam: float | None = None
    eta: float | None = None
    x_bar: float | None = None

    def __post_init__(self):
        r = self.r_star
        if not 0.0 < r < R_STAR_MAX:
            raise ValidationError(f"r_star must lie in (0, {R_STAR_MAX:.4f}), got {r}")
        if self.lam is None:
            object.__setattr__(self, "lam", r)
        if self.eta is None:
            object.__setattr__(self, "eta", r / 2.0)
        if not self.lam > 0:
            raise ValidationError(f"lambda must be positive, got {self.lam}")
        if not 0.0 < self.eta <= r / 2.0:
            raise ValidationError(f"eta must lie in (0, r_star/2 = {r / 2:g}], got {self.eta}")
        for i, j in PAIRS:
            half = np.sin(0.5 * self.cone.arc_angle(i, j))
            if half <= 2 * r:
                raise ValidationError(
                    f"arc {i + 1}{j + 1} is too short for r_star={r}: "
                    f"sin(half angle)={half:.4f} <= 2 r_star"
                )
            if self.x_bar is not None and not 2 * r < self.x_bar <= half:
                raise ValidationError(
                    f"x_bar={self.x_bar} must lie in (2 r_star, {half:.4f}] for arc {i + 1}{j + 1}"
                )

    @property
    def valley_depth_center(self) -> float:
        return 1.0 - 2.0 * self.r_star

    @property
    def z_top(self) -> float:
        return float(np.sqrt(1.0 - 4.0 * self.r_star**2))

    @property
    def outer_radius(self) -> float:
        return 1.0 + self.lam

    @property
    def blend(self) -> float:
        return 0.5 * min(self.lam, self.r_star)

    def x_bar_for(self, i, j) -> float:
        if self.x_bar is not None:
            return float(self.x_bar)
        return float(np.sin(0.5 * self.cone.arc_angle(i, j)))

    @property
    def x_bar_max(self) -> float:
        return max(self.x_bar_for(i, j) for i, j in PAIRS)


def _depth(r, y):
    """Cross-section arc depth r - sqrt(r^2 - y^2) and its y-derivative."""
    root = np.sqrt(r * r - y * y)
    return r - root, y / root


def _check_rect(name, value, lo, hi):
    v = np.asarray(value, dtype=float)
    slack = 1e-12 * max(1.0, abs(hi))
    if np.any(v < lo - slack) or np.any(v > hi + slack):
        raise DomainError(f"{name} outside [{lo:.6g}, {hi:.6g}]")


# --------------------------------------------------------------------------
# trough


def trough_point(spec: DomainSpec, x, y, x_bar=None):
    """Trough parametrization F(x, y) in the canonical frame.

    The cross-section arc of depth r - sqrt(r^2 - y^2) is rotated by alpha(x),
    tan alpha = -x / sqrt(1 - x^2), and translated onto the unit circle.
    The parameter rectangle is taken closed so seams can be evaluated.
    """
    x_bar = spec.x_bar_max if x_bar is None else x_bar
    r = spec.r_star
    _check_rect("x", x, 2 * r, x_bar)
    _check_rect("y", y, -r / 2, r / 2)
    x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    s = np.sqrt(1.0 - x * x)
    alpha = np.arctan(-x / s)
    b, _ = _depth(r, y)
    return np.stack(
        [x - b * np.sin(alpha), y, s + b * np.cos(alpha)], axis=-1
    )


def trough_partials(spec: DomainSpec, x, y):
    """Analytic (F_x, F_y)."""
    r = spec.r_star
    x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    s = np.sqrt(1.0 - x * x)
    alpha = np.arctan(-x / s)
    dalpha = -1.0 / s
    b, db = _depth(r, y)
    fx = np.stack(
        [
            1.0 - b * np.cos(alpha) * dalpha,
            np.zeros_like(x),
            -x / s - b * np.sin(alpha) * dalpha,
        ],
        axis=-1,
    )
    fy = np.stack([-db * np.sin(alpha), np.ones_like(x), db * np.cos(alpha)], axis=-1)
    return fx, fy


def trough_normal(spec: DomainSpec, x, y, x_bar=None):
    trough_point(spec, x, y, x_bar)  # domain check
    fx, fy = trough_partials(spec, x, y)
    n = np.cross(fx, fy)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def trough_normal_y(spec: DomainSpec, x, y, x_bar=None):
    """Second component of the unit outward normal F_x x F_y / |F_x x F_y|."""
    return trough_normal(spec, x, y, x_bar)[..., 1]


def trough_normal_y_closed(spec: DomainSpec, x, y):
    """Closed form of the normal's second component: -y / r_star.

    The trough is a piece of a surface of revolution about the y axis (the
    cross-section centre sits on the circle of radius 1 + r_star), so the
    value does not depend on x.
    """
    x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    return -y / spec.r_star


def trough_normal_y_printed(spec: DomainSpec, x, y):
    """The published closed form for the trough normal's second component,
    transcribed symbol for symbol. It does not agree with the cross product;
    kept so the discrepancy stays measurable."""
    r = spec.r_star
    x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    root = np.sqrt(r * r - y * y)
    return -y * (r * r - root) * (1.0 + (1.0 - x * x) ** 2) / (root * (1.0 - x * x) ** 2.5)


# --------------------------------------------------------------------------
# interpolating arch


@dataclass(frozen=True)
class Interpolant:
    """Planar C1 arch from the valley rim to the start of the trough.

    A cubic Bezier curve t -> (X(t), Z(t)), t in [0, 1], from (r, 1 - 2r)
    with vertical tangent to (2r, sqrt(1 - 4r^2)) with the unit circle's
    tangent. Expressed through the slope g' = dX/dZ this matches the four
    endpoint conditions of the graph x = g(z); the curve is not a graph over
    z (it rises above z_top and comes back down), so monotonicity and
    convexity are checked along the curve: X' > 0 and beta' > 0 where
    beta = atan2(X', Z').
    """

    r_star: float
    handles: tuple

    @cached_property
    def control(self) -> np.ndarray:
        r = self.r_star
        s0 = np.sqrt(1.0 - 4.0 * r * r)
        p0 = np.array([r, 1.0 - 2.0 * r])
        p1 = np.array([2.0 * r, s0])
        t0 = np.array([0.0, 1.0])
        t1 = np.array([s0, -2.0 * r])
        a, b = self.handles
        return np.array([p0, p0 + a * t0, p1 - b * t1, p1])

    def point(self, t):
        t = np.asarray(t, float)[..., None]
        c = self.control
        u = 1.0 - t
        return u**3 * c[0] + 3 * u * u * t * c[1] + 3 * u * t * t * c[2] + t**3 * c[3]

    def d1(self, t):
        t = np.asarray(t, float)[..., None]
        c = self.control
        u = 1.0 - t
        return 3 * u * u * (c[1] - c[0]) + 6 * u * t * (c[2] - c[1]) + 3 * t * t * (c[3] - c[2])

    def d2(self, t):
        t = np.asarray(t, float)[..., None]
        c = self.control
        return 6 * (1.0 - t) * (c[2] - 2 * c[1] + c[0]) + 6 * t * (c[3] - 2 * c[2] + c[1])

    def beta(self, t):
        d = self.d1(t)
        return np.arctan2(d[..., 0], d[..., 1])

    def dbeta(self, t):
        d, dd = self.d1(t), self.d2(t)
        return (d[..., 1] * dd[..., 0] - d[..., 0] * dd[..., 1]) / np.sum(d * d, axis=-1)

    def g_slope(self, t):
        """dX/dZ along the curve (the slope g' of the graph formulation)."""
        d = self.d1(t)
        return d[..., 0] / d[..., 1]

    def curvature(self, t):
        d = self.d1(t)
        return self.dbeta(t) / np.linalg.norm(d, axis=-1)

    def check(self, samples=2001) -> dict:
        t = np.linspace(0.0, 1.0, samples)[1:-1]
        d = self.d1(t)
        p = self.point(t)
        return {
            "min_dX": float(d[:, 0].min()),
            "min_dbeta": float(self.dbeta(t).min()),
            "max_curvature": float(np.abs(self.curvature(t)).max()),
            "max_radius": float(np.linalg.norm(p, axis=-1).max()),
            "beta_end": float(self.beta(1.0)),
        }


def _arch_ok(rep) -> bool:
    return rep["min_dX"] > 0 and rep["min_dbeta"] > 0 and rep["max_radius"] <= 1.0 + 1e-12


def build_interpolant(spec: DomainSpec, grid=24) -> Interpolant:
    """Pick the Bezier handle lengths minimizing peak curvature subject to
    X' > 0, beta' > 0 and staying inside the unit sphere."""
    r = spec.r_star
    best = None
    for a in np.linspace(0.1, 4.0, grid) * r:
        for b in np.linspace(0.1, 4.0, grid) * r:
            cand = Interpolant(r, (float(a), float(b)))
            rep = cand.check(401)
            if _arch_ok(rep) and (best is None or rep["max_curvature"] < best[0]):
                best = (rep["max_curvature"], cand)
    if best is None:
        raise InterpolantInfeasible(f"no monotone convex arch for r_star={r}")
    interp = best[1]
    if not _arch_ok(interp.check()):
        raise InterpolantInfeasible(f"arch fails fine-sample check for r_star={r}")
    return interp


def _interp_frame(interp, t):
    """Profile point P, unit tangent T, exterior normal N in canonical 3D."""
    p = interp.point(t)
    beta = interp.beta(t)
    zero = np.zeros_like(beta)
    P = np.stack([p[..., 0], zero, p[..., 1]], axis=-1)
    T = np.stack([np.sin(beta), zero, np.cos(beta)], axis=-1)
    N = np.stack([-np.cos(beta), zero, np.sin(beta)], axis=-1)
    return P, T, N


def interp_point(spec: DomainSpec, y, t, interp: Interpolant | None = None):
    """G(y, t) = (X - b cos beta, y, Z + b sin beta) with tan beta = dX/dZ.

    ``t`` is the arch parameter: t = 0 is the valley rim (z = 1 - 2 r_star),
    t = 1 the start of the trough (z = sqrt(1 - 4 r_star^2)).
    """
    interp = interp or build_interpolant(spec)
    r = spec.r_star
    _check_rect("t", t, 0.0, 1.0)
    _check_rect("y", y, -r / 2, r / 2)
    y, t = np.broadcast_arrays(np.asarray(y, float), np.asarray(t, float))
    P, _, N = _interp_frame(interp, t)
    b, _ = _depth(r, y)
    e_y = np.zeros_like(P)
    e_y[..., 1] = 1.0
    return P + b[..., None] * N + y[..., None] * e_y


def interp_partials(spec: DomainSpec, y, t, interp: Interpolant):
    """Analytic (G_t, G_y)."""
    r = spec.r_star
    y, t = np.broadcast_arrays(np.asarray(y, float), np.asarray(t, float))
    _, T, N = _interp_frame(interp, t)
    speed = np.linalg.norm(interp.d1(t), axis=-1)
    b, db = _depth(r, y)
    # dN/dbeta = T
    g_t = (speed + b * interp.dbeta(t))[..., None] * T
    e_y = np.zeros_like(N)
    e_y[..., 1] = 1.0
    g_y = db[..., None] * N + e_y
    return g_t, g_y


def interp_normal(spec: DomainSpec, y, t, interp: Interpolant):
    g_t, g_y = interp_partials(spec, y, t, interp)
    n = np.cross(g_t, g_y)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def interp_cross_y(spec: DomainSpec, y, t, interp: Interpolant):
    """Second component of the unnormalized G_t x G_y in closed form:
    -y (|P'(t)| + b(y) beta'(t)) / sqrt(r^2 - y^2), b = r - sqrt(r^2 - y^2)."""
    r = spec.r_star
    y, t = np.broadcast_arrays(np.asarray(y, float), np.asarray(t, float))
    speed = np.linalg.norm(interp.d1(t), axis=-1)
    b, _ = _depth(r, y)
    return -y * (speed + b * interp.dbeta(t)) / np.sqrt(r * r - y * y)


def interp_cross_y_graph(spec: DomainSpec, y, t, interp: Interpolant):
    """The graph-form expression -y [-b beta_z + cos beta + g' sin beta] /
    sqrt(r^2 - y^2) with b = -r + sqrt(r^2 - y^2) and z-derivatives, valid on
    the rising branch where Z'(t) > 0. Equals the z-parametrized G_z x G_y."""
    r = spec.r_star
    y, t = np.broadcast_arrays(np.asarray(y, float), np.asarray(t, float))
    beta = interp.beta(t)
    dz = interp.d1(t)[..., 1]
    beta_z = interp.dbeta(t) / dz
    gp = interp.g_slope(t)
    b = -r + np.sqrt(r * r - y * y)
    return -y * (-b * beta_z + np.cos(beta) + gp * np.sin(beta)) / np.sqrt(r * r - y * y)


# --------------------------------------------------------------------------
# valley


def valley_point(spec: DomainSpec, theta, phi):
    """Lower hemisphere of radius r_star centered at (0, 0, 1 - 2 r_star).

    ``theta`` in [0, pi/2] is measured from the downward axis (theta = 0 is
    the deepest point), ``phi`` is the azimuth.
    """
    _check_rect("theta", theta, 0.0, np.pi / 2)
    r = spec.r_star
    theta, phi = np.broadcast_arrays(np.asarray(theta, float), np.asarray(phi, float))
    st = np.sin(theta)
    return np.stack(
        [r * st * np.cos(phi), r * st * np.sin(phi), spec.valley_depth_center - r * np.cos(theta)],
        axis=-1,
    )


def valley_normal(spec: DomainSpec, theta, phi):
    """Outer normal of the domain on the valley: toward the sphere center."""
    p = valley_point(spec, theta, phi)
    center = np.array([0.0, 0.0, spec.valley_depth_center])
    v = center - p
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def valley_partials(spec: DomainSpec, theta, phi):
    r = spec.r_star
    theta, phi = np.broadcast_arrays(np.asarray(theta, float), np.asarray(phi, float))
    ct, st, cp, sp = np.cos(theta), np.sin(theta), np.cos(phi), np.sin(phi)
    d_theta = np.stack([r * ct * cp, r * ct * sp, r * st], axis=-1)
    d_phi = np.stack([-r * st * sp, r * st * cp, np.zeros_like(st)], axis=-1)
    return d_theta, d_phi


# --------------------------------------------------------------------------
# assembly


@dataclass(frozen=True)
class Frame:
    """Rigid placement of a canonical patch: world = rot @ canonical."""

    rot: np.ndarray
    pair: tuple
    triple: tuple

    def to_world(self, p):
        return np.asarray(p) @ self.rot.T

    def to_local(self, p):
        return np.asarray(p) @ self.rot


@dataclass
class SurfacePatch:
    kind: str
    name: str
    frame: Frame
    u_range: tuple
    v_range: tuple
    evaluate: object = field(repr=False)

    def sample(self, nu, nv, margin=0.0):
        """Points and unit outward normals (world) on an nu x nv tensor grid."""
        u = np.linspace(self.u_range[0] + margin, self.u_range[1] - margin, nu)
        v = np.linspace(self.v_range[0] + margin, self.v_range[1] - margin, nv)
        uu, vv = np.meshgrid(u, v, indexing="ij")
        p, n = self.evaluate(uu, vv)
        return self.frame.to_world(p), self.frame.to_world(n), uu, vv


def _arc_frame(cone: TetrahedralCone, pair, triple) -> Frame:
    i, j = pair
    (other,) = set(range(4)) - set(triple)
    far = tuple(sorted((i, j, other)))
    e_z = cone.rays[triple]
    q = cone.rays[far]
    e_x = q - (q @ e_z) * e_z
    e_x /= np.linalg.norm(e_x)
    e_y = np.cross(e_z, e_x)
    return Frame(rot=np.column_stack([e_x, e_y, e_z]), pair=pair, triple=triple)


def _circle_arc_distance(points, normal, start, end, radius):
    """Distance from points to the circle arc of given radius in the plane
    through the origin with unit ``normal``, from direction ``start`` to
    direction ``end`` (unit vectors, angle < pi)."""
    w = points @ normal
    inplane = points - w[:, None] * normal
    ang_total = np.arccos(np.clip(start @ end, -1.0, 1.0))
    e1 = start
    e2 = end - (end @ start) * start
    e2 /= np.linalg.norm(e2)
    ang = np.arctan2(inplane @ e2, inplane @ e1)
    rho = np.linalg.norm(inplane, axis=1)
    d_arc = np.sqrt((rho - radius) ** 2 + w * w)
    p0 = radius * start
    p1 = radius * (np.cos(ang_total) * e1 + np.sin(ang_total) * e2)
    d_end = np.minimum(np.linalg.norm(points - p0, axis=1), np.linalg.norm(points - p1, axis=1))
    within = (ang >= 0) & (ang <= ang_total)
    return np.where(within, d_arc, d_end)


def _polyline_distance(points, tree, verts, seg_owner, cutoff=np.inf):
    """Distance to a union of polylines sampled densely; refined on the two
    segments adjacent to the nearest vertex. Points farther than ``cutoff``
    from every vertex get ``inf``."""
    dist, idx = tree.query(points, distance_upper_bound=cutoff)
    near = np.isfinite(dist)
    out = np.full(len(points), np.inf)
    if not np.any(near):
        return out
    points, idx = points[near], idx[near]
    best = np.full(len(points), np.inf)
    for off in (-1, 0):
        a_idx = idx + off
        b_idx = a_idx + 1
        ok = (a_idx >= 0) & (b_idx < len(verts))
        a_idx = np.clip(a_idx, 0, len(verts) - 1)
        b_idx = np.clip(b_idx, 0, len(verts) - 1)
        ok &= seg_owner[a_idx] == seg_owner[b_idx]
        a = verts[a_idx]
        b = verts[b_idx]
        ab = b - a
        denom = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
        s = np.clip(np.sum((points - a) * ab, axis=1) / denom, 0.0, 1.0)
        d = np.linalg.norm(points - (a + s[:, None] * ab), axis=1)
        d_vertex = np.linalg.norm(points - verts[idx], axis=1)
        best = np.minimum(best, np.where(ok, d, d_vertex))
    out[near] = best
    return out


def smooth_min(a, b, k):
    """Polynomial C1 smooth minimum; exactly min(a, b) when |a - b| >= k."""
    hh = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b + (a - b) * hh - k * hh * (1.0 - hh)


class Domain:
    """Assembled surface: patches, frames and the implicit occupancy field."""

    core_samples = 1200

    def __init__(self, spec: DomainSpec, interp: Interpolant | None = None):
        self.spec = spec
        self.cone = spec.cone
        self.interp = interp or build_interpolant(spec)
        self.frames = {}
        for triple in TRIPLES:
            for pair in ((triple[0], triple[1]), (triple[0], triple[2]), (triple[1], triple[2])):
                self.frames[(pair, triple)] = _arc_frame(self.cone, pair, triple)
        self.patches = self._build_patches()
        self._build_cores()

    # ---- patches
    def _build_patches(self):
        spec, interp = self.spec, self.interp
        r = spec.r_star
        patches = []
        for (pair, triple), frame in self.frames.items():
            tag = f"{pair[0] + 1}{pair[1] + 1}@{''.join(str(t + 1) for t in triple)}"
            x_bar = spec.x_bar_for(*pair)

            def ev_trough(x, y, x_bar=x_bar):
                return trough_point(spec, x, y, x_bar), trough_normal(spec, x, y, x_bar)

            def ev_interp(t, y):
                return interp_point(spec, y, t, interp), interp_normal(spec, y, t, interp)

            patches.append(
                SurfacePatch("trough", f"trough_{tag}", frame, (2 * r, x_bar), (-r / 2, r / 2), ev_trough)
            )
            patches.append(
                SurfacePatch("interpolation", f"interp_{tag}", frame, (0.0, 1.0), (-r / 2, r / 2), ev_interp)
            )
        for triple in TRIPLES:
            frame = self.valley_frame(triple)

            def ev_valley(theta, phi):
                return valley_point(spec, theta, phi), valley_normal(spec, theta, phi)

            patches.append(
                SurfacePatch(
                    "valley",
                    f"valley_{''.join(str(t + 1) for t in triple)}",
                    frame,
                    (0.0, np.pi / 2),
                    (0.0, 2 * np.pi),
                    ev_valley,
                )
            )
        return patches

    @property
    def bounding_radius(self) -> float:
        return self.spec.outer_radius

    def valley_frame(self, triple) -> Frame:
        triple = tuple(sorted(triple))
        return self.frames[((triple[0], triple[1]), triple)]

    def patches_of(self, kind):
        return [p for p in self.patches if p.kind == kind]

    # ---- pipe cores and implicit field
    def _build_cores(self):
        interp, r = self.interp, self.spec.r_star
        t = np.linspace(0.0, 1.0, self.core_samples)
        P, _, N = _interp_frame(interp, t)
        core_local = P + r * N  # starts at the valley centre
        verts, owner = [], []
        for k, ((pair, triple), frame) in enumerate(self.frames.items()):
            verts.append(frame.to_world(core_local))
            owner.append(np.full(len(t), k))
        self._core_verts = np.vstack(verts)
        self._core_owner = np.concatenate(owner)
        self._core_tree = cKDTree(self._core_verts, balanced_tree=False, compact_nodes=False)
        self._tori = []
        s0 = np.arcsin(2 * r)
        for i, j in PAIRS:
            k, l = sorted(set(range(4)) - {i, j})
            qa = self.cone.rays[tuple(sorted((i, j, k)))]
            qb = self.cone.rays[tuple(sorted((i, j, l)))]
            theta = self.cone.arc_angle(i, j)
            e2 = qb - (qb @ qa) * qa
            e2 /= np.linalg.norm(e2)
            start = np.cos(s0) * qa + np.sin(s0) * e2
            end = np.cos(theta - s0) * qa + np.sin(theta - s0) * e2
            normal = np.cross(qa, e2)
            self._tori.append((normal, start, end))

    def carve_distance(self, points):
        """Signed distance-like field of the pipe union (< 0 inside a pipe)."""
        points = np.atleast_2d(np.asarray(points, float))
        r = self.spec.r_star
        # once d - r >= 2 * blend the smooth min keeps the sign and the zero
        # level of the outer term, so farther points skip the refinement
        cutoff = r + 2.0 * self.spec.blend + 0.01
        d = _polyline_distance(points, self._core_tree, self._core_verts, self._core_owner, cutoff)
        for normal, start, end in self._tori:
            d = np.minimum(d, _circle_arc_distance(points, normal, start, end, 1.0 + r))
        return d - r

    def pipe_distances(self, points):
        """Per-pipe distances (an array of 6 columns, arcs in PAIRS order),
        used to decide which arc's pipe carves a point."""
        points = np.atleast_2d(np.asarray(points, float))
        r = self.spec.r_star
        out = np.empty((len(points), 6))
        keys = list(self.frames)
        for col, (i, j) in enumerate(PAIRS):
            sel = [n for n, (pair, _) in enumerate(keys) if pair == (i, j)]
            mask = np.isin(self._core_owner, sel)
            verts = self._core_verts[mask]
            owner = self._core_owner[mask]
            d = _polyline_distance(points, cKDTree(verts, balanced_tree=False), verts, owner)
            normal, start, end = self._tori[col]
            d = np.minimum(d, _circle_arc_distance(points, normal, start, end, 1.0 + r))
            out[:, col] = d - r
        return out

    def field(self, points):
        """Positive inside the domain, negative outside, zero on the boundary."""
        points = np.atleast_2d(np.asarray(points, float))
        outer = self.spec.outer_radius - np.linalg.norm(points, axis=1)
        return smooth_min(self.carve_distance(points), outer, self.spec.blend)

    def inside(self, points, chunk=400_000):
        points = np.atleast_2d(np.asarray(points, float))
        out = np.empty(len(points), dtype=bool)
        for s in range(0, len(points), chunk):
            out[s : s + chunk] = self.field(points[s : s + chunk]) > 0
        return out

    # ---- verification helpers
    def footprint_samples(self, n=41, width=None):
        """Exact patch samples restricted to |y| <= width (default eta):
        yields (patch, points, normals, y_signed_local)."""
        width = self.spec.eta if width is None else width
        for patch in self.patches:
            if patch.kind == "valley":
                pts, nrm, _, _ = patch.sample(n, 4 * n)
                pts, nrm = pts.reshape(-1, 3), nrm.reshape(-1, 3)
                yield patch, pts, nrm, None
            else:
                u = np.linspace(*patch.u_range, n)
                v = np.linspace(-width, width, n)
                uu, vv = np.meshgrid(u, v, indexing="ij")
                if patch.kind == "trough":
                    p, q = patch.evaluate(uu, vv)
                else:
                    p, q = patch.evaluate(uu, vv)
                yield patch, patch.frame.to_world(p).reshape(-1, 3), patch.frame.to_world(q).reshape(-1, 3), vv.ravel()

    def overlap_check(self, n=41, tol=1e-9):
        """Raise PatchOverlap when an exact footprint is not part of the
        boundary: carved by a foreign pipe, touched by the outer blend, or
        crossing into a region other than its own two."""
        spec = self.spec
        worst = {}
        keys = list(self.frames)
        for patch, pts, _, _ in self.footprint_samples(n):
            dists = self.pipe_distances(pts)
            if patch.kind == "valley":
                own = [PAIRS.index(pair) for pair, tri in keys if tri == patch.frame.triple]
            else:
                own = [PAIRS.index(patch.frame.pair)]
            foreign = np.delete(dists, own, axis=1).min(axis=1)
            outer_gap = spec.outer_radius - np.linalg.norm(pts, axis=1) - spec.blend
            lab = self.cone.region_of(pts)
            if patch.kind == "valley":
                allowed = np.isin(lab - 1, patch.frame.triple)
            else:
                allowed = np.isin(lab - 1, patch.frame.pair)
            # points on a valley floor are allowed to touch the neighbouring pipes there
            worst[patch.name] = (float(foreign.min()), float(outer_gap.min()), bool(np.all(allowed)))
            if foreign.min() < -tol:
                raise PatchOverlap(
                    f"{patch.name}: footprint carved by a foreign pipe (depth {-foreign.min():.3g}); "
                    f"reduce eta or r_star"
                )
            if outer_gap.min() < 0:
                raise PatchOverlap(f"{patch.name}: footprint reaches the outer sphere blend; increase lambda")
            if not np.all(allowed):
                raise PatchOverlap(f"{patch.name}: footprint crosses into a third region; reduce eta")
        return worst


def assemble_surface(spec: DomainSpec, interp: Interpolant | None = None):
    """Build the domain and its seam report. Returns ``(domain, seams)``."""
    dom = Domain(spec, interp)
    dom.overlap_check()
    return dom, seam_report(dom)


def _angle(a, b):
    c = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    # acos is ill-conditioned near 1; use the cross-product norm there
    s = np.linalg.norm(np.cross(a, b), axis=-1)
    return np.arctan2(s, c)


def seam_report(dom: Domain, samples=1000) -> dict:
    """Max position gap and normal angle across every patch seam."""
    spec, interp = dom.spec, dom.interp
    r = spec.r_star
    y = np.linspace(-r / 2, r / 2, samples)
    rep = {}

    def record(kind, gap, ang):
        g, a = rep.get(kind, (0.0, 0.0))
        rep[kind] = (max(g, float(gap.max())), max(a, float(ang.max())))

    for (pair, triple), frame in dom.frames.items():
        # arch <-> valley rim
        p_i = interp_point(spec, y, 0.0, interp)
        n_i = interp_normal(spec, y, np.zeros_like(y), interp)
        phi = np.arctan2(p_i[:, 1], p_i[:, 0])
        p_v = valley_point(spec, np.pi / 2, phi)
        n_v = valley_normal(spec, np.pi / 2, phi)
        record("interpolation-valley", np.linalg.norm(p_i - p_v, axis=1), _angle(n_i, n_v))
        # arch <-> trough
        p_i = interp_point(spec, y, 1.0, interp)
        n_i = interp_normal(spec, y, np.ones_like(y), interp)
        x0 = np.full_like(y, 2 * r)
        p_t = trough_point(spec, x0, y, spec.x_bar_for(*pair))
        n_t = trough_normal(spec, x0, y, spec.x_bar_for(*pair))
        record("trough-interpolation", np.linalg.norm(p_i - p_t, axis=1), _angle(n_i, n_t))
    # trough half <-> trough half at x_bar, only when the halves meet
    for i, j in PAIRS:
        k, l = sorted(set(range(4)) - {i, j})
        fa = dom.frames[((i, j), tuple(sorted((i, j, k))))]
        fb = dom.frames[((i, j), tuple(sorted((i, j, l))))]
        x_bar = spec.x_bar_for(i, j)
        if not np.isclose(x_bar, np.sin(0.5 * dom.cone.arc_angle(i, j))):
            continue
        xs = np.full_like(y, x_bar)
        pa = fa.to_world(trough_point(spec, xs, y, x_bar))
        na = fa.to_world(trough_normal(spec, xs, y, x_bar))
        ys = (pa @ fb.rot)[:, 1]
        pb = fb.to_world(trough_point(spec, xs, np.clip(ys, -r / 2, r / 2), x_bar))
        nb = fb.to_world(trough_normal(spec, xs, np.clip(ys, -r / 2, r / 2), x_bar))
        record("trough-trough", np.linalg.norm(pa - pb, axis=1), _angle(na, nb))
    return {k: {"max_gap": v[0], "max_normal_angle": v[1]} for k, v in rep.items()}


def goodnormals_check(dom: Domain, n=61, on_tol=1e-8, raise_on_fail=True) -> dict:
    """Sign test of n_ij . nu near every curve gamma_ij on the exact patches.

    Off the curve the value must be strictly positive on the S_i side;
    on the curve (|y| = 0) it must vanish to ``on_tol``.
    """
    spec, cone = dom.spec, dom.cone
    eta = spec.eta
    min_margin = np.inf
    min_ratio = np.inf
    max_on = 0.0
    worst = None
    count = 0
    for patch, pts, nrm, yloc in dom.footprint_samples(n):
        lab = cone.region_of(pts) - 1
        if patch.kind == "valley":
            pairs = [(a, b) for a in patch.frame.triple for b in patch.frame.triple if a < b]
        else:
            pairs = [patch.frame.pair]
        for i, j in pairs:
            nij = cone.normals[i, j]
            dist = pts @ nij  # signed distance to plane ij (< 0 on the S_i side)
            sel = np.isin(lab, (i, j)) & (np.abs(dist) < eta)
            if patch.kind != "valley":
                sel &= np.abs(yloc) < eta
            if not np.any(sel):
                continue
            sgn = np.where(lab[sel] == i, 1.0, -1.0)
            val = sgn * (nrm[sel] @ nij)
            d = np.abs(dist[sel])
            on = d < 1e-12
            count += int(sel.sum())
            if np.any(on):
                max_on = max(max_on, float(np.abs(val[on]).max()))
            off = ~on
            if np.any(off):
                k = int(np.argmin(val[off]))
                if val[off][k] < min_margin:
                    min_margin = float(val[off][k])
                    worst = {"patch": patch.name, "pair": (i + 1, j + 1), "point": pts[sel][off][k].tolist()}
                min_ratio = min(min_ratio, float(np.min(val[off] / d[off])))
    report = {
        "samples": count,
        "min_margin": min_margin,
        "min_margin_per_distance": min_ratio,
        "max_on_curve": max_on,
        "worst": worst,
        "ok": bool(min_margin > 0 and max_on < on_tol),
    }
    if raise_on_fail and not report["ok"]:
        raise GoodnormalsViolation(f"goodnormals fails: {report}", worst)
    return report
