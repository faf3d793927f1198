"""Weighted tetrahedral cones.

Four phase weights c_1..c_4 define interface tensions c_ij = c_i + c_j. A
tetrahedron with edge lengths c_ij is embedded with its circumcenter at the
origin; the planes through the origin with normals
n_ij = (A_j - A_i) / c_ij then partition space into four cones that satisfy
the weighted balance law c_ij n_ij + c_jk n_jk + c_ki n_ki = 0 along every
triple-junction ray.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations, permutations

import numpy as np

from .errors import ClosenessViolation, NotPositiveDefinite, ValidationError

PAIRS = tuple(combinations(range(4), 2))
TRIPLES = tuple(combinations(range(4), 3))

TIE_TOL = 1e-12


@dataclass(frozen=True)
class WeightSet:
    """Phase weights ``c`` (length 4) and the pairwise table ``cij``.

    Indices are 0-based internally; public region labels are 1..4.
    """

    c: np.ndarray
    cij: np.ndarray

    @classmethod
    def from_pairwise(cls, cij, check_closeness=True):
        """Build from a symmetric 4x4 table by least-squares splitting.

        Returns ``(weights, residual)`` where ``residual`` is the max abs
        misfit of c_i + c_j against the given table.
        """
        cij = np.asarray(cij, dtype=float)
        rows = np.zeros((6, 4))
        rhs = np.zeros(6)
        for k, (i, j) in enumerate(PAIRS):
            rows[k, i] = rows[k, j] = 1.0
            rhs[k] = cij[i, j]
        c, *_ = np.linalg.lstsq(rows, rhs, rcond=None)
        residual = float(np.max(np.abs(rows @ c - rhs)))
        table = cij.copy()
        np.fill_diagonal(table, 0.0)
        w = cls(c=c, cij=table)
        if check_closeness:
            check_close(c)
        return w, residual

    @property
    def c_min(self) -> float:
        return float(self.c.min())

    @property
    def c_max(self) -> float:
        return float(self.c.max())

    def scaled(self, t: float) -> "WeightSet":
        return WeightSet(c=self.c * t, cij=self.cij * t)


def check_close(c) -> None:
    """Raise ClosenessViolation unless c_i > c_j / 2 for all i != j."""
    c = np.asarray(c, dtype=float)
    for i, j in permutations(range(4), 2):
        if not c[i] > 0.5 * c[j]:
            raise ClosenessViolation(
                f"closeness fails: c{i + 1}={c[i]:g} <= c{j + 1}/2={0.5 * c[j]:g}"
            )


def build_weights(c1, c2, c3, c4) -> WeightSet:
    c = np.array([c1, c2, c3, c4], dtype=float)
    if not np.all(np.isfinite(c)) or np.any(c <= 0):
        raise ValidationError(f"weights must be finite and positive, got {c.tolist()}")
    check_close(c)
    cij = c[:, None] + c[None, :]
    np.fill_diagonal(cij, 0.0)
    return WeightSet(c=c, cij=cij)


@dataclass(frozen=True)
class GramMatrix:
    m: np.ndarray
    minors: tuple

    @property
    def positive_definite(self) -> bool:
        return all(d > 0 for d in self.minors)


def _pairwise_table(w) -> np.ndarray:
    if isinstance(w, WeightSet):
        return w.cij
    cij = np.asarray(w, dtype=float)
    if cij.shape != (4, 4):
        raise ValidationError("pairwise table must be 4x4")
    return cij


def gram_matrix(w, *, strict=True) -> GramMatrix:
    """The 3x3 matrix M with M = 2 G, G the Gram matrix of A_{j+1} - A_1.

    Accepts a WeightSet or a raw symmetric 4x4 table of edge lengths, so
    degenerate tables that no weight set produces can still be examined.
    """
    d2 = _pairwise_table(w) ** 2
    m = np.empty((3, 3))
    for a in range(3):
        for b in range(3):
            i, j = a + 1, b + 1
            m[a, b] = d2[0, i] + d2[0, j] - d2[i, j]
    minors = (m[0, 0], m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0], float(np.linalg.det(m)))
    # relative scale for the "numerically zero" decision
    scale = np.max(np.abs(m)) or 1.0
    minors = tuple(float(v) for v in minors)
    g = GramMatrix(m=m, minors=minors)
    if strict:
        tol = (1e-12 * scale, 1e-12 * scale**2, 1e-12 * scale**3)
        bad = [k + 1 for k, (d, t) in enumerate(zip(minors, tol)) if d <= t]
        if bad:
            raise NotPositiveDefinite(
                f"leading principal minors {bad} of M are not positive: {minors}"
            )
    return g


@dataclass(frozen=True)
class TetrahedralCone:
    """Circumcentered tetrahedron and derived cone data.

    ``vertices[i]`` is A_{i+1}; ``normals[i, j]`` is n_ij (zero on the
    diagonal); ``rays`` maps a sorted 0-based triple to its unit junction
    direction.
    """

    weights: WeightSet
    vertices: np.ndarray
    radius: float
    normals: np.ndarray
    rays: dict = field(default_factory=dict)

    def region_of(self, x) -> np.ndarray | int:
        return region_of(self, x)

    def junction_ray(self, i, j, k) -> np.ndarray:
        return junction_ray(self, i, j, k)

    def balance_residuals(self) -> dict:
        out = {}
        c = self.weights.cij
        n = self.normals
        for i, j, k in TRIPLES:
            v = c[i, j] * n[i, j] + c[j, k] * n[j, k] + c[k, i] * n[k, i]
            out[(i, j, k)] = float(np.linalg.norm(v))
        return out

    def complement(self, *idx) -> int:
        (rest,) = set(range(4)) - set(idx)
        return rest

    def arc_angle(self, i, j) -> float:
        """Angle subtended at the origin by the arc between both rays of plane ij."""
        k, l = sorted(set(range(4)) - {i, j})
        a = self.rays[tuple(sorted((i, j, k)))]
        b = self.rays[tuple(sorted((i, j, l)))]
        return float(np.arccos(np.clip(a @ b, -1.0, 1.0)))


def embed_cone(w: WeightSet) -> TetrahedralCone:
    g = gram_matrix(w)
    # rows of the Cholesky factor of M/2 are the edge vectors A_{j+1} - A_1
    lower = np.linalg.cholesky(0.5 * g.m)
    a = np.vstack([np.zeros(3), lower])
    edges = a[1:]
    center = np.linalg.solve(2.0 * edges, np.sum(edges**2, axis=1))
    a = a - center
    radius = float(np.mean(np.linalg.norm(a, axis=1)))

    cij = w.cij
    normals = np.zeros((4, 4, 3))
    for i in range(4):
        for j in range(4):
            if i != j:
                normals[i, j] = (a[j] - a[i]) / cij[i, j]

    rays = {}
    for tri in TRIPLES:
        i, j, k = tri
        (l,) = set(range(4)) - set(tri)
        v = np.cross(a[j] - a[i], a[k] - a[i])
        v /= np.linalg.norm(v)
        if a[i] @ v < a[l] @ v:
            v = -v
        rays[tri] = v
    return TetrahedralCone(weights=w, vertices=a, radius=radius, normals=normals, rays=rays)


def junction_ray(cone: TetrahedralCone, i, j, k) -> np.ndarray:
    """Unit direction of the ray shared by regions i, j, k (0-based)."""
    key = tuple(sorted((i, j, k)))
    if len(set(key)) != 3 or not all(0 <= t < 4 for t in key):
        raise ValidationError(f"need three distinct indices in 0..3, got {(i, j, k)}")
    return cone.rays[key].copy()


def region_scores(cone: TetrahedralCone, x) -> np.ndarray:
    return np.asarray(x, dtype=float) @ cone.vertices.T


def region_of(cone: TetrahedralCone, x):
    """Region label in 1..4 of point(s) ``x``: argmax_i A_i . x.

    Scores within a relative 1e-12 of the maximum count as tied and the
    lowest index wins.
    """
    x = np.asarray(x, dtype=float)
    s = region_scores(cone, x)
    top = s.max(axis=-1, keepdims=True)
    tol = TIE_TOL * cone.radius * np.linalg.norm(x, axis=-1, keepdims=True)
    label = np.argmax(s >= top - tol, axis=-1) + 1
    if x.ndim == 1:
        return int(label)
    return label.astype(np.int8)
