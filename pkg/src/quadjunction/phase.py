"""Vector Allen-Cahn relaxation on a masked voxel grid.

The discrete energy is

    E = sum_faces (eps / 2) h |u_a - u_b|^2 + sum_voxels h^3 W(u) / eps

over faces between two inside voxels, so missing neighbours are exactly a
zero-flux (mirror ghost) Neumann condition. Its gradient with respect to
the h^3-weighted inner product is -(eps Lap_h u - W_u(u) / eps), and the
explicit step u += dt (eps Lap_h u - W_u / eps) is gradient descent on E.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import ndimage

from .errors import EnergyIncrease, NonStationary, ResolutionTooCoarse, ValidationError
from .grid import OccupancyGrid
from .potential import Potential

logger = logging.getLogger(__name__)

# the portable pool; avoids version probing of optional TBB installs
numba.config.THREADING_LAYER = "workqueue"


# --------------------------------------------------------------------------
# masked lattice


@dataclass
class Lattice:
    """Inside voxels of a grid in compact form."""

    grid: OccupancyGrid
    index: np.ndarray  # flat grid index of each inside voxel
    neighbors: np.ndarray  # (M, 6) compact index of -x,+x,-y,+y,-z,+z neighbour or -1
    labels: np.ndarray  # (M,) region labels 1..4

    @classmethod
    def from_grid(cls, grid: OccupancyGrid) -> "Lattice":
        ins = grid.inside
        flat = np.flatnonzero(ins.ravel())
        compact = np.full(ins.size, -1, dtype=np.int64)
        compact[flat] = np.arange(len(flat))
        compact = compact.reshape(ins.shape)
        nb = np.full((len(flat), 6), -1, dtype=np.int64)
        coords = np.unravel_index(flat, ins.shape)
        for axis in range(3):
            for side, step in enumerate((-1, 1)):
                c = [x.copy() for x in coords]
                c[axis] = c[axis] + step
                ok = (c[axis] >= 0) & (c[axis] < ins.shape[axis])
                col = np.full(len(flat), -1, dtype=np.int64)
                col[ok] = compact[tuple(x[ok] for x in c)]
                nb[:, 2 * axis + side] = col
        return cls(grid, flat, nb, grid.label.ravel()[flat].astype(np.int8))

    @property
    def size(self) -> int:
        return len(self.index)

    @property
    def h(self) -> float:
        return self.grid.h

    def to_grid(self, u) -> np.ndarray:
        out = np.zeros((self.grid.label.size,) + np.shape(u)[1:])
        out[self.index] = u
        return out.reshape(self.grid.dims + np.shape(u)[1:])

    def interior(self) -> np.ndarray:
        return np.all(self.neighbors >= 0, axis=1)

    def laplacian(self, u) -> np.ndarray:
        h2 = self.h**2
        lap = np.zeros_like(u)
        for k in range(6):
            nb = self.neighbors[:, k]
            ok = nb >= 0
            lap[ok] += u[nb[ok]] - u[ok]
        return lap / h2


# --------------------------------------------------------------------------
# fields


@dataclass
class PhaseField:
    lattice: Lattice
    u: np.ndarray  # (M, 3)
    epsilon: float

    @property
    def grid(self):
        return self.lattice.grid

    def copy(self) -> "PhaseField":
        return PhaseField(self.lattice, self.u.copy(), self.epsilon)

    def on_grid(self) -> np.ndarray:
        return self.lattice.to_grid(self.u)


def _check_eps(epsilon, h):
    if not epsilon >= 3.0 * h * (1 - 1e-12):
        raise ResolutionTooCoarse(f"epsilon={epsilon:.4g} is below 3h={3 * h:.4g}")


def initialize_from_partition(part: OccupancyGrid, pot, epsilon, mollify=False, lattice=None) -> PhaseField:
    """u = p_label on every inside voxel; optionally mollified over epsilon by
    a normalized Gaussian average of the well values over inside voxels."""
    _check_eps(epsilon, part.h)
    lat = lattice or Lattice.from_grid(part)
    wells = np.asarray(pot.wells)
    u = wells[lat.labels - 1].astype(float)
    if mollify:
        sigma = 0.5 * epsilon / part.h
        ins = part.inside.astype(float)
        weight = ndimage.gaussian_filter(ins, sigma, mode="constant")
        acc = np.zeros(part.dims + (3,))
        for k in range(len(wells)):
            chi = ndimage.gaussian_filter((part.label == k + 1).astype(float), sigma, mode="constant")
            acc += chi[..., None] * wells[k]
        u = (acc / np.maximum(weight, 1e-300)[..., None]).reshape(-1, 3)[lat.index]
    return PhaseField(lat, u, float(epsilon))


def reference_field(f: PhaseField, pot) -> np.ndarray:
    """u0 = p_label on the lattice."""
    return np.asarray(pot.wells)[f.lattice.labels - 1].astype(float)


def l1_distance(f: PhaseField, u0) -> float:
    return float(np.sum(np.linalg.norm(f.u - u0, axis=1)) * f.lattice.h**3)


# --------------------------------------------------------------------------
# energy and gradient


def energy(f: PhaseField, pot) -> float:
    lat, u, eps, h = f.lattice, f.u, f.epsilon, f.lattice.h
    grad_part = 0.0
    for k in (1, 3, 5):
        nb = lat.neighbors[:, k]
        ok = nb >= 0
        grad_part += float(np.sum((u[nb[ok]] - u[ok]) ** 2))
    return 0.5 * eps * h * grad_part + h**3 * float(np.sum(pot.evaluate(u))) / eps


def flow_direction(f: PhaseField, pot) -> np.ndarray:
    """eps Lap_h u - W_u(u) / eps (the negative h^3-weighted gradient)."""
    return f.epsilon * f.lattice.laplacian(f.u) - pot.gradient(f.u) / f.epsilon


def pde_residual(f: PhaseField, pot) -> float:
    """sup over voxels with all six neighbours inside of |eps^2 Lap u - W_u|."""
    r = f.epsilon**2 * f.lattice.laplacian(f.u) - pot.gradient(f.u)
    inner = f.lattice.interior()
    if not np.any(inner):
        return 0.0
    return float(np.abs(r[inner]).max())


@numba.njit(cache=True, parallel=True)
def _step_product(u, nb, wells, norm, eps, h, dt, out, e_face, e_pot, du_max):
    m = u.shape[0]
    nw = wells.shape[0]
    inv_h2 = 1.0 / (h * h)
    for a in numba.prange(m):
        lap0 = 0.0
        lap1 = 0.0
        lap2 = 0.0
        ef = 0.0
        for k in range(6):
            b = nb[a, k]
            if b >= 0:
                d0 = u[b, 0] - u[a, 0]
                d1 = u[b, 1] - u[a, 1]
                d2 = u[b, 2] - u[a, 2]
                lap0 += d0
                lap1 += d1
                lap2 += d2
                if k % 2 == 1:
                    ef += d0 * d0 + d1 * d1 + d2 * d2
        # product potential and its gradient
        wval = 1.0
        g0 = 0.0
        g1 = 0.0
        g2 = 0.0
        for i in range(nw):
            x0 = u[a, 0] - wells[i, 0]
            x1 = u[a, 1] - wells[i, 1]
            x2 = u[a, 2] - wells[i, 2]
            di = x0 * x0 + x1 * x1 + x2 * x2
            others = 1.0
            for j in range(nw):
                if j != i:
                    y0 = u[a, 0] - wells[j, 0]
                    y1 = u[a, 1] - wells[j, 1]
                    y2 = u[a, 2] - wells[j, 2]
                    others *= y0 * y0 + y1 * y1 + y2 * y2
            g0 += 2.0 * x0 * others
            g1 += 2.0 * x1 * others
            g2 += 2.0 * x2 * others
            wval *= di
        v0 = eps * lap0 * inv_h2 - g0 / (norm * eps)
        v1 = eps * lap1 * inv_h2 - g1 / (norm * eps)
        v2 = eps * lap2 * inv_h2 - g2 / (norm * eps)
        out[a, 0] = u[a, 0] + dt * v0
        out[a, 1] = u[a, 1] + dt * v1
        out[a, 2] = u[a, 2] + dt * v2
        e_face[a] = ef
        e_pot[a] = wval / norm
        du_max[a] = dt * max(abs(v0), max(abs(v1), abs(v2)))


class _Stepper:
    """One explicit step; returns (new u, energy of old u, max update)."""

    def __init__(self, f: PhaseField, pot, dt):
        self.f = f
        self.pot = pot
        self.dt = dt
        self.fast = isinstance(pot, Potential)
        m = f.lattice.size
        if self.fast:
            self.buf = np.empty_like(f.u)
            self.e_face = np.empty(m)
            self.e_pot = np.empty(m)
            self.du = np.empty(m)

    def __call__(self, u):
        f, eps, h, dt = self.f, self.f.epsilon, self.f.lattice.h, self.dt
        if self.fast:
            _step_product(
                u, f.lattice.neighbors, self.pot.wells, self.pot.normalization, eps, h, dt,
                self.buf, self.e_face, self.e_pot, self.du,
            )
            e = 0.5 * eps * h * float(np.sum(self.e_face)) + h**3 * float(np.sum(self.e_pot)) / eps
            new = self.buf.copy()
            return new, e, float(self.du.max()) if len(self.du) else 0.0
        probe = PhaseField(f.lattice, u, eps)
        e = energy(probe, self.pot)
        v = flow_direction(probe, self.pot)
        return u + dt * v, e, float(np.abs(dt * v).max()) if len(v) else 0.0


# --------------------------------------------------------------------------
# relaxation


@dataclass
class Schedule:
    dt_factor: float = 0.5
    tol: float | None = None  # max-norm update threshold; default 1e-7 * max well gap
    max_iter: int = 200_000
    check_every: int = 1
    hull_every: int = 100


@dataclass
class EnergyReport:
    E_eps: float
    E0_ref: float
    L1_dist: float
    residual: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)  # rows (iteration, E_eps, residual, L1_dist)
    hull_excursion: float = 0.0


def stable_dt(f: PhaseField, factor=0.5) -> float:
    return factor * f.lattice.h**2 / (6.0 * f.epsilon)


def _hull_excursion(u, wells):
    """Smallest barycentric coordinate relative to the well simplex, after
    shrinking by 1/1.1 about the centroid (>= 0 means inside the hull
    inflated by 10%)."""
    if len(wells) != 4:
        return 0.0
    c = wells.mean(axis=0)
    T = (wells[1:] - wells[0]).T
    x = c + (u - c) / 1.1
    lam = np.linalg.solve(T, (x - wells[0]).T).T
    bary = np.column_stack([1.0 - lam.sum(axis=1), lam])
    return float(bary.min())


def relax(f: PhaseField, pot, schedule: Schedule | None = None, u0=None, E0_ref=np.nan, trace_every=1):
    """Explicit L2 gradient flow until the max update falls below ``tol``.

    The energy is checked every step; an increase raises EnergyIncrease.
    Reaching the iteration cap emits a NonStationary warning.
    """
    sch = schedule or Schedule()
    dt = stable_dt(f, sch.dt_factor)
    tol = sch.tol if sch.tol is not None else 1e-7 * pot.max_gap
    u0 = reference_field(f, pot) if u0 is None else u0
    wells = np.asarray(pot.wells)
    step = _Stepper(f, pot, dt)
    u = f.u.copy()
    trace = []
    prev = np.inf
    converged = False
    worst_hull = _hull_excursion(u, wells)
    it = 0
    for it in range(1, sch.max_iter + 1):
        new, e_old, du = step(u)
        if e_old > prev + 1e-12 * max(abs(prev), 1.0):
            raise EnergyIncrease(f"energy rose from {prev:.12g} to {e_old:.12g} at iteration {it - 1}")
        prev = e_old
        if (it - 1) % trace_every == 0:
            trace.append((it - 1, e_old, f.epsilon * du / dt, float(np.sum(np.linalg.norm(u - u0, axis=1)) * f.lattice.h**3)))
        u = new
        if sch.hull_every and it % sch.hull_every == 0:
            worst_hull = min(worst_hull, _hull_excursion(u, wells))
        if du < tol:
            converged = True
            break
    out = PhaseField(f.lattice, u, f.epsilon)
    e_final = energy(out, pot)
    if e_final > prev + 1e-12 * max(abs(prev), 1.0):
        raise EnergyIncrease(f"energy rose from {prev:.12g} to {e_final:.12g} on the last step")
    l1 = l1_distance(out, u0)
    trace.append((it, e_final, pde_residual(out, pot), l1))
    if not converged:
        warnings.warn(NonStationary(f"iteration cap {sch.max_iter} reached, last update {du:.3g} > tol {tol:.3g}"), stacklevel=2)
    report = EnergyReport(
        E_eps=e_final,
        E0_ref=float(E0_ref),
        L1_dist=l1,
        residual=pde_residual(out, pot),
        iterations=it,
        converged=converged,
        trace=trace,
        hull_excursion=min(worst_hull, _hull_excursion(u, wells)),
    )
    return out, report


# --------------------------------------------------------------------------
# diagnostics


def quadruple_junction_fraction(f: PhaseField, pot, margin=2.0) -> float:
    """Fraction of voxels farther than ``margin * eps`` from every interface
    of the labeled partition whose nearest well matches their label."""
    grid = f.grid
    lab = grid.label
    far = np.zeros(grid.dims, dtype=bool)
    for k in range(1, 5):
        region = lab == k
        if not np.any(region):
            continue
        # distance to the nearest inside voxel with a different label
        other = grid.inside & ~region
        if not np.any(other):
            far |= region
            continue
        d = ndimage.distance_transform_edt(~other) * grid.h
        far |= region & (d > margin * f.epsilon)
    sel = far.ravel()[f.lattice.index]
    if not np.any(sel):
        return float("nan")
    nearest = pot.nearest_well(f.u[sel]) + 1
    return float(np.mean(nearest == f.lattice.labels[sel]))


def gamma_diagnostics(runs, E0_ref, noise=0.10) -> dict:
    """Table of (eps, E_eps, relative energy gap, L1 distance) for a
    decreasing epsilon sequence, with monotonicity checks on both gap
    columns (each entry may exceed its predecessor by ``noise`` relative)."""
    if len(runs) < 3:
        raise ValidationError("need at least three epsilon values")
    eps = [r["epsilon"] for r in runs]
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValidationError("epsilon values must be strictly decreasing")
    rows = []
    for r in runs:
        gap = abs(r["E_eps"] - E0_ref) / E0_ref if E0_ref else float("nan")
        rows.append({"epsilon": r["epsilon"], "E_eps": r["E_eps"], "energy_gap": gap, "L1_dist": r["L1_dist"]})

    def monotone(col):
        vals = [row[col] for row in rows]
        return all(b <= a * (1 + noise) + 1e-300 for a, b in zip(vals, vals[1:]))

    l1 = [row["L1_dist"] for row in rows]
    return {
        "rows": rows,
        "energy_gap_monotone": monotone("energy_gap"),
        "L1_monotone": monotone("L1_dist"),
        "L1_strictly_decreasing": all(b < a for a, b in zip(l1, l1[1:])),
    }


def write_trace_csv(path, report: EnergyReport):
    with open(path, "w") as fh:
        fh.write("iteration,E_eps,residual,L1_dist\n")
        for it, e, du, l1 in report.trace:
            fh.write(f"{it},{e:.12g},{du:.6g},{l1:.12g}\n")
