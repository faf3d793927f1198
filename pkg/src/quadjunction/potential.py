"""Multi-well potentials W: R^3 -> [0, inf) vanishing exactly on four wells."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


def regular_wells(scale=1.0) -> np.ndarray:
    """Vertices of a regular tetrahedron with circumradius ``scale``."""
    v = np.array([[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]])
    return scale * v / np.sqrt(3.0)


@dataclass(frozen=True)
class Potential:
    """Product potential W(u) = prod_i |u - p_i|^2 / normalization."""

    wells: np.ndarray
    normalization: float = 1.0

    def __post_init__(self):
        p = np.asarray(self.wells, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3 or len(p) < 2:
            raise ValidationError("wells must be an (n, 3) array with n >= 2")
        gaps = np.linalg.norm(p[:, None] - p[None], axis=-1) + np.eye(len(p))
        if gaps.min() <= 0:
            raise ValidationError("wells must be distinct")
        if not self.normalization > 0:
            raise ValidationError("normalization must be positive")
        object.__setattr__(self, "wells", p)

    @property
    def max_gap(self) -> float:
        p = self.wells
        return float(np.linalg.norm(p[:, None] - p[None], axis=-1).max())

    def evaluate(self, u):
        u = np.asarray(u, dtype=float)
        d2 = np.sum((u[..., None, :] - self.wells) ** 2, axis=-1)
        return np.prod(d2, axis=-1) / self.normalization

    def gradient(self, u):
        u = np.asarray(u, dtype=float)
        diff = u[..., None, :] - self.wells
        d2 = np.sum(diff**2, axis=-1)
        n = len(self.wells)
        out = np.zeros(u.shape)
        for i in range(n):
            others = np.prod(np.delete(d2, i, axis=-1), axis=-1)
            out += 2.0 * diff[..., i, :] * others[..., None]
        return out / self.normalization

    def nearest_well(self, u) -> np.ndarray:
        """0-based index of the closest well."""
        d2 = np.sum((np.asarray(u)[..., None, :] - self.wells) ** 2, axis=-1)
        return np.argmin(d2, axis=-1)


@dataclass(frozen=True)
class SeparablePotential:
    """W(u) = f(u_1) for a scalar profile; used by 1D-reducible tests."""

    wells: np.ndarray
    f: object
    df: object

    def evaluate(self, u):
        return self.f(np.asarray(u, float)[..., 0])

    def gradient(self, u):
        u = np.asarray(u, float)
        out = np.zeros(u.shape)
        out[..., 0] = self.df(u[..., 0])
        return out

    @property
    def max_gap(self) -> float:
        p = np.asarray(self.wells)
        return float(np.linalg.norm(p[:, None] - p[None], axis=-1).max())

    def nearest_well(self, u):
        d2 = np.sum((np.asarray(u)[..., None, :] - self.wells) ** 2, axis=-1)
        return np.argmin(d2, axis=-1)


def double_well_1d() -> SeparablePotential:
    """W(u) = (1 - u_1)^2 (1 + u_1)^2 / 2 with wells at -e_1 and +e_1."""
    return SeparablePotential(
        wells=np.array([[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
        f=lambda s: 0.5 * (1 - s * s) ** 2,
        df=lambda s: -2.0 * s * (1 - s * s),
    )


def default_potential(cone_scale=1.0, normalization=1.0) -> Potential:
    if not cone_scale > 0:
        raise ValidationError(f"cone_scale must be positive, got {cone_scale}")
    return Potential(regular_wells(cone_scale), normalization)
