"""Shared experiment setups for the unit and acceptance tests."""

import warnings

import numpy as np

from quadjunction.grid import OccupancyGrid
from quadjunction.phase import Schedule, initialize_from_partition, relax
from quadjunction.sharp import metric_distance

from oracles import heteroclinic_profile

SLAB_H = 1.0 / 32


def slab_run(pot, eps_over_h, i=0, j=1, width=2):
    """Planar two-phase slab: wells p_i | p_j across x = 0, a thin periodic-
    free column of width ``width`` voxels, half-length 8 eps."""
    h = SLAB_H
    nx = int(2 * 8 * eps_over_h)
    nx += nx % 2
    lab = np.full((nx, width, width), i + 1, np.int8)
    lab[nx // 2 :] = j + 1
    g = OccupancyGrid(np.array([-nx * h / 2, 0.0, 0.0]), h, lab)
    eps = eps_over_h * h
    f = initialize_from_partition(g, pot, eps)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out, rep = relax(f, pot, Schedule(max_iter=400_000), trace_every=50)
    p, q = pot.wells[i], pot.wells[j]
    x = g.axis(0)
    profile = out.on_grid()[:, 0, 0, :]
    ref = heteroclinic_profile(pot, p, q, eps, x)
    dev = float(np.abs(profile - ref).max() / np.linalg.norm(p - q))
    d = metric_distance(pot, p, q).action
    area = (width * h) ** 2
    return {
        "E_eps": rep.E_eps,
        "d_area": d * area,
        "energy_rel": rep.E_eps / (d * area) - 1.0,
        "profile_dev": dev,
        "report": rep,
    }
