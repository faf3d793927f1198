"""Command-line pipeline: cone -> domain -> metric -> relax -> verify."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import config as config_mod
from .cone import PAIRS, TRIPLES, WeightSet, build_weights, embed_cone
from .domain import Domain, DomainSpec, goodnormals_check, seam_report
from .errors import QuadJunctionError, ValidationError
from .grid import cone_partition, export_surface, read_vtk_labels, surface_consistency, voxelize, write_vtk_field, write_vtk_labels
from .potential import Potential, default_potential

logger = logging.getLogger("quadjunction")

COMMANDS = ("cone", "domain", "metric", "relax", "verify")


# --------------------------------------------------------------------------
# helpers


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, float) and not np.isfinite(x):
        return None if np.isnan(x) else ("inf" if x > 0 else "-inf")
    return x


def write_json(path, data):
    Path(path).write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"missing artifact {path}; run the earlier pipeline stage first")
    return json.loads(path.read_text())


class Context:
    def __init__(self, cfg, out):
        self.cfg = cfg
        self.out = Path(out)
        self._domain = None
        self._weights = None

    def potential(self) -> Potential:
        p = self.cfg.potential
        if p.wells is not None:
            return Potential(np.asarray(p.wells, float), p.normalization)
        return default_potential(p.well_scale, p.normalization)

    def weights(self) -> WeightSet:
        if self._weights is None:
            w = self.cfg.weights
            if w.mode == "explicit":
                self._weights = build_weights(*w.c)
            else:
                data = read_json(self.out / "cij.json")
                self._weights, _ = WeightSet.from_pairwise(np.array(data["cij"]))
        return self._weights

    def cone(self):
        return embed_cone(self.weights())

    def domain(self) -> Domain:
        if self._domain is None:
            d = self.cfg.domain
            spec = DomainSpec(self.cone(), r_star=d.r_star, lam=d.lam, eta=d.eta, x_bar=d.x_bar)
            self._domain = Domain(spec)
        return self._domain


# --------------------------------------------------------------------------
# commands


def cmd_cone(ctx: Context):
    cone = ctx.cone()
    res = cone.balance_residuals()
    edges = {
        f"{i + 1}{j + 1}": float(np.linalg.norm(cone.vertices[j] - cone.vertices[i])) for i, j in PAIRS
    }
    data = {
        "weights": cone.weights.c,
        "cij": cone.weights.cij,
        "vertices": cone.vertices,
        "circumradius": cone.radius,
        "normals": {f"{i + 1}{j + 1}": cone.normals[i, j] for i in range(4) for j in range(4) if i != j},
        "rays": {"".join(str(t + 1) for t in tri): cone.rays[tri] for tri in TRIPLES},
        "edge_lengths": edges,
        "balance_residuals": {"".join(str(t + 1) for t in k): v for k, v in res.items()},
    }
    write_json(ctx.out / "cone.json", data)
    worst = max(res.values())
    scale = cone.weights.cij.max()
    if worst > 1e-10 * scale:
        raise QuadJunctionError(f"balance residual {worst:.3g} exceeds tolerance")
    logger.info("cone: R=%.12g, max balance residual %.3g", cone.radius, worst)


def cmd_domain(ctx: Context):
    dom = ctx.domain()
    overlap = dom.overlap_check()
    seams = seam_report(dom)
    write_json(ctx.out / "seams.json", seams)
    grid = voxelize(dom, ctx.cfg.domain.dims)
    write_vtk_labels(ctx.out / "grid.vtk", grid)
    export_surface(ctx.out / "surface.obj", dom, grid)
    consistency = surface_consistency(grid, dom)
    spec = dom.spec
    write_json(
        ctx.out / "domain.json",
        {
            "r_star": spec.r_star,
            "lambda": spec.lam,
            "eta": spec.eta,
            "x_bar": {f"{i + 1}{j + 1}": spec.x_bar_for(i, j) for i, j in PAIRS},
            "interpolant_handles": dom.interp.handles,
            "interpolant": dom.interp.check(),
            "dims": grid.dims,
            "spacing": grid.h,
            "origin": grid.origin,
            "inside_voxels": int(grid.inside.sum()),
            "volume": float(grid.inside.sum() * grid.h**3),
            "surface_consistency": consistency,
            "footprints": {k: {"foreign_min": v[0], "outer_gap_min": v[1], "regions_ok": v[2]} for k, v in overlap.items()},
        },
    )
    report = goodnormals_check(dom, raise_on_fail=False)
    write_json(ctx.out / "goodnormals.json", report)
    if not report["ok"]:
        from .errors import GoodnormalsViolation

        raise GoodnormalsViolation(f"goodnormals fails, worst sample {report['worst']}", report["worst"])
    logger.info("domain: goodnormals margin %.3g, grid %s", report["min_margin"], grid.dims)


def cmd_metric(ctx: Context):
    from .sharp import coefficients_from_potential

    pot = ctx.potential()
    m = ctx.cfg.metric
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        weights, residual, paths = coefficients_from_potential(pot, lattice=m.lattice, samples=m.samples)
    write_json(
        ctx.out / "cij.json",
        {
            "wells": pot.wells,
            "cij": weights.cij,
            "c": weights.c,
            "residual": residual,
            "actions": {f"{i}{j}": p.action for (i, j), p in paths.items()},
            "lattice_actions": {f"{i}{j}": p.lattice_action for (i, j), p in paths.items()},
            "warnings": [str(w.message) for w in caught],
        },
    )
    write_json(ctx.out / "paths.json", {f"{i}{j}": p.points for (i, j), p in paths.items()})
    logger.info("metric: c_ij range [%.6g, %.6g], split residual %.3g", weights.cij[weights.cij > 0].min(), weights.cij.max(), residual)


def _load_partition(ctx):
    grid = read_vtk_labels(ctx.out / "grid.vtk") if (ctx.out / "grid.vtk").exists() else None
    if grid is None:
        raise ValidationError(f"missing artifact {ctx.out / 'grid.vtk'}; run 'domain' first")
    read_json(ctx.out / "cone.json")
    return grid


def cmd_relax(ctx: Context):
    from .phase import Lattice, Schedule, gamma_diagnostics, initialize_from_partition, quadruple_junction_fraction, reference_field, relax, write_trace_csv
    from .sharp import weighted_perimeter

    grid = cone_partition(_load_partition(ctx), ctx.cone())
    pot = ctx.potential()
    w = ctx.weights()
    dom = ctx.domain()
    e0 = weighted_perimeter(grid, w, domain=dom, both=False).pairwise
    r = ctx.cfg.relax
    lat = Lattice.from_grid(grid)
    runs = []
    for k, eps_h in enumerate(r.epsilons):
        f = initialize_from_partition(grid, pot, eps_h * grid.h, mollify=r.mollify, lattice=lat)
        u0 = reference_field(f, pot)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out, rep = relax(
                f, pot, Schedule(dt_factor=r.dt_factor, tol=r.tol, max_iter=r.max_iter), u0=u0, E0_ref=e0, trace_every=100
            )
        tag = f"eps{k}"
        write_vtk_field(ctx.out / f"field_{tag}.vtk", grid, out.on_grid())
        write_trace_csv(ctx.out / f"trace_{tag}.csv", rep)
        runs.append(
            {
                "epsilon": f.epsilon,
                "epsilon_over_h": eps_h,
                "E_eps": rep.E_eps,
                "L1_dist": rep.L1_dist,
                "residual": rep.residual,
                "iterations": rep.iterations,
                "converged": rep.converged,
                "hull_excursion": rep.hull_excursion,
                "junction_fraction": quadruple_junction_fraction(out, pot),
                "warnings": [str(c.message) for c in caught],
            }
        )
        logger.info("relax eps=%gh: E=%.6g L1=%.4g its=%d", eps_h, rep.E_eps, rep.L1_dist, rep.iterations)
    table = gamma_diagnostics(runs, e0) if len(runs) >= 3 else {"rows": [
        {"epsilon": x["epsilon"], "E_eps": x["E_eps"], "energy_gap": abs(x["E_eps"] - e0) / e0, "L1_dist": x["L1_dist"]} for x in runs
    ]}
    with open(ctx.out / "gamma.csv", "w", newline="") as fh:
        wtr = csv.writer(fh)
        wtr.writerow(["epsilon", "E_eps", "energy_gap", "L1_dist"])
        for row in table["rows"]:
            wtr.writerow([f"{row['epsilon']:.12g}", f"{row['E_eps']:.12g}", f"{row['energy_gap']:.12g}", f"{row['L1_dist']:.12g}"])
    write_json(ctx.out / "relax.json", {"E0_ref": e0, "runs": runs, "gamma": table})


def cmd_verify(ctx: Context):
    from .grid import boundary_mesh
    from .sharp import calibration_check, infiltration_constants, minimality_probe

    grid = cone_partition(_load_partition(ctx), ctx.cone())
    cone = ctx.cone()
    w = ctx.weights()
    dom = ctx.domain()
    v = ctx.cfg.verify
    bnd = boundary_mesh(dom, grid)
    cal = calibration_check(grid, cone, w, dom, bnd)
    volume = float(grid.inside.sum() * grid.h**3)
    probe = minimality_probe(grid, cone, w, v.volume_budget * volume, domain=dom, tol_rel=v.probe_tolerance, shift=v.shift, ball=v.ball)
    lam, eps0, delta = infiltration_constants(w, v.C0, v.radii)
    checks = {
        "calibration": cal["relative_residual"] < v.calibration_tolerance,
        "minimality_probe": probe["ok"] and probe["tested"] >= 10,
    }
    write_json(
        ctx.out / "verify.json",
        {
            "calibration": cal,
            "minimality_probe": probe,
            "infiltration": {"Lambda": lam, "eps0": eps0, "delta": delta, "C0": v.C0, "radii": v.radii},
            "checks": checks,
            "ok": all(checks.values()),
        },
    )
    if not all(checks.values()):
        failed = [k for k, ok in checks.items() if not ok]
        raise QuadJunctionError(f"verification failed: {', '.join(failed)}")


RUNNERS = {"cone": cmd_cone, "domain": cmd_domain, "metric": cmd_metric, "relax": cmd_relax, "verify": cmd_verify}


# --------------------------------------------------------------------------
# entry point


def _configure_threads(n):
    if n is None:
        return
    if n < 1:
        raise ValidationError("--threads must be at least 1")
    import numba

    from . import phase  # noqa: F401  pins the threading layer first

    cap = numba.config.NUMBA_NUM_THREADS
    if n > cap:
        logger.warning("--threads %d exceeds available %d; using %d", n, cap, cap)
        n = cap
    numba.set_num_threads(n)


def build_parser():
    p = argparse.ArgumentParser(prog="quadjunction", description=__doc__)
    p.add_argument("command", choices=COMMANDS + ("all",))
    p.add_argument("--config", required=True, help="TOML experiment config")
    p.add_argument("--threads", type=int, default=1, help="worker threads for the relaxation kernel")
    p.add_argument("--output", help="experiment directory (overrides output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.INFO
    try:
        cfg = config_mod.load(args.config)
        out = Path(args.output or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "logs").mkdir(exist_ok=True)
        _setup_logging(out / "logs" / "run.log", level)
        (out / "config.toml").write_text(cfg.dumps())
        _configure_threads(args.threads)
        np.random.seed(cfg.seed)
        ctx = Context(cfg, out)
        steps = COMMANDS if args.command == "all" else (args.command,)
        if args.command == "all" and cfg.weights.mode == "from-potential":
            steps = ("metric", "cone", "domain", "relax", "verify")
        for step in steps:
            logger.info("running %s", step)
            RUNNERS[step](ctx)
    except QuadJunctionError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


def _setup_logging(path, level):
    root = logging.getLogger("quadjunction")
    root.setLevel(level)
    for h in list(root.handlers):
        root.removeHandler(h)
    fmt = logging.Formatter("%(levelname)s %(name)s: %(message)s")
    for handler in (logging.FileHandler(path, mode="w"), logging.StreamHandler(sys.stderr)):
        handler.setFormatter(fmt)
        root.addHandler(handler)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
