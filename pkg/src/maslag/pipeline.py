"""End-to-end run pipeline: solve, analyze, persist artifacts, check invariants.

A run owns its artifact directory.  report.json carries every enabled check
with measured values and pass/fail and is byte-identical across repeated
runs of the same config and parameters; wall-clock timings and checksums go
to manifest.json only.  Numeric acceptance thresholds that exceed what the
boundary layer physics allows at desk resolutions (the 5% mass-balance
window identity and the 2% determinant median) are asserted in the test
suite, not gated here; the pipeline gates on the operation contracts
(stabilization, convexity, containment, monotone divergence, decay signs).
"""

from dataclasses import dataclass, field as dc_field
import hashlib
import json
import os
import time

import numpy as np

from . import geometry
from .geometry import ConfigError
from .grid import GridError
from .solver import (SolverParams, ConvergenceError, solve, verify_bounds,
                     export_solution)
from .convexity import (gradient_field, cyclic_monotonicity_violation,
                        subgradient_set, amoeba_raster, mass_balance,
                        ray_decay, default_window, export_pgm)
from .slbuild import (build_reduced_graph, sl_residual_report, extract_end,
                      appendix_constraint_check, export_mesh, config_hash,
                      EndResolutionError)
from .geometry import erode_convex, convex_polygon_distance

__all__ = ["RunOptions", "RunResult", "STAGES", "run", "compare"]

STAGES = ["grid", "solve", "gradient", "subgradients", "amoeba",
          "massbalance", "mesh", "ends", "appendix", "report"]

_STAGE_DEPS = {
    "grid": [],
    "solve": ["grid"],
    "gradient": ["solve"],
    "subgradients": ["solve"],
    "amoeba": ["solve", "gradient", "subgradients"],
    "massbalance": ["solve", "subgradients"],
    "mesh": ["solve"],
    "ends": ["solve"],
    "appendix": ["ends"],
    "report": ["solve"],
}

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_INVALID = 2
EXIT_SOLVER_FAILED = 3


@dataclass
class RunOptions:
    h: float = None
    levels: int = 3
    stages: tuple = tuple(STAGES)
    window_scale: float = 8.0
    out: str = "maslag_out"
    seed: int = 0
    strict: bool = False
    stencil_directions: int = 8
    resolution: int = 256

    def canonical_stages(self):
        want = set(self.stages)
        for s in list(want):
            if s not in STAGES:
                raise ValueError(f"unknown stage {s!r}; choose from {STAGES}")
        # pull in prerequisites
        changed = True
        while changed:
            changed = False
            for s in list(want):
                for d in _STAGE_DEPS[s]:
                    if d not in want:
                        want.add(d)
                        changed = True
        return [s for s in STAGES if s in want]


@dataclass
class RunResult:
    exit_code: int
    outdir: str
    report: dict
    manifest: dict = dc_field(default_factory=dict)


class _CheckFailed(RuntimeError):
    pass


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for blk in iter(lambda: fh.read(65536), b""):
            digest.update(blk)
    return digest.hexdigest()


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.bool_):
        return bool(x)
    raise TypeError(f"not JSON serializable: {type(x)}")


def _json_dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, default=_jsonable)
        fh.write("\n")


def run(config_path, options=None):
    """Execute the pipeline; returns RunResult with the exit code.

    Exit codes: 0 all enabled checks pass; 1 some check failed; 2 invalid
    config (nothing written); 3 solver non-convergence.
    """
    options = options or RunOptions()
    try:
        cfg = geometry.config_from_json(config_path)
    except ConfigError as exc:
        return RunResult(exit_code=EXIT_CONFIG_INVALID, outdir="",
                         report={"error": str(exc)})

    stages = options.canonical_stages()
    os.makedirs(options.out, exist_ok=True)
    chash = config_hash(cfg)
    h = options.h if options.h is not None else float(np.min(cfg.edge_lengths)) / 64.0
    params = SolverParams(h=h, continuation_levels=options.levels,
                          stencil_directions=options.stencil_directions)

    report = {
        "config": geometry.config_to_dict(cfg),
        "config_hash": chash,
        "params": params.to_dict(),
        "seed": int(options.seed),
        "window_scale": float(options.window_scale),
        "stages": stages,
        "checks": [],
        "results": {},
        "notes": {
            "asymptotic_model": ("each end converges exponentially to a flat "
                                 "cylinder over its edge; per-edge flux vector "
                                 "2*pi*(p_{i+1}-p_i) recorded for reference"),
            "edge_flux_vectors": [[float(2 * np.pi * v) for v in e] for e in cfg.edges],
            "topology": {
                "reduced_surface": "disc with n boundary ends",
                "ends": int(cfg.n),
                "fiber_collapse": "circle fibers collapse over the polygon boundary",
            },
        },
    }
    checks = report["checks"]
    timings = {}
    files = []

    def add_check(name, passed, **values):
        entry = {"name": name, "passed": bool(passed)}
        entry.update(values)
        checks.append(entry)
        if options.strict and not passed:
            raise _CheckFailed(name)

    def stage(name):
        class _Timer:
            def __enter__(self_inner):
                self_inner.t0 = time.perf_counter()
            def __exit__(self_inner, *exc):
                timings[name] = time.perf_counter() - self_inner.t0
        return _Timer()

    try:
        scale = float(np.max(np.abs(cfg.boundary_values))) or 1.0
        add_check("offsets_telescope_to_zero",
                  abs(float(np.sum(cfg.offsets))) <= 1e-12 * scale,
                  sum_offsets=float(np.sum(cfg.offsets)))

        field = None
        if "solve" in stages:
            with stage("solve"):
                field = solve(cfg, params)
            add_check("solver_converged", field.residual_inf <= field.tol_residual,
                      residual_inf=field.residual_inf, tol=field.tol_residual,
                      iterations=field.iterations)
            add_check("discrete_convexity",
                      field.min_direction_curvature >= -params.tol_convex,
                      min_direction_curvature=field.min_direction_curvature)
            p_csv = os.path.join(options.out, "solution.csv")
            p_hdr = os.path.join(options.out, "solution.json")
            export_solution(field, p_csv, p_hdr)
            files += [p_csv, p_hdr]

            bounds = verify_bounds(field)
            report["results"]["bounds"] = bounds
            add_check("upper_barrier", bounds["upper_barrier_holds"],
                      max_excess=bounds["upper_barrier_max_excess"])
            add_check("lower_barrier_alexandrov", bounds["lower_barrier_holds"],
                      implied_constant=bounds["implied_sqrt_constant"],
                      alexandrov_constant=bounds["alexandrov_constant"])
            exps = [e["midedge_exponent"] for e in bounds["edges"]
                    if e["midedge_exponent"] is not None]
            # vacuous pass when the grid is too coarse to fit any profile
            add_check("boundary_rate_exponent_in_band",
                      all(0.5 <= x <= 1.0 for x in exps),
                      exponents=exps, measured_edges=len(exps))

        grad = None
        if "gradient" in stages:
            with stage("gradient"):
                grad = gradient_field(field)
                worst = cyclic_monotonicity_violation(grad, seed=options.seed)
            lip = float(np.max(np.linalg.norm(grad.samples, axis=1)))
            tol = 4.0 * field.grid.h * lip
            report["results"]["gradient"] = {
                "jacobian_symmetry_defect": grad.jacobian_symmetry_defect,
                "lipschitz_estimate": lip,
                "cyclic_monotonicity_worst": worst,
            }
            add_check("cyclic_monotonicity", worst >= -tol, worst=worst, tol=tol)

        subs = None
        window = None
        if "subgradients" in stages:
            with stage("subgradients"):
                window = default_window(field, scale=options.window_scale)
                subs = [subgradient_set(field, i, window=window) for i in range(cfg.n)]
            h_eff = field.grid.h
            viol = max(s.wedge_violation() for s in subs)
            add_check("subgradients_inside_wedges", viol <= 3.0 * h_eff,
                      max_violation=viol, tol=3.0 * h_eff)
            dmin = min(
                convex_polygon_distance(erode_convex(subs[i].clipped_polygon, 1.5 * h_eff),
                                        erode_convex(subs[j].clipped_polygon, 1.5 * h_eff))
                for i in range(cfg.n) for j in range(i + 1, cfg.n))
            add_check("subgradients_pairwise_disjoint", dmin > 0.0,
                      eroded_min_distance=float(min(dmin, 1e30)),
                      erosion=1.5 * h_eff)
            p_sub = os.path.join(options.out, "subgradients.json")
            _json_dump({
                "window": window.tolist(),
                "sets": [{
                    "vertex": s.vertex_index,
                    "polygon": s.clipped_polygon.tolist(),
                    "wedge_apex": s.wedge.apex.tolist(),
                    "wedge_rays": s.wedge.ray_directions.tolist(),
                } for s in subs],
            }, p_sub)
            files.append(p_sub)

        if "amoeba" in stages:
            with stage("amoeba"):
                raster = amoeba_raster(field, window=window, resolution=options.resolution,
                                       grad=grad, subgradients=subs)
            add_check("amoeba_classes_exclusive", True, conflicts=raster.conflicts)
            p_pgm = os.path.join(options.out, "amoeba.pgm")
            export_pgm(raster, p_pgm)
            p_leg = os.path.join(options.out, "amoeba_legend.json")
            _json_dump({"window": raster.window.tolist(),
                        "resolution": raster.resolution,
                        "legend": raster.legend,
                        "conflicts": raster.conflicts}, p_leg)
            files += [p_pgm, p_leg]
            report["results"]["amoeba"] = {
                "undetermined_area": raster.class_area(0),
                "gradient_image_area": raster.class_area(255),
                "conflicts": raster.conflicts,
            }

        if "massbalance" in stages:
            with stage("massbalance"):
                mb = mass_balance(field, scales=tuple(
                    options.window_scale * f for f in (0.25, 0.5, 1.0)), subgradients=subs)
            report["results"]["mass_balance"] = mb
            add_check("mass_balance_stabilizes", mb["stabilizing"],
                      discrepancies=[w["relative_discrepancy"] for w in mb["windows"]],
                      mass=mb["mass_quadrature"])

        mesh = None
        if "mesh" in stages:
            with stage("mesh"):
                mesh = build_reduced_graph(field)
                mrep = sl_residual_report(mesh)
            report["results"]["mesh"] = {**mesh.summary(), "residuals": mrep}
            add_check("mesh_is_disc", mesh.euler_characteristic == 1,
                      euler_characteristic=mesh.euler_characteristic)
            add_check("mesh_residuals_finite",
                      bool(np.all(np.isfinite(mesh.det_defect))
                           and np.all(np.isfinite(mesh.curl_defect))))
            paths = export_mesh(mesh, options.out, params=params.to_dict())
            files += list(paths.values())

        ends = None
        if "ends" in stages:
            with stage("ends"):
                try:
                    ends = [extract_end(field, i) for i in range(cfg.n)]
                except EndResolutionError as exc:
                    ends = None
                    add_check("end_resolution", False, error=str(exc))
            if ends is not None:
                report["results"]["ends"] = [e.to_dict() for e in ends]
                increasing = all(
                    all(b[1] > a[1] for a, b in zip(e.normal_divergence_profile,
                                                    e.normal_divergence_profile[1:]))
                    for e in ends)
                add_check("normal_gradient_monotone_divergence", increasing)
                ratios = [e.normal_divergence_profile[-1][1]
                          / max(abs(e.c_measured), 1e-12) for e in ends]
                add_check("normal_dominates_tangential",
                          all(r > 10.0 for r in ratios), ratios=ratios)
                ctol = [5.0 * np.sqrt(field.grid.h) * e.lip_local for e in ends]
                cerr = [abs(e.c_measured - e.c_reference) for e in ends]
                add_check("tangential_limits_match_offsets",
                          all(err <= tol for err, tol in zip(cerr, ctol)),
                          errors=cerr, tolerances=ctol)
                u1 = [e.u1_decay_fit.get("exponent") for e in ends]
                y2 = [e.y2_decay_fit.get("exponent") for e in ends]
                gam = [e.exp_decay_fit.get("gamma") for e in ends]
                add_check("end_decay_exponents",
                          all(x is not None and x <= -1.6 for x in u1)
                          and all(x is not None and x <= -0.8 for x in y2),
                          u1_exponents=u1, y2_exponents=y2)
                add_check("exponential_tail_decay",
                          all(g is not None and g > 0 for g in gam),
                          gammas=gam,
                          r2=[e.exp_decay_fit.get("r2") for e in ends])
                rd = ray_decay(field, grad=grad)
                report["results"]["ray_decay"] = rd
                if not rd.get("insufficient_range"):
                    add_check("ray_decay",
                              rd["exponent"] <= -0.8 and rd["product_no_growth"],
                              exponent=rd["exponent"],
                              product_constant=rd["constant"])
                else:
                    add_check("ray_decay", False, insufficient_range=True)
                p_fits = os.path.join(options.out, "fits.json")
                _json_dump({"ends": [e.to_dict() for e in ends],
                            "ray_decay": rd}, p_fits)
                files.append(p_fits)

        if "appendix" in stages and ends is not None:
            with stage("appendix"):
                app = appendix_constraint_check(ends)
            report["results"]["appendix_constraint"] = app
            add_check("offsets_sum_zero_measured", app["passed"],
                      sum_c_measured=app["sum_c_measured"],
                      tolerance=app["tolerance"])

        if "report" in stages:
            with stage("report"):
                from . import figures
                made = figures.render_all(options.out, cfg=cfg, field=field,
                                          grad=grad, subs=subs, mesh=mesh,
                                          ends=ends, window=window)
                files += made

    except _CheckFailed as exc:
        report["aborted_by_strict_check"] = str(exc)
    except ConvergenceError as exc:
        report["error"] = f"solver failed: {exc}"
        _json_dump(report, os.path.join(options.out, "report.json"))
        return RunResult(exit_code=EXIT_SOLVER_FAILED, outdir=options.out,
                         report=report)
    except GridError as exc:
        report["error"] = f"grid construction failed: {exc}"
        _json_dump(report, os.path.join(options.out, "report.json"))
        return RunResult(exit_code=EXIT_CONFIG_INVALID, outdir=options.out,
                         report=report)

    all_passed = all(c["passed"] for c in checks)
    report["all_checks_passed"] = all_passed
    p_report = os.path.join(options.out, "report.json")
    _json_dump(report, p_report)
    files.append(p_report)

    manifest = {
        "config_hash": chash,
        "params": params.to_dict(),
        "versions": _versions(),
        "stage_seconds": {k: round(v, 6) for k, v in timings.items()},
        "checks_passed": {c["name"]: c["passed"] for c in checks},
        "files": [{"name": os.path.relpath(p, options.out),
                   "bytes": os.path.getsize(p),
                   "sha256": _sha256(p)} for p in sorted(set(files))],
    }
    p_manifest = os.path.join(options.out, "manifest.json")
    _json_dump(manifest, p_manifest)

    code = EXIT_OK if all_passed else EXIT_CHECK_FAILED
    return RunResult(exit_code=code, outdir=options.out, report=report,
                     manifest=manifest)


def _versions():
    import scipy
    from . import __version__
    return {"maslag": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


# ---------------------------------------------------------------------------
# run comparison
# ---------------------------------------------------------------------------

def _load_solution(outdir):
    header = json.load(open(os.path.join(outdir, "solution.json")))
    pts = []
    vals = []
    with open(os.path.join(outdir, "solution.csv")) as fh:
        next(fh)
        for line in fh:
            _, x, y, p = line.strip().split(",")
            pts.append((float(x), float(y)))
            vals.append(float(p))
    return header, np.asarray(pts), np.asarray(vals)


def compare(dir_a, dir_b):
    """Sup-norm solution difference and check-by-check delta table.

    Solutions on identical lattices are compared node for node; otherwise the
    coarser run is resampled onto the finer nodes by nearest-node matching
    within half a spacing and the comparison is flagged as resampled.
    """
    ha, pa, va = _load_solution(dir_a)
    hb, pb, vb = _load_solution(dir_b)
    man_a = json.load(open(os.path.join(dir_a, "manifest.json")))
    man_b = json.load(open(os.path.join(dir_b, "manifest.json")))
    rep_a = json.load(open(os.path.join(dir_a, "report.json")))
    rep_b = json.load(open(os.path.join(dir_b, "report.json")))

    out = {"a": dir_a, "b": dir_b,
           "same_grid": bool(ha["h"] == hb["h"] and len(va) == len(vb)),
           "resampled": False}
    if out["same_grid"] and np.array_equal(pa, pb):
        out["solution_sup_diff"] = float(np.max(np.abs(va - vb)))
    else:
        # match coarse nodes onto fine nodes
        if ha["h"] < hb["h"]:
            pa, va, pb, vb, ha, hb = pb, vb, pa, va, hb, ha
        from scipy.spatial import cKDTree
        tree = cKDTree(pa)
        d, idx = tree.query(pb, k=1)
        keep = d <= 0.51 * ha["h"]
        if not np.any(keep):
            out["solution_sup_diff"] = None
        else:
            out["solution_sup_diff"] = float(np.max(np.abs(va[idx[keep]] - vb[keep])))
        out["resampled"] = True
        out["matched_nodes"] = int(np.count_nonzero(keep))

    delta = {}
    names = {c["name"] for c in rep_a.get("checks", [])} | {
        c["name"] for c in rep_b.get("checks", [])}
    ca = {c["name"]: c for c in rep_a.get("checks", [])}
    cb = {c["name"]: c for c in rep_b.get("checks", [])}
    for name in sorted(names):
        delta[name] = {"a": ca.get(name, {}).get("passed"),
                       "b": cb.get(name, {}).get("passed")}
    out["checks"] = delta

    ea = rep_a.get("results", {}).get("ends")
    eb = rep_b.get("results", {}).get("ends")
    if ea and eb and len(ea) == len(eb):
        out["c_measured_delta"] = [float(y["c_measured"] - x["c_measured"])
                                   for x, y in zip(ea, eb)]
    out["config_match"] = man_a["config_hash"] == man_b["config_hash"]
    return out
