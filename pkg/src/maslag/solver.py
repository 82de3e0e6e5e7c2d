"""Monotone wide-stencil solver for det D2(phi) = V with Dirichlet data.

The determinant is discretized as the minimum over orthogonal direction pairs
of the product of positive parts of centered second differences.  This is the
standard monotone formulation for convex solutions: it selects the viscosity
solution and tolerates the gradient blow-up at the boundary, where arms use
the recorded Dirichlet traces with unequal-arm weights.

The initial iterate is the lower convex envelope of the vertex data capped by
the Poisson surrogate (laplacian phi = 2 sqrt(V), same boundary data); both
are upper barriers for the convex solution by the comparison principle.  The
nonlinear system is then solved by semismooth Newton steps on the active
pairs with fallback step halving, interleaved with exact per-node local-solve
sweeps, under grid continuation down to the target spacing.  Everything is
deterministic: repeated solves are bitwise identical.
"""

from dataclasses import dataclass, replace
import json

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import geometry
from .grid import SolverGrid, build_grid
from .quadrature import potential_mass

__all__ = ["SolverParams", "PotentialField", "ConvergenceError",
           "solve", "ma_operator", "verify_bounds", "export_solution"]


class ConvergenceError(RuntimeError):
    """Solver failed to reach the residual tolerance."""

    def __init__(self, message, worst_node=None, residual=None):
        super().__init__(message)
        self.worst_node = worst_node
        self.residual = residual


@dataclass(frozen=True)
class SolverParams:
    """Knobs of the monotone solver.

    h is the target spacing (default min edge / 64).  tol_residual defaults
    to 1e-8 times the largest cell-averaged right-hand side.
    """

    h: float = None
    stencil_directions: int = 8
    tol_residual: float = None
    tol_convex: float = 1e-10
    max_iterations: int = 400
    continuation_levels: int = 3

    def __post_init__(self):
        if self.tol_residual is not None and not self.tol_residual > 0:
            raise ValueError("tol_residual must be positive")
        if self.stencil_directions < 2:
            raise ValueError("stencil_directions must be >= 2")

    def to_dict(self):
        return {
            "h": None if self.h is None else float(self.h),
            "stencil_directions": int(self.stencil_directions),
            "tol_residual": None if self.tol_residual is None else float(self.tol_residual),
            "tol_convex": float(self.tol_convex),
            "max_iterations": int(self.max_iterations),
            "continuation_levels": int(self.continuation_levels),
        }


@dataclass
class PotentialField:
    """Discrete convex solution with residual and convexity certificates."""

    grid: SolverGrid
    values: np.ndarray
    residual_inf: float
    min_direction_curvature: float
    iterations: int
    tol_residual: float
    params: SolverParams = None


def _arm_values(grid, phi):
    """Neighbour values per (direction, side, node), traces where needed."""
    vp = np.where(grid.nbr[:, 0, :] >= 0, phi[grid.nbr[:, 0, :]], grid.trace[:, 0, :])
    vm = np.where(grid.nbr[:, 1, :] >= 0, phi[grid.nbr[:, 1, :]], grid.trace[:, 1, :])
    return vp, vm


def second_differences(grid, phi):
    """Centered second differences along every stencil direction, (m, k)."""
    vp, vm = _arm_values(grid, phi)
    c = grid.coef
    return c["wp"] * vp + c["wm"] * vm - c["wc"] * phi[None, :]


def operator_values(grid, phi):
    """min over orthogonal pairs of products of positive parts, (k,)."""
    d2 = second_differences(grid, phi)
    pa, pb = grid.stencil.pairs.T
    prod = np.maximum(d2[pa], 0.0) * np.maximum(d2[pb], 0.0)
    return prod.min(axis=0)


def residual(grid, phi):
    return operator_values(grid, phi) - grid.cell_v


def ma_operator(field, node):
    """Discrete Monge-Ampere operator at one interior node."""
    vals = operator_values(field.grid, field.values)
    return float(vals[int(node)])


def _local_solve(grid, phi):
    """Exact per-node root of the scheme with neighbours frozen (Jacobi step).

    For each orthogonal pair the equation (s1 - t1 v)(s2 - t2 v) = f has a
    unique largest root with both factors nonnegative; the scheme value is
    the minimum of the pair roots.
    """
    vp, vm = _arm_values(grid, phi)
    c = grid.coef
    s = c["wp"] * vp + c["wm"] * vm
    t = c["wc"]
    pa, pb = grid.stencil.pairs.T
    s1, s2 = s[pa], s[pb]
    t1, t2 = t[pa], t[pb]
    f = grid.cell_v[None, :]
    A = t1 * t2
    B = s1 * t2 + s2 * t1
    C = s1 * s2 - f
    disc = np.maximum(B * B - 4.0 * A * C, 0.0)
    root = (B - np.sqrt(disc)) / (2.0 * A)
    return root.min(axis=0)


def _active_pairs(grid, d2):
    """Index of the minimizing pair per node (ties broken by first index)."""
    pa, pb = grid.stencil.pairs.T
    prod = np.maximum(d2[pa], 0.0) * np.maximum(d2[pb], 0.0)
    return np.argmin(prod, axis=0)


def _newton_matrix(grid, phi, reg):
    """Sparse Jacobian of the residual restricted to the active pairs.

    Factors are floored at reg (per node) so rows at flat iterates act like a
    scaled laplacian instead of vanishing.
    """
    d2 = second_differences(grid, phi)
    act = _active_pairs(grid, d2)
    k = grid.n_interior
    pa = grid.stencil.pairs[act, 0]
    pb = grid.stencil.pairs[act, 1]
    ci = np.arange(k)
    f1 = np.maximum(d2[pa, ci], reg)
    f2 = np.maximum(d2[pb, ci], reg)

    rows, cols, vals = [], [], []

    def add_direction(dsel, factor):
        wp = grid.coef["wp"][dsel, ci]
        wm = grid.coef["wm"][dsel, ci]
        wc = grid.coef["wc"][dsel, ci]
        nbp = grid.nbr[dsel, 0, ci]
        nbm = grid.nbr[dsel, 1, ci]
        rows.append(ci)
        cols.append(ci)
        vals.append(-factor * wc)
        ok = nbp >= 0
        rows.append(ci[ok])
        cols.append(nbp[ok])
        vals.append((factor * wp)[ok])
        ok = nbm >= 0
        rows.append(ci[ok])
        cols.append(nbm[ok])
        vals.append((factor * wm)[ok])

    add_direction(pa, f2)
    add_direction(pb, f1)
    return sp.csr_matrix((np.concatenate(vals),
                          (np.concatenate(rows), np.concatenate(cols))),
                         shape=(k, k))


def poisson_surrogate(grid):
    """Solution of laplacian phi = 2 sqrt(cell_v) with the grid's Dirichlet data.

    By the arithmetic-geometric mean inequality this lies above the convex
    Monge-Ampere solution, so it is an admissible upper-barrier initializer
    with strictly positive axis curvatures.
    """
    k = grid.n_interior
    ci = np.arange(k)
    rows, cols, vals = [], [], []
    b = 2.0 * np.sqrt(grid.cell_v).copy()
    for d in (grid.stencil.axis_x, grid.stencil.axis_y):
        wp, wm, wc = grid.coef["wp"][d], grid.coef["wm"][d], grid.coef["wc"][d]
        rows.append(ci)
        cols.append(ci)
        vals.append(-wc)
        for side, w in ((0, wp), (1, wm)):
            nb = grid.nbr[d, side]
            ok = nb >= 0
            rows.append(ci[ok])
            cols.append(nb[ok])
            vals.append(w[ok])
            b[~ok] -= w[~ok] * grid.trace[d, side, ~ok]
    A = sp.csr_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))), shape=(k, k))
    return spla.spsolve(A, b)


def _solve_on_grid(grid, phi0, tol, max_iterations, iteration_offset=0):
    """Newton with l2 merit and fallback sweeps; returns (phi, res_inf, iters)."""
    phi = phi0.copy()
    res = residual(grid, phi)
    merit = float(np.linalg.norm(res))
    sup = float(np.max(np.abs(res)))
    iters = iteration_offset
    reg = 0.1 * np.sqrt(grid.cell_v)

    stall = 0
    while sup > tol and iters - iteration_offset < max_iterations:
        J = _newton_matrix(grid, phi, reg)
        try:
            step = spla.spsolve(J, -res)
        except RuntimeError:
            step = None
        iters += 1
        progressed = False
        if step is not None and np.all(np.isfinite(step)):
            alpha = 1.0
            for _ in range(20):
                cand = phi + alpha * step
                r = residual(grid, cand)
                m = float(np.linalg.norm(r))
                if m < merit * (1.0 - 1e-4 * alpha):
                    phi, res, merit = cand, r, m
                    sup = float(np.max(np.abs(r)))
                    progressed = True
                    break
                alpha *= 0.5   # fallback halving on residual increase
        if not progressed:
            stall += 1
            for _ in range(5):
                phi = _local_solve(grid, phi)
                iters += 1
            res = residual(grid, phi)
            merit = float(np.linalg.norm(res))
            sup = float(np.max(np.abs(res)))
            if stall >= 6:
                break
        else:
            stall = 0
    return phi, sup, iters


def _interpolate_to(grid_fine, grid_coarse, phi_coarse, fill):
    """Bilinear transfer between nested lattices; fill where coarse data is missing."""
    init = fill.copy()
    ratio = grid_coarse.h / grid_fine.h
    ij = grid_fine.interior_ij / ratio
    i0 = np.floor(ij[:, 0]).astype(int)
    j0 = np.floor(ij[:, 1]).astype(int)
    fx = ij[:, 0] - i0
    fy = ij[:, 1] - j0
    nxc, nyc = grid_coarse.shape
    ok = (i0 >= 0) & (j0 >= 0) & (i0 + 1 < nxc) & (j0 + 1 < nyc)
    corners = np.full((len(ij), 4), -1, dtype=np.int64)
    corners[ok, 0] = grid_coarse.index_of[i0[ok], j0[ok]]
    corners[ok, 1] = grid_coarse.index_of[i0[ok] + 1, j0[ok]]
    corners[ok, 2] = grid_coarse.index_of[i0[ok], j0[ok] + 1]
    corners[ok, 3] = grid_coarse.index_of[i0[ok] + 1, j0[ok] + 1]
    usable = ok & np.all(corners >= 0, axis=1)
    if np.any(usable):
        c = corners[usable]
        w00 = (1 - fx[usable]) * (1 - fy[usable])
        w10 = fx[usable] * (1 - fy[usable])
        w01 = (1 - fx[usable]) * fy[usable]
        w11 = fx[usable] * fy[usable]
        init[usable] = (w00 * phi_coarse[c[:, 0]] + w10 * phi_coarse[c[:, 1]]
                        + w01 * phi_coarse[c[:, 2]] + w11 * phi_coarse[c[:, 3]])
    return init


def solve(cfg, params=None, *, rhs=None, boundary=None, init_offset=0.0):
    """Solve the Dirichlet problem on cfg's polygon.

    Runs grid continuation from a coarsened lattice down to params.h.  The
    initial iterate is min(convex envelope of the vertex data, Poisson
    surrogate), shifted by init_offset for uniqueness experiments; with a
    boundary override the envelope no longer matches the data and the Poisson
    surrogate is used alone.

    rhs/boundary override the potential and the affine boundary data for
    manufactured-solution testing.

    Raises ConvergenceError when the residual tolerance is not met within
    params.max_iterations (per level), and GridError for unusable spacings.
    """
    params = params or SolverParams()
    h = params.h if params.h is not None else float(np.min(cfg.edge_lengths)) / 64.0
    params = replace(params, h=float(h))

    min_edge = float(np.min(cfg.edge_lengths))
    levels = max(1, int(params.continuation_levels))
    while levels > 1 and (h * 2 ** (levels - 1) >= min_edge / 8.0
                          or cfg.min_width < 4.0 * h * 2 ** (levels - 1)):
        levels -= 1

    faces = geometry.envelope_faces(cfg)
    phi_prev = None
    grid_prev = None
    total_iters = 0
    field = None
    for lev in range(levels - 1, -1, -1):
        grid = build_grid(cfg, h * 2 ** lev,
                          stencil_directions=params.stencil_directions,
                          rhs=rhs, boundary=boundary)
        tol = params.tol_residual
        if tol is None:
            tol = 1e-8 * float(np.max(grid.cell_v))
        upper = poisson_surrogate(grid)
        if boundary is None:
            upper = np.minimum(
                upper, geometry.convex_envelope_init(cfg, grid.points, faces=faces))
        if phi_prev is None:
            phi0 = upper + init_offset
        else:
            phi0 = _interpolate_to(grid, grid_prev, phi_prev, fill=upper)
        phi, res_inf, total_iters = _solve_on_grid(
            grid, phi0, tol, params.max_iterations, iteration_offset=total_iters)
        phi_prev, grid_prev = phi, grid
        if lev == 0:
            if res_inf > tol:
                r = residual(grid, phi)
                worst = int(np.argmax(np.abs(r)))
                raise ConvergenceError(
                    f"max_iterations exceeded: residual {res_inf:.3e} > tol {tol:.3e}",
                    worst_node=worst, residual=res_inf)
            d2 = second_differences(grid, phi)
            min_curv = float(np.min(d2))
            if min_curv < -params.tol_convex:
                worst = int(np.argmin(np.min(d2, axis=0)))
                raise ConvergenceError(
                    f"convexity violation {min_curv:.3e} beyond tol at node {worst}",
                    worst_node=worst, residual=res_inf)
            field = PotentialField(grid=grid, values=phi, residual_inf=res_inf,
                                   min_direction_curvature=min_curv,
                                   iterations=total_iters, tol_residual=tol,
                                   params=params)
    return field


# ---------------------------------------------------------------------------
# bound verification
# ---------------------------------------------------------------------------

def verify_bounds(field, alexandrov_c2=2.0):
    """Empirical boundary-barrier report.

    Per edge, with the data normalized to zero (subtracting the affine
    function matching the edge data), fits the constants in
        psi >= -C sqrt(dist)      and      psi <= C' dist,
    fits the power of envelope - phi against distance on the mid-edge normal
    profile, and checks the global envelope barrier
        envelope >= phi >= envelope - C_alex sqrt(dist),
    with C_alex estimated from the Alexandrov bound sqrt(c2 diam(U) int V).
    """
    grid = field.grid
    cfg = grid.cfg
    phi = field.values
    faces = geometry.envelope_faces(cfg)
    env = geometry.convex_envelope_init(cfg, grid.points, faces=faces)
    slack = 10.0 * max(field.tol_residual, 1e-12) + 1e-9 * max(1.0, float(np.max(np.abs(phi))))

    mass = potential_mass(cfg) if grid.rhs_override is None else float(
        np.sum(grid.cell_v) * grid.h ** 2)
    c_alex = float(np.sqrt(alexandrov_c2 * cfg.diameter * mass))

    edges = []
    for i in range(cfg.n):
        # affine function equal to the boundary data on edge i
        pi = cfg.points[i]
        grad_t = cfg.offsets[i] / cfg.edge_lengths[i]
        ell = cfg.boundary_values[i] + grad_t * ((grid.points - pi) @ cfg.tangents[i])
        psi = phi - ell
        u1 = (grid.points - pi) @ cfg.inward_normals[i]
        mask = u1 > 0
        lower_c = float(np.max(np.maximum(-psi[mask], 0.0) / np.sqrt(u1[mask])))
        upper_c = float(np.max(psi[mask] / u1[mask]))

        # power fit of envelope - phi along the inward normal at the midpoint
        mid = 0.5 * (cfg.points[i] + cfg.points[(i + 1) % cfg.n])
        depth_max = 0.25 * cfg.min_width
        depths = depth_max * 0.5 ** np.arange(8)
        depths = depths[depths >= 1.5 * grid.h]
        exponent = None
        if len(depths) >= 3:
            probes = mid + depths[:, None] * cfg.inward_normals[i]
            vals = sample_values(grid, phi - env, probes)
            ok = np.isfinite(vals) & (vals < -1e-12)
            if np.count_nonzero(ok) >= 3:
                coef = np.polyfit(np.log(depths[ok]), np.log(-vals[ok]), 1)
                exponent = float(coef[0])

        violations = int(np.count_nonzero(-psi[mask] > lower_c * np.sqrt(u1[mask]) + slack))
        edges.append({
            "edge": i,
            "lower_sqrt_constant": lower_c,
            "upper_linear_constant": max(upper_c, 0.0),
            "midedge_exponent": exponent,
            "violations": violations,
        })

    w = phi - env
    dist = np.maximum(grid.dist_bdry, 1e-300)
    implied = float(np.max(np.maximum(-w, 0.0) / np.sqrt(dist)))
    return {
        "upper_barrier_holds": bool(np.all(w <= slack)),
        "upper_barrier_max_excess": float(np.max(w)),
        "alexandrov_constant": c_alex,
        "implied_sqrt_constant": implied,
        "lower_barrier_holds": bool(implied <= c_alex),
        "edges": edges,
    }


def sample_values(grid, values, pts):
    """Bilinear samples of a node field at arbitrary points (NaN off-support)."""
    ij = (np.asarray(pts, dtype=float) - grid.origin) / grid.h
    i0 = np.floor(ij[:, 0]).astype(int)
    j0 = np.floor(ij[:, 1]).astype(int)
    fx = ij[:, 0] - i0
    fy = ij[:, 1] - j0
    nx, ny = grid.shape
    out = np.full(len(ij), np.nan)
    ok = (i0 >= 0) & (j0 >= 0) & (i0 + 1 < nx) & (j0 + 1 < ny)
    if not np.any(ok):
        return out
    c00 = grid.index_of[i0[ok], j0[ok]]
    c10 = grid.index_of[i0[ok] + 1, j0[ok]]
    c01 = grid.index_of[i0[ok], j0[ok] + 1]
    c11 = grid.index_of[i0[ok] + 1, j0[ok] + 1]
    good = (c00 >= 0) & (c10 >= 0) & (c01 >= 0) & (c11 >= 0)
    sel = np.where(ok)[0][good]
    c00, c10, c01, c11 = c00[good], c10[good], c01[good], c11[good]
    fxs, fys = fx[sel], fy[sel]
    out[sel] = ((1 - fxs) * (1 - fys) * values[c00] + fxs * (1 - fys) * values[c10]
                + (1 - fxs) * fys * values[c01] + fxs * fys * values[c11])
    return out


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def export_solution(field, csv_path, header_path):
    """CSV of (node index, u1, u2, phi) in row-major lattice order + JSON header."""
    grid = field.grid
    with open(csv_path, "w") as fh:
        fh.write("node,u1,u2,phi\n")
        for idx in range(grid.n_interior):
            x, y = grid.points[idx]
            fh.write(f"{idx},{float(x)!r},{float(y)!r},{float(field.values[idx])!r}\n")
    header = {
        "h": grid.h,
        "residual_inf": field.residual_inf,
        "iterations": field.iterations,
        "params": field.params.to_dict() if field.params else None,
        "n_interior": grid.n_interior,
        "min_direction_curvature": field.min_direction_curvature,
    }
    with open(header_path, "w") as fh:
        json.dump(header, fh, sort_keys=True, indent=2)
        fh.write("\n")
