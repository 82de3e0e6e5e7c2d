"""Post-processing of the solved potential: gradients, conjugate, subgradients.

The gradient map sends the polygon onto the plane minus the union of the
vertex subgradient sets; these operations measure that picture.  All of them
are read-only over a solved field and deterministic.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import geometry
from .geometry import clip_halfplane, polygon_area
from .quadrature import potential_mass

__all__ = ["GradientField", "VertexSubgradientSet", "AmoebaRaster",
           "LegendreTable", "SubgradientEmptyError",
           "gradient_field", "legendre_transform", "subgradient_set",
           "amoeba_raster", "mass_balance", "ray_decay",
           "default_window", "export_pgm"]


class SubgradientEmptyError(RuntimeError):
    """Empty subgradient polygon; indicates a solver failure."""


# ---------------------------------------------------------------------------
# gradient field
# ---------------------------------------------------------------------------

@dataclass
class GradientField:
    """Discrete gradient samples y = grad(phi) at the interior nodes."""

    grid: object
    samples: np.ndarray             # (k, 2)
    jacobian_symmetry_defect: float


def _first_difference(grid, phi, d):
    """Unequal-arm first derivative along stencil direction d, exact on quadratics."""
    vp = np.where(grid.nbr[d, 0, :] >= 0, phi[grid.nbr[d, 0, :]], grid.trace[d, 0, :])
    vm = np.where(grid.nbr[d, 1, :] >= 0, phi[grid.nbr[d, 1, :]], grid.trace[d, 1, :])
    arm = grid.h * grid.stencil.lengths[d]
    b = grid.rho[d, 0, :] * arm
    a = grid.rho[d, 1, :] * arm
    return (a * a * vp - b * b * vm - (a * a - b * b) * phi) / (a * b * (a + b))


def gradient_field(field):
    """Gradient samples at every interior node.

    Axis derivatives use three-point unequal-arm formulas, so nodes next to
    the boundary pick up the Dirichlet trace through the short arm.  The
    symmetry defect compares the two discrete mixed partials of phi on nodes
    with full interior neighbourhoods.
    """
    grid = field.grid
    phi = field.values
    dx, dy = grid.stencil.axis_x, grid.stencil.axis_y
    y1 = _first_difference(grid, phi, dx)
    y2 = _first_difference(grid, phi, dy)
    samples = np.stack([y1, y2], axis=-1)

    # d(y1)/du2 - d(y2)/du1 by centered differences on the node lattice
    full = np.all(grid.nbr[[dx, dy], :, :] >= 0, axis=(0, 1))
    idx = np.where(full)[0]
    defect = 0.0
    if len(idx):
        ypx = grid.nbr[dx, 0, idx]
        ymx = grid.nbr[dx, 1, idx]
        ypy = grid.nbr[dy, 0, idx]
        ymy = grid.nbr[dy, 1, idx]
        d12 = (y1[ypy] - y1[ymy]) / (2.0 * grid.h)
        d21 = (y2[ypx] - y2[ymx]) / (2.0 * grid.h)
        defect = float(np.max(np.abs(d12 - d21)))
    return GradientField(grid=grid, samples=samples, jacobian_symmetry_defect=defect)


def cyclic_monotonicity_violation(grad, n_pairs=10000, seed=0):
    """Worst value of (y(u) - y(u')) . (u - u') over random node pairs (>= 0 expected)."""
    rng = np.random.default_rng(seed)
    k = grad.grid.n_interior
    a = rng.integers(0, k, n_pairs)
    b = rng.integers(0, k, n_pairs)
    du = grad.grid.points[a] - grad.grid.points[b]
    dy = grad.samples[a] - grad.samples[b]
    return float(np.min(np.einsum("ij,ij->i", dy, du)))


# ---------------------------------------------------------------------------
# discrete Legendre transform
# ---------------------------------------------------------------------------

@dataclass
class LegendreTable:
    """Discrete convex conjugate phi*(y) = max_u (u.y - phi(u)) on a raster."""

    window: np.ndarray      # (2, 2) [[xmin, xmax], [ymin, ymax]]
    y1: np.ndarray          # (res,) pixel centers
    y2: np.ndarray
    values: np.ndarray      # (res, res), index [i, j] = (y1[i], y2[j])
    argmax_node: np.ndarray


def default_window(field, scale=8.0):
    """Axis-aligned box centered at the mean wedge apex, half side scale * diam."""
    cfg = field.grid.cfg
    apexes = np.array([geometry.wedge(cfg, i).apex for i in range(cfg.n)])
    center = apexes.mean(axis=0)
    r = scale * cfg.diameter
    return np.array([[center[0] - r, center[0] + r], [center[1] - r, center[1] + r]])


def legendre_transform(field, window=None, resolution=128, chunk=2048):
    """Evaluate the conjugate on a raster, recording the maximizing node."""
    if window is None:
        window = default_window(field)
    window = np.asarray(window, dtype=float)
    res = int(resolution)
    y1 = window[0, 0] + (np.arange(res) + 0.5) * (window[0, 1] - window[0, 0]) / res
    y2 = window[1, 0] + (np.arange(res) + 0.5) * (window[1, 1] - window[1, 0]) / res
    pts = field.grid.points
    phi = field.values
    vals = np.empty((res, res))
    argm = np.empty((res, res), dtype=np.int64)
    ys = np.stack(np.meshgrid(y1, y2, indexing="ij"), axis=-1).reshape(-1, 2)
    for lo in range(0, len(ys), chunk):
        blk = ys[lo:lo + chunk]
        scores = blk @ pts.T - phi[None, :]
        am = np.argmax(scores, axis=1)
        vals.reshape(-1)[lo:lo + chunk] = scores[np.arange(len(blk)), am]
        argm.reshape(-1)[lo:lo + chunk] = am
    return LegendreTable(window=window, y1=y1, y2=y2, values=vals, argmax_node=argm)


# ---------------------------------------------------------------------------
# vertex subgradient sets
# ---------------------------------------------------------------------------

@dataclass
class VertexSubgradientSet:
    """Polygonal window clip of the subgradient set at vertex p_i.

    Half-planes come from the global inequality phi(u) - b_i >= y . (u - p_i)
    over the polygon vertices (exact data) and a farthest-point subsample of
    the grid nodes, intersected with the window box.
    """

    vertex_index: int
    normals: np.ndarray          # (q, 2) constraint normals u - p_i
    offsets: np.ndarray          # (q,) phi(u) - b_i
    clipped_polygon: np.ndarray  # (v, 2) vertices inside the window
    wedge: geometry.WedgeRegion
    window: np.ndarray

    def wedge_violation(self):
        """Max distance by which the clipped polygon leaves its wedge."""
        if len(self.clipped_polygon) == 0:
            return 0.0
        d = self.wedge.violation_distances(self.clipped_polygon)
        return float(np.max(d))

    def contains(self, y, tol=0.0):
        y = np.asarray(y, dtype=float)
        scale = np.linalg.norm(self.normals, axis=1)
        v = (y @ self.normals.T - self.offsets) / np.maximum(scale, 1e-300)
        return np.all(v <= tol, axis=-1)


def _farthest_point_subset(pts, count, start):
    """Greedy farthest-point selection; deterministic given the start index."""
    k = len(pts)
    if count >= k:
        return np.arange(k)
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(pts - pts[start], axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return np.sort(chosen)


def subgradient_set(field, i, window=None, max_constraints=5000):
    """Window clip of C_{p_i} from the global subgradient inequalities."""
    grid = field.grid
    cfg = grid.cfg
    if window is None:
        window = default_window(field)
    window = np.asarray(window, dtype=float)
    pi = cfg.points[i]
    bi = cfg.boundary_values[i]

    start = int(np.argmax(np.linalg.norm(grid.points - pi, axis=1)))
    sel = _farthest_point_subset(grid.points, max_constraints, start)
    normals = np.concatenate([
        np.delete(cfg.points, i, axis=0) - pi,
        grid.points[sel] - pi,
    ])
    offsets = np.concatenate([
        np.delete(cfg.boundary_values, i) - bi,
        field.values[sel] - bi,
    ])

    poly = np.array([[window[0, 0], window[1, 0]], [window[0, 1], window[1, 0]],
                     [window[0, 1], window[1, 1]], [window[0, 0], window[1, 1]]])
    order = np.argsort(-np.linalg.norm(normals, axis=1))
    for j in order:
        poly = clip_halfplane(poly, normals[j], offsets[j])
        if len(poly) == 0:
            raise SubgradientEmptyError(
                f"subgradient set of vertex {i} is empty in the window; "
                "solver output is inconsistent")
    return VertexSubgradientSet(vertex_index=i, normals=normals, offsets=offsets,
                                clipped_polygon=poly, wedge=geometry.wedge(cfg, i),
                                window=window)


# ---------------------------------------------------------------------------
# amoeba raster
# ---------------------------------------------------------------------------

GRADIENT_CLASS = 255
UNDETERMINED = 0


@dataclass
class AmoebaRaster:
    """Pixel classification of the slope plane.

    occupancy: 0 undetermined, 1..n subgradient set of vertex i-1,
    255 gradient image.  Classes are exclusive by construction; conflicts
    (pixels carrying both a subgradient membership and a gradient witness)
    are counted separately.
    """

    window: np.ndarray
    resolution: int
    occupancy: np.ndarray
    conflicts: int
    legend: dict = dc_field(default_factory=dict)

    def class_area(self, label):
        pix = ((self.window[0, 1] - self.window[0, 0]) / self.resolution
               * (self.window[1, 1] - self.window[1, 0]) / self.resolution)
        return float(np.count_nonzero(self.occupancy == label) * pix)


def amoeba_raster(field, window=None, resolution=256, grad=None,
                  subgradients=None, legendre=None, interior_depth=None):
    """Classify pixels as gradient image, subgradient set, or undetermined.

    A pixel is a subgradient pixel when its center lies in the clipped
    C_{p_i}; otherwise it is gradient image when a gradient sample lands in
    it or the conjugate maximizer at its center sits deep inside the polygon;
    otherwise undetermined.
    """
    grid = field.grid
    cfg = grid.cfg
    if window is None:
        window = default_window(field)
    window = np.asarray(window, dtype=float)
    res = int(resolution)
    if grad is None:
        grad = gradient_field(field)
    if subgradients is None:
        subgradients = [subgradient_set(field, i, window=window) for i in range(cfg.n)]
    if legendre is None:
        legendre = legendre_transform(field, window=window, resolution=res)
    if interior_depth is None:
        interior_depth = 2.0 * grid.h

    occupancy = np.zeros((res, res), dtype=np.uint8)
    y1 = legendre.y1
    y2 = legendre.y2
    pix = np.stack(np.meshgrid(y1, y2, indexing="ij"), axis=-1).reshape(-1, 2)

    # subgradient membership from the clipped polygons
    sub_mask = np.zeros((cfg.n, res * res), dtype=bool)
    for i, sub in enumerate(subgradients):
        poly = sub.clipped_polygon
        if len(poly) < 3:
            continue
        inside = np.ones(res * res, dtype=bool)
        m = len(poly)
        for a in range(m):
            bidx = (a + 1) % m
            e = poly[bidx] - poly[a]
            inside &= ((pix - poly[a]) @ np.array([-e[1], e[0]])) >= 0.0
        sub_mask[i] = inside
        occupancy.reshape(-1)[inside & (occupancy.reshape(-1) == 0)] = i + 1

    # gradient witnesses
    gx = np.floor((grad.samples[:, 0] - window[0, 0]) / (window[0, 1] - window[0, 0]) * res).astype(int)
    gy = np.floor((grad.samples[:, 1] - window[1, 0]) / (window[1, 1] - window[1, 0]) * res).astype(int)
    okw = (gx >= 0) & (gx < res) & (gy >= 0) & (gy < res)
    witness = np.zeros((res, res), dtype=bool)
    witness[gx[okw], gy[okw]] = True

    # deep-interior conjugate maximizer
    deep = grid.dist_bdry[legendre.argmax_node] > interior_depth

    flat = occupancy.reshape(-1)
    grad_signal = witness.reshape(-1) | deep.reshape(-1)
    conflicts = int(np.count_nonzero(witness.reshape(-1) & np.any(sub_mask, axis=0)))
    flat[(flat == 0) & grad_signal] = GRADIENT_CLASS

    legend = {str(UNDETERMINED): "undetermined",
              str(GRADIENT_CLASS): "gradient-image"}
    for i in range(cfg.n):
        legend[str(i + 1)] = f"subgradient-set vertex {i}"
    return AmoebaRaster(window=window, resolution=res, occupancy=occupancy,
                        conflicts=conflicts, legend=legend)


def export_pgm(raster, path):
    """Binary PGM with one gray level per class."""
    res = raster.resolution
    with open(path, "wb") as fh:
        fh.write(f"P5\n{res} {res}\n255\n".encode())
        # image rows scan y2 downward so the picture reads like a plot
        img = raster.occupancy.T[::-1]
        fh.write(img.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# mass balance and ray decay
# ---------------------------------------------------------------------------

def mass_balance(field, scales=(2.0, 4.0, 8.0), subgradients=None, max_constraints=5000):
    """Compare window area minus subgradient areas with the potential mass.

    The left side is polygon arithmetic on the clipped subgradient sets; the
    right side is the independent chord quadrature of integral_U V.  Reports
    the relative discrepancy per window and its trend.
    """
    grid = field.grid
    cfg = grid.cfg
    if grid.rhs_override is not None:
        mass = float(np.sum(grid.cell_v) * grid.h ** 2)
    else:
        mass = potential_mass(cfg)
    big = default_window(field, scale=max(scales))
    if subgradients is None:
        subgradients = [subgradient_set(field, i, window=big, max_constraints=max_constraints)
                        for i in range(cfg.n)]
    center = 0.5 * np.array([big[0, 0] + big[0, 1], big[1, 0] + big[1, 1]])
    rows = []
    for s in sorted(scales):
        r = s * cfg.diameter
        win_area = (2.0 * r) ** 2
        covered = 0.0
        for sub in subgradients:
            poly = sub.clipped_polygon
            for nrm, off in (((1.0, 0.0), center[0] + r), ((-1.0, 0.0), -(center[0] - r)),
                             ((0.0, 1.0), center[1] + r), ((0.0, -1.0), -(center[1] - r))):
                poly = clip_halfplane(poly, np.array(nrm), off)
            covered += polygon_area(poly)
        estimate = win_area - covered
        rows.append({
            "scale": float(s),
            "window_area": win_area,
            "subgradient_area": covered,
            "gradient_image_area": estimate,
            "relative_discrepancy": abs(estimate - mass) / mass if mass > 0 else np.inf,
        })
    discs = [r["relative_discrepancy"] for r in rows]
    return {
        "mass_quadrature": mass,
        "windows": rows,
        "stabilizing": bool(len(discs) < 2 or discs[-1] <= discs[0] + 0.02),
    }


def _ray_distance(y, apex, direction):
    rel = y - apex
    t = np.maximum(rel @ direction, 0.0)
    foot = apex + t[:, None] * direction
    return np.linalg.norm(y - foot, axis=1)


def ray_decay(field, grad=None, min_norm=1.0):
    """Distance from far gradient samples to the nearest wedge boundary ray.

    Fits log(dist) against log|y| over the outer decade of the sampled |y|
    (never below min_norm) and reports the slope, the empirical constant
    max(dist * |y|), and whether dist * |y| trends upward.  The gradient
    range is limited by the logarithmic blow-up rate, so the usable span is
    reported and flagged insufficient when it is too narrow to fit.
    """
    grid = field.grid
    cfg = grid.cfg
    if grad is None:
        grad = gradient_field(field)
    y = grad.samples
    norms = np.linalg.norm(y, axis=1)
    far = norms >= min_norm
    out = {"n_samples": int(np.count_nonzero(far)), "insufficient_range": False}
    if out["n_samples"] < 16:
        out["insufficient_range"] = True
        return out
    yf = y[far]
    nf = norms[far]
    dist = np.full(len(yf), np.inf)
    for i in range(cfg.n):
        w = geometry.wedge(cfg, i)
        for apex, direction in w.rays():
            dist = np.minimum(dist, _ray_distance(yf, apex, direction))
    lo = max(min_norm, float(np.max(nf)) / 10.0)
    if np.max(nf) < 2.0 * lo:
        out["insufficient_range"] = True
        out["max_norm"] = float(np.max(nf))
        return out
    decade = nf >= lo
    d = dist[decade]
    n = nf[decade]
    pos = d > 1e-14
    if np.count_nonzero(pos) < 8:
        out["insufficient_range"] = True
        return out
    lx = np.log10(n[pos])
    ly = np.log10(d[pos])
    coef = np.polyfit(lx, ly, 1)
    fitted = np.polyval(coef, lx)
    ss_res = float(np.sum((ly - fitted) ** 2))
    ss_tot = float(np.sum((ly - np.mean(ly)) ** 2))
    prod = dist * nf
    trend = np.polyfit(nf, prod, 1)[0]
    out.update({
        "exponent": float(coef[0]),
        "constant": float(np.max(prod)),
        "r2": 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0,
        "fit_range": [float(np.min(n)), float(np.max(n))],
        "product_trend_slope": float(trend),
        "product_no_growth": bool(trend <= 1e-9 + 0.01 * np.max(prod) / max(np.max(nf), 1.0)),
    })
    return out
