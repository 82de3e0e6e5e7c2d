"""Reduced gradient-graph assembly, residuals, and end asymptotics.

The reduced surface is the graph of the gradient map over the open polygon.
A graded triangulation (geometrically refined toward the boundary) carries
per-face residuals of the two structure identities: the determinant of the
gradient Jacobian against the potential, and the curl of the gradient field.
Per-edge end diagnostics measure the tangential gradient limit, the normal
divergence profile, and the decay laws along the asymptotic ends.
"""

from dataclasses import dataclass
import hashlib
import json

import numpy as np
from scipy.spatial import Delaunay
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator

from . import geometry
from .convexity import gradient_field

__all__ = ["ReducedGraphMesh", "EndDiagnostics", "MeshError", "EndResolutionError",
           "build_reduced_graph", "sl_residual_report", "extract_end",
           "appendix_constraint_check", "export_mesh", "load_mesh"]


class MeshError(RuntimeError):
    """Triangulation failed quality checks."""


class EndResolutionError(RuntimeError):
    """Not enough dyadic levels between the grid spacing and the edge."""


# ---------------------------------------------------------------------------
# interpolators cached on the field
# ---------------------------------------------------------------------------

def _interpolators(field):
    cache = getattr(field, "_maslag_interp", None)
    if cache is None:
        grad = gradient_field(field)
        pts = field.grid.points
        data = np.column_stack([field.values, grad.samples])
        tri = Delaunay(pts)
        lin = LinearNDInterpolator(tri, data)
        near = NearestNDInterpolator(pts, data)
        cache = {"lin": lin, "near": near, "grad": grad}
        field._maslag_interp = cache
    return cache


def field_samples(field, pts):
    """(phi, y1, y2) at arbitrary points: linear inside the node hull, nearest outside."""
    cache = _interpolators(field)
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    out = cache["lin"](pts)
    bad = ~np.isfinite(out[:, 0])
    if np.any(bad):
        out[bad] = cache["near"](pts[bad])
    return out


# ---------------------------------------------------------------------------
# graded mesh
# ---------------------------------------------------------------------------

@dataclass
class ReducedGraphMesh:
    """Triangulated graph samples (u1, u2, y1, y2) with per-face residuals."""

    cfg: object
    h: float
    vertices: np.ndarray       # (M, 2)
    phi: np.ndarray            # (M,)
    grad: np.ndarray           # (M, 2)
    faces: np.ndarray          # (F, 3)
    det_defect: np.ndarray     # (F,)
    curl_defect: np.ndarray    # (F,)
    face_area: np.ndarray
    face_depth: np.ndarray     # centroid distance to the boundary
    collar: np.ndarray         # bool, faces within the boundary collar
    euler_characteristic: int
    boundary_ends: int
    config_hash: str = ""

    def summary(self):
        return {
            "vertices": int(len(self.vertices)),
            "faces": int(len(self.faces)),
            "euler_characteristic": int(self.euler_characteristic),
            "boundary_ends": int(self.boundary_ends),
            "fiber_collapse": "circle fibers collapse over the polygon boundary",
        }


def _offset_polygon(cfg, depth):
    """Polygon shifted inward by depth (halfplane intersection), [] if empty."""
    poly = cfg.points
    for nrm, d in zip(cfg.inward_normals, cfg.edge_dot):
        poly = geometry.clip_halfplane(poly, -nrm, -(d + depth))
        if len(poly) < 3:
            return poly[:0]
    return poly


def _ring_points(poly, spacing):
    """Points along the polygon boundary at roughly the given spacing."""
    pts = []
    m = len(poly)
    for a in range(m):
        b = (a + 1) % m
        seg = poly[b] - poly[a]
        L = float(np.linalg.norm(seg))
        nseg = max(1, int(np.ceil(L / spacing)))
        for t in range(nseg):
            pts.append(poly[a] + (t / nseg) * seg)
    return np.asarray(pts)


def build_reduced_graph(field, h_min=None, growth=1.7, collar_factor=4.0):
    """Graded triangulation of the interior with gradient-graph residuals.

    Rings of points follow inward offsets of the polygon at geometrically
    growing depths starting from h_min (default 1.5 grid spacings); a coarse
    core fills the middle.  Vertex values interpolate the solved field, and
    each face stores the defect of det(DF) against the potential and the
    antisymmetric part of DF (scaled by 1/sqrt(V), so both are dimensionless).
    """
    grid = field.grid
    cfg = grid.cfg
    h = grid.h
    if h_min is None:
        h_min = 1.5 * h
    inradius = float(np.max(grid.dist_bdry))

    pts = []
    depth = h_min
    spacing = None
    while depth < 0.5 * inradius:
        poly = _offset_polygon(cfg, depth)
        if len(poly) < 3:
            break
        # ring spacing ~ sqrt(h * depth) keeps the fit error O(h) at fixed depth
        spacing = max(1.2 * h, 1.5 * np.sqrt(h * depth))
        pts.append(_ring_points(poly, spacing))
        depth *= growth
    if not pts:
        raise MeshError("polygon too small for the requested grading")
    core_spacing = spacing if spacing is not None else h_min
    core_depth = depth / growth
    lo = np.min(cfg.points, axis=0)
    hi = np.max(cfg.points, axis=0)
    xs = np.arange(lo[0], hi[0] + core_spacing, core_spacing)
    ys = np.arange(lo[1], hi[1] + core_spacing, core_spacing)
    mesh = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    core = mesh[cfg.boundary_margin(mesh) > core_depth]
    pts.append(core)
    vertices = np.concatenate(pts)

    # drop near-duplicates; they make degenerate triangles
    key = np.round(vertices / (0.25 * h_min)).astype(np.int64)
    _, keep = np.unique(key, axis=0, return_index=True)
    vertices = vertices[np.sort(keep)]

    tri = Delaunay(vertices)
    faces = tri.simplices.copy()

    def face_areas(fc):
        a = vertices[fc[:, 0]]
        b = vertices[fc[:, 1]]
        c = vertices[fc[:, 2]]
        return 0.5 * np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                            - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))

    # exactly-degenerate hull slivers come from collinear ring points
    area = face_areas(faces)
    faces = faces[area > 1e-12 * cfg.diameter ** 2]
    area = face_areas(faces)
    if len(faces) == 0:
        raise MeshError("triangulation degenerate")

    data = field_samples(field, vertices)
    phi = data[:, 0]
    grad = data[:, 1:3]

    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    e1 = np.stack([v1 - v0, v2 - v0], axis=1)
    y0 = grad[faces[:, 0]]
    dy = np.stack([grad[faces[:, 1]] - y0, grad[faces[:, 2]] - y0], axis=1)
    # J^T = E^{-1} Y  per face
    jt = np.linalg.solve(e1, dy)
    J = np.transpose(jt, (0, 2, 1))
    detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    curl = J[:, 0, 1] - J[:, 1, 0]

    centroid = (vertices[faces[:, 0]] + vertices[faces[:, 1]] + vertices[faces[:, 2]]) / 3.0
    if grid.rhs_override is not None:
        vc = np.asarray(grid.rhs_override(centroid), dtype=float)
    else:
        vc = geometry.potential(cfg, centroid)
    det_defect = np.abs(detJ - vc) / vc
    curl_defect = np.abs(curl) / np.sqrt(vc)
    depth_c = cfg.distance_to_boundary(centroid)
    collar = depth_c < collar_factor * h

    n_edges = len(_mesh_edges(faces))
    euler = len(vertices) - n_edges + len(faces)
    if euler != 1:
        raise MeshError(f"triangulation is not a disc: euler characteristic {euler}")

    return ReducedGraphMesh(cfg=cfg, h=h, vertices=vertices, phi=phi, grad=grad,
                            faces=faces, det_defect=det_defect, curl_defect=curl_defect,
                            face_area=area, face_depth=depth_c, collar=collar,
                            euler_characteristic=euler, boundary_ends=cfg.n,
                            config_hash=config_hash(cfg))


def _mesh_edges(faces):
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def config_hash(cfg):
    doc = geometry.config_to_dict(cfg)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def sl_residual_report(mesh, det_tol=0.02, curl_tol=None):
    """Quantiles of both defects; pass/fail on interior medians.

    Interior means outside the boundary collar; collar faces are reported
    separately.  curl_tol defaults to 25 h / sqrt(min edge).
    """
    if curl_tol is None:
        curl_tol = 25.0 * mesh.h / np.sqrt(float(np.min(mesh.cfg.edge_lengths)))
    interior = ~mesh.collar

    def quantiles(x):
        if len(x) == 0:
            return {"q50": None, "q90": None, "max": None}
        return {"q50": float(np.median(x)), "q90": float(np.quantile(x, 0.9)),
                "max": float(np.max(x))}

    det_int = quantiles(mesh.det_defect[interior])
    curl_int = quantiles(mesh.curl_defect[interior])
    worst = int(np.argmax(np.where(interior, mesh.det_defect, -np.inf)))
    report = {
        "interior_det_defect": det_int,
        "interior_curl_defect": curl_int,
        "collar_det_defect": quantiles(mesh.det_defect[mesh.collar]),
        "collar_curl_defect": quantiles(mesh.curl_defect[mesh.collar]),
        "det_tol": float(det_tol),
        "curl_tol": float(curl_tol),
        "worst_face_centroid": [float(c) for c in
                                np.mean(mesh.vertices[mesh.faces[worst]], axis=0)],
        "passed": bool(det_int["q50"] is not None
                       and det_int["q50"] <= det_tol
                       and curl_int["q50"] <= curl_tol),
    }
    return report


# ---------------------------------------------------------------------------
# end diagnostics
# ---------------------------------------------------------------------------

@dataclass
class EndDiagnostics:
    """Per-edge asymptotic measurements in the edge's standard frame."""

    edge_index: int
    c_measured: float
    c_error: float
    c_reference: float
    lip_local: float
    normal_divergence_profile: list      # (depth, outward normal gradient)
    u1_decay_fit: dict
    y2_decay_fit: dict
    exp_decay_fit: dict

    def to_dict(self):
        return {
            "edge_index": int(self.edge_index),
            "c_measured": float(self.c_measured),
            "c_error": float(self.c_error),
            "c_reference": float(self.c_reference),
            "lip_local": float(self.lip_local),
            "normal_divergence_profile": [[float(a), float(b)]
                                          for a, b in self.normal_divergence_profile],
            "u1_decay_fit": self.u1_decay_fit,
            "y2_decay_fit": self.y2_decay_fit,
            "exp_decay_fit": self.exp_decay_fit,
        }


def _loglog_fit(x, y):
    """Least-squares slope of log y against log x with R^2."""
    lx, ly = np.log(x), np.log(y)
    coef = np.polyfit(lx, ly, 1)
    fit = np.polyval(coef, lx)
    ss_res = float(np.sum((ly - fit) ** 2))
    ss_tot = float(np.sum((ly - np.mean(ly)) ** 2))
    return {
        "exponent": float(coef[0]),
        "constant": float(np.exp(coef[1])),
        "r2": 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0,
        "sample_range": [float(np.min(x)), float(np.max(x))],
        "n_samples": int(len(x)),
    }


def extract_end(field, i, depth=7):
    """Asymptotic diagnostics for the end over edge i.

    Samples the gradient at dyadic distances from the edge midpoint for the
    tangential limit (Richardson extrapolated at first order over the last
    three levels) and the normal divergence profile.  Decay fits use a band
    of stations along the middle of the edge, where the transverse deviation
    is nonzero even for symmetric data.  The exponential tail fit sums
    squared gradients of the tangential deviation over lattice cells binned
    by the distance coordinate along the end.
    """
    grid = field.grid
    cfg = grid.cfg
    h = grid.h
    if not 0 <= i < cfg.n:
        raise IndexError(f"edge index {i} out of range")
    frame = geometry.edge_frame(cfg, i)
    n_in = cfg.inward_normals[i]
    edge_vec = cfg.edges[i]
    L = cfg.edge_lengths[i]
    c_ref = float(cfg.offsets[i])

    # start close enough that the samples sit in the asymptotic regime; the
    # 1.5h floor keeps the deepest sample supported by the first node layers
    d0 = min(16.0 * h, 0.25 * cfg.min_width)
    depths = d0 * 0.5 ** np.arange(int(depth))
    depths = depths[depths >= 1.5 * h]
    if len(depths) < 4:
        raise EndResolutionError(
            f"only {len(depths)} dyadic levels between 1.5h and {d0:g}; need >= 4")

    mid = 0.5 * (cfg.points[i] + cfg.points[(i + 1) % cfg.n])
    probes = mid + depths[:, None] * n_in
    data = field_samples(field, probes)
    y = data[:, 1:3]
    tang = y @ edge_vec               # converges to c_i
    out_normal = -(y @ n_in)          # diverges to +infinity
    lip_local = float(np.max(np.linalg.norm(y, axis=1)))

    # Richardson extrapolation, first order in depth, over the last 3 levels.
    # The sharp convergence rate of the tangential component is not known
    # (only the 1/2 and 1 barrier exponents), so the reported error adds a
    # sqrt(h)-scale term on top of the extrapolant spread.
    g0, g1, g2 = tang[-3], tang[-2], tang[-1]
    e1 = 2.0 * g1 - g0
    e2 = 2.0 * g2 - g1
    c_measured = float(e2)
    c_error = float(abs(e2 - e1)) + 0.5 * np.sqrt(h) * lip_local

    profile = list(zip(depths.tolist(), out_normal.tolist()))

    # u1 against |y1| at the midpoint station
    ok = out_normal > 0
    if np.count_nonzero(ok) >= 3:
        u1_fit = _loglog_fit(out_normal[ok], depths[ok])
        u1_fit["orientation"] = "log(u1) vs log|y1|"
    else:
        u1_fit = {"exponent": None, "n_samples": int(np.count_nonzero(ok))}

    # transverse deviation against |y1| over off-center stations
    stations = np.array([0.3, 0.4, 0.6, 0.7]) * L
    dev_samples = []
    ynorm_samples = []
    for s in stations:
        base = frame.from_frame(np.stack([depths, np.full(len(depths), s)], axis=-1))
        dd = field_samples(field, base)
        yy = dd[:, 1:3]
        dev = np.abs(yy @ edge_vec - c_ref) / L
        yn = -(yy @ n_in)
        keep = (yn > 0) & (dev > 1e-12)
        dev_samples.append(dev[keep])
        ynorm_samples.append(yn[keep])
    dev_all = np.concatenate(dev_samples)
    yn_all = np.concatenate(ynorm_samples)
    if len(dev_all) >= 6:
        y2_fit = _loglog_fit(yn_all, dev_all)
        y2_fit["orientation"] = "log(transverse deviation) vs log|y1|"
    else:
        y2_fit = {"exponent": None, "n_samples": int(len(dev_all))}

    exp_fit = _tail_energy_fit(field, i, frame, c_ref, L)

    return EndDiagnostics(edge_index=i, c_measured=c_measured, c_error=c_error,
                          c_reference=c_ref, lip_local=lip_local,
                          normal_divergence_profile=profile,
                          u1_decay_fit=u1_fit, y2_decay_fit=y2_fit,
                          exp_decay_fit=exp_fit)


def _tail_energy_fit(field, i, frame, c_ref, L):
    """Exponential fit of the tail energy of the tangential deviation.

    E(R) sums |grad tau|^2 h^2 over lattice cells in the edge strip whose
    mean normal gradient exceeds R; tau is the tangential gradient deviation
    per unit edge length.  Fits log E(R) linearly in R.
    """
    grid = field.grid
    cfg = grid.cfg
    h = grid.h
    cache = _interpolators(field)
    y = cache["grad"].samples
    n_in = cfg.inward_normals[i]
    edge_vec = cfg.edges[i]

    w = frame.to_frame(grid.points)       # (u1, u2): u1 depth, u2 along edge
    strip = ((w[:, 0] < 0.5 * cfg.min_width)
             & (w[:, 1] > 0.15 * L) & (w[:, 1] < 0.85 * L))
    tau = (y @ edge_vec - c_ref) / L
    r_along = -(y @ n_in)

    dx, dy_ = grid.stencil.axis_x, grid.stencil.axis_y
    idx = np.where(strip)[0]
    px = grid.nbr[dx, 0, idx]
    py = grid.nbr[dy_, 0, idx]
    pxy = np.full(len(idx), -1, dtype=np.int64)
    okc = (px >= 0) & (py >= 0)
    pxy[okc] = grid.nbr[dy_, 0, px[okc]]
    cell_ok = okc & (pxy >= 0)
    a, b, c, d = idx[cell_ok], px[cell_ok], py[cell_ok], pxy[cell_ok]
    if len(a) < 24:
        return {"gamma": None, "r2": None, "n_cells": int(len(a))}
    gx = ((tau[b] + tau[d]) - (tau[a] + tau[c])) / (2.0 * h)
    gy = ((tau[c] + tau[d]) - (tau[a] + tau[b])) / (2.0 * h)
    e_cell = (gx ** 2 + gy ** 2) * h * h
    r_cell = (r_along[a] + r_along[b] + r_along[c] + r_along[d]) / 4.0

    r_lo = max(0.25 * float(np.max(r_cell)), float(np.quantile(r_cell, 0.5)))
    r_hi = float(np.max(r_cell))
    if r_hi <= r_lo:
        return {"gamma": None, "r2": None, "n_cells": int(len(a))}
    rs = np.linspace(r_lo, r_hi, 12)[:-1]
    E = np.array([float(np.sum(e_cell[r_cell >= r])) for r in rs])
    pos = E > 0
    if np.count_nonzero(pos) < 5:
        return {"gamma": None, "r2": None, "n_cells": int(len(a))}
    coef = np.polyfit(rs[pos], np.log(E[pos]), 1)
    fit = np.polyval(coef, rs[pos])
    resid = np.log(E[pos]) - fit
    ss_tot = float(np.sum((np.log(E[pos]) - np.mean(np.log(E[pos]))) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return {
        "gamma": float(-coef[0]),
        "constant": float(np.exp(coef[1])),
        "r2": r2,
        "window": [float(rs[pos][0]), float(rs[pos][-1])],
        "n_cells": int(len(a)),
    }


def appendix_constraint_check(ends):
    """Sum of the measured tangential limits; zero within n x extrapolation error."""
    total = float(sum(e.c_measured for e in ends))
    tol = len(ends) * max(e.c_error for e in ends)
    return {
        "sum_c_measured": total,
        "tolerance": tol,
        "per_edge": [{"edge": e.edge_index, "c_measured": e.c_measured,
                      "c_reference": e.c_reference, "c_error": e.c_error}
                     for e in ends],
        "passed": bool(abs(total) <= tol),
    }


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _header_lines(mesh, params=None):
    lines = [f"# config_hash={mesh.config_hash}", f"# h={mesh.h!r}"]
    if params is not None:
        lines.append("# params=" + json.dumps(params, sort_keys=True))
    return lines


def export_mesh(mesh, directory, params=None):
    """Write vertices, faces with residuals, and the (u1, u2, phi) companion.

    Floats are written with repr so a round-trip load reproduces the vertex
    coordinates exactly.
    """
    import os
    os.makedirs(directory, exist_ok=True)
    paths = {}

    p = os.path.join(directory, "mesh_vertices.csv")
    with open(p, "w") as fh:
        for line in _header_lines(mesh, params):
            fh.write(line + "\n")
        fh.write("vertex,u1,u2,y1,y2\n")
        for j, ((x, y), (g1, g2)) in enumerate(zip(mesh.vertices, mesh.grad)):
            fh.write(f"{j},{float(x)!r},{float(y)!r},{float(g1)!r},{float(g2)!r}\n")
    paths["vertices"] = p

    p = os.path.join(directory, "mesh_faces.csv")
    with open(p, "w") as fh:
        for line in _header_lines(mesh, params):
            fh.write(line + "\n")
        fh.write("v0,v1,v2,det_defect,curl_defect,area,collar\n")
        for f, dd, cc, ar, co in zip(mesh.faces, mesh.det_defect,
                                     mesh.curl_defect, mesh.face_area, mesh.collar):
            fh.write(f"{f[0]},{f[1]},{f[2]},{float(dd)!r},{float(cc)!r},{float(ar)!r},{int(co)}\n")
    paths["faces"] = p

    p = os.path.join(directory, "mesh_surface.csv")
    with open(p, "w") as fh:
        for line in _header_lines(mesh, params):
            fh.write(line + "\n")
        fh.write("vertex,u1,u2,phi\n")
        for j, ((x, y), v) in enumerate(zip(mesh.vertices, mesh.phi)):
            fh.write(f"{j},{float(x)!r},{float(y)!r},{float(v)!r}\n")
    paths["surface"] = p
    return paths


def load_mesh(directory):
    """Round-trip loader for the exported CSVs (exact float recovery)."""
    import os

    def read(path, cast):
        rows = []
        with open(path) as fh:
            for line in fh:
                if line.startswith("#") or not line.strip():
                    continue
                if any(ch.isalpha() for ch in line.split(",")[0]):
                    continue
                rows.append([c(tok) for c, tok in zip(cast, line.strip().split(","))])
        return rows

    verts = read(os.path.join(directory, "mesh_vertices.csv"),
                 [int, float, float, float, float])
    faces = read(os.path.join(directory, "mesh_faces.csv"),
                 [int, int, int, float, float, float, int])
    surf = read(os.path.join(directory, "mesh_surface.csv"),
                [int, float, float, float])
    return {
        "vertices": np.array([[r[1], r[2]] for r in verts]),
        "grad": np.array([[r[3], r[4]] for r in verts]),
        "faces": np.array([[r[0], r[1], r[2]] for r in faces], dtype=int),
        "det_defect": np.array([r[3] for r in faces]),
        "curl_defect": np.array([r[4] for r in faces]),
        "phi": np.array([r[3] for r in surf]),
    }
