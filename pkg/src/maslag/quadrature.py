"""Adaptive quadrature of the singular potential over polygons and cells.

The monopole term 1/(2|u - p|) is integrable: in polar coordinates around p
it contributes (1/2) dr dtheta, so the integral over any convex region equals
half the integral over angle of the radial chord length.  Chord lengths of
convex regions are cheap ray clips, and adaptive Simpson handles the kinks
where the active edge changes.
"""

import numpy as np

__all__ = ["singular_cell_average", "potential_mass"]


def _adaptive_simpson(f, a, b, tol, max_depth=30):
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = (b - a) * (fa + 4.0 * fm + fb) / 6.0

    def recurse(a, fa, m, fm, b, fb, whole, tol, depth):
        lm = 0.5 * (a + m)
        rm = 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) * (fa + 4.0 * flm + fm) / 6.0
        right = (b - m) * (fm + 4.0 * frm + fb) / 6.0
        if depth >= max_depth or abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return (recurse(a, fa, lm, flm, m, fm, left, 0.5 * tol, depth + 1)
                + recurse(m, fm, rm, frm, b, fb, right, 0.5 * tol, depth + 1))

    return recurse(a, fa, m, fm, b, fb, whole, tol, 0)


def _halfplanes(verts):
    """Inward half-plane representation n.u >= d of a ccw convex polygon."""
    verts = np.asarray(verts, dtype=float)
    edges = np.roll(verts, -1, axis=0) - verts
    normals = np.stack([-edges[:, 1], edges[:, 0]], axis=-1)
    lens = np.linalg.norm(normals, axis=1)
    keep = lens > 0
    normals = normals[keep] / lens[keep, None]
    d = np.einsum("ij,ij->i", normals, verts[keep])
    return normals, d


def _chord(normals, d, center, theta):
    """Length of the ray {center + t (cos, sin)} inside the region, t >= 0."""
    w = np.array([np.cos(theta), np.sin(theta)])
    a = normals @ w
    b = normals @ center - d
    lo, hi = 0.0, np.inf
    for ai, bi in zip(a, b):
        if ai > 1e-300:
            lo = max(lo, -bi / ai)
        elif ai < -1e-300:
            hi = min(hi, -bi / ai)
        elif bi < 0:
            return 0.0
    return max(0.0, hi - lo)


def _angular_window(verts, center):
    """Angle interval covering the polygon as seen from center."""
    verts = np.asarray(verts, dtype=float)
    rel = verts - center
    r = np.linalg.norm(rel, axis=1)
    if np.all(r < 1e-300):
        return 0.0, 2.0 * np.pi
    inside = True
    m = len(verts)
    for a in range(m):
        b = (a + 1) % m
        e = verts[b] - verts[a]
        if (center - verts[a]) @ np.array([-e[1], e[0]]) < 0:
            inside = False
            break
    if inside:
        return 0.0, 2.0 * np.pi
    ref = np.arctan2(*(np.mean(rel, axis=0)[::-1]))
    ang = np.arctan2(rel[:, 1], rel[:, 0]) - ref
    ang = (ang + np.pi) % (2.0 * np.pi) - np.pi
    return ref + float(np.min(ang)), ref + float(np.max(ang))


def singular_chord_integral(verts, center, tol=1e-10):
    """Integral of 1/(2 |u - center|) over the convex polygon verts."""
    verts = np.asarray(verts, dtype=float)
    if len(verts) < 3:
        return 0.0
    normals, d = _halfplanes(verts)
    if len(normals) < 3:
        return 0.0
    t0, t1 = _angular_window(verts, center)
    if t1 <= t0:
        return 0.0
    # split at the angles of the vertices: the chord is smooth in between
    rel = verts - center
    r = np.linalg.norm(rel, axis=1)
    ang = np.arctan2(rel[:, 1], rel[:, 0])
    breaks = [t0, t1]
    for a, ri in zip(ang, r):
        if ri < 1e-300:
            continue
        for shift in (-2.0 * np.pi, 0.0, 2.0 * np.pi):
            v = a + shift
            if t0 < v < t1:
                breaks.append(v)
    breaks = sorted(set(breaks))
    total = 0.0
    f = lambda th: _chord(normals, d, np.asarray(center, dtype=float), th)
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        if hi - lo > 1e-14:
            total += _adaptive_simpson(f, lo, hi, tol * max(hi - lo, 1e-3))
    return 0.5 * total


def singular_cell_average(cell_verts, center, tol=1e-10):
    """Average of 1/(2 |u - center|) over a convex cell (possibly containing center)."""
    from .geometry import polygon_area
    area = polygon_area(cell_verts)
    if area <= 0.0:
        return 0.0
    return singular_chord_integral(cell_verts, center, tol=tol) / area


def potential_mass(cfg, tol=1e-10):
    """integral_U V du, computed independently of any solver grid.

    The constant A contributes A * area(U); each monopole term is integrated
    by the polar chord formula around its own vertex.  Used as the quadrature
    oracle for the gradient-image mass balance.
    """
    total = cfg.alf_constant * cfg.area
    for p in cfg.points:
        total += singular_chord_integral(cfg.points, p, tol=tol)
    return float(total)
