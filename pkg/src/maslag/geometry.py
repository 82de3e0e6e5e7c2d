"""Problem instances: convex monopole polygons, boundary data, wedges, frames.

A problem instance is a convex polygon in the plane whose vertices carry
monopole points p_i and boundary values b_i, together with a nonnegative
constant A.  The scalar potential

    V(u) = A + sum_i 1 / (2 |u - p_i|)

is the right-hand side of the degenerate Monge-Ampere problem solved in
:mod:`maslag.solver`.  Everything here is pure geometry and is safe to call
concurrently once a config has been constructed.
"""

from dataclasses import dataclass, field
import json

import numpy as np

__all__ = [
    "ConfigError",
    "BoundaryToleranceError",
    "SingularPotentialError",
    "MonopoleConfig",
    "EdgeFrame",
    "WedgeRegion",
    "validate_config",
    "config_from_json",
    "config_to_dict",
    "potential",
    "boundary_value",
    "convex_envelope_init",
    "edge_frame",
    "wedge",
    "clip_halfplane",
    "clip_convex",
    "erode_convex",
    "regular_polygon",
    "box_polygon",
    "polygon_area",
    "convex_polygon_distance",
    "convex_hausdorff",
]

# Relative tolerance deciding whether a point sits on the boundary.
BOUNDARY_RTOL = 1e-9


class ConfigError(ValueError):
    """Invalid problem instance (degenerate polygon, bad A, bad schema)."""


class BoundaryToleranceError(ValueError):
    """A point expected on the polygon boundary is not there."""


class SingularPotentialError(ValueError):
    """The potential was evaluated exactly at a monopole point."""


def _rot90(v):
    """Counterclockwise quarter turn, (x, y) -> (-y, x)."""
    v = np.asarray(v, dtype=float)
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def _rot_minus90(v):
    """Clockwise quarter turn, (x, y) -> (y, -x)."""
    v = np.asarray(v, dtype=float)
    return np.stack([v[..., 1], -v[..., 0]], axis=-1)


@dataclass(frozen=True)
class MonopoleConfig:
    """Validated problem instance.

    points            (n, 2) monopole points, counterclockwise convex position
    boundary_values   (n,) values b_i prescribed at the vertices
    alf_constant      constant A >= 0 in the potential

    Derived quantities (edges, tangents, rotated normals, offsets c_i,
    half-plane representation) are computed once at construction.  Clockwise
    input is reversed rather than rejected.
    """

    points: np.ndarray
    boundary_values: np.ndarray
    alf_constant: float

    # derived, filled in __post_init__
    edges: np.ndarray = field(init=False, repr=False)
    edge_lengths: np.ndarray = field(init=False, repr=False)
    tangents: np.ndarray = field(init=False, repr=False)       # v_i
    rotated_tangents: np.ndarray = field(init=False, repr=False)  # R v_i, outward
    inward_normals: np.ndarray = field(init=False, repr=False)
    offsets: np.ndarray = field(init=False, repr=False)        # c_i = b_{i+1} - b_i
    edge_dot: np.ndarray = field(init=False, repr=False)       # inward_normals . p_i
    diameter: float = field(init=False, repr=False)
    min_width: float = field(init=False, repr=False)
    area: float = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        b = np.asarray(self.boundary_values, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ConfigError("points must be an (n, 2) array")
        n = pts.shape[0]
        if n < 3:
            raise ConfigError("need at least 3 monopole points")
        if b.shape != (n,):
            raise ConfigError("boundary_values must match the number of points")
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(b)):
            raise ConfigError("points and boundary_values must be finite")
        a = float(self.alf_constant)
        if not np.isfinite(a) or a < 0:
            raise ConfigError("alf_constant must be >= 0")

        scale = float(np.max(np.abs(pts))) or 1.0
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        if np.min(d2) <= (1e-12 * scale) ** 2:
            raise ConfigError("duplicate monopole points")

        cross = _turn_signs(pts)
        if np.all(cross < 0):
            pts = pts[::-1].copy()
            b = b[::-1].copy()
            cross = _turn_signs(pts)
        if not np.all(cross > 1e-12 * scale**2):
            raise ConfigError("degenerate polygon: points not in strict convex position")

        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "boundary_values", b)
        object.__setattr__(self, "alf_constant", a)

        edges = np.roll(pts, -1, axis=0) - pts
        lengths = np.linalg.norm(edges, axis=1)
        tangents = edges / lengths[:, None]
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "edge_lengths", lengths)
        object.__setattr__(self, "tangents", tangents)
        object.__setattr__(self, "rotated_tangents", _rot_minus90(tangents))
        object.__setattr__(self, "inward_normals", _rot90(tangents))
        object.__setattr__(self, "offsets", np.roll(b, -1) - b)
        object.__setattr__(self, "edge_dot", np.einsum("ij,ij->i", self.inward_normals, pts))
        object.__setattr__(self, "diameter", float(np.sqrt(np.max(d2[np.isfinite(d2)]))))
        margins = self.inward_normals @ pts.T - self.edge_dot[:, None]
        object.__setattr__(self, "min_width", float(np.min(np.max(margins, axis=1))))
        x, y = pts[:, 0], pts[:, 1]
        object.__setattr__(self, "area", 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def boundary_tol(self):
        return BOUNDARY_RTOL * self.diameter

    def boundary_margin(self, u):
        """Signed distance to each edge line, min over edges; > 0 inside."""
        u = np.asarray(u, dtype=float)
        vals = u @ self.inward_normals.T - self.edge_dot
        return np.min(vals, axis=-1)

    def contains(self, u, margin=0.0):
        return self.boundary_margin(u) > margin

    def distance_to_boundary(self, u):
        """Exact distance from interior points to the boundary polyline."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        best = np.full(u.shape[0], np.inf)
        for i in range(self.n):
            rel = u - self.points[i]
            t = np.clip(rel @ self.tangents[i], 0.0, self.edge_lengths[i])
            foot = self.points[i] + t[:, None] * self.tangents[i]
            best = np.minimum(best, np.linalg.norm(u - foot, axis=1))
        return best

    def ray_exit(self, origin, direction):
        """Parameter t > 0 where origin + t*direction leaves the polygon."""
        origin = np.asarray(origin, dtype=float)
        direction = np.asarray(direction, dtype=float)
        a = self.inward_normals @ direction
        b = self.inward_normals @ origin - self.edge_dot
        with np.errstate(divide="ignore"):
            t = np.where(a < 0, -b / a, np.inf)
        return float(np.min(t))


def _turn_signs(pts):
    e = np.roll(pts, -1, axis=0) - pts
    e_next = np.roll(e, -1, axis=0)
    return e[:, 0] * e_next[:, 1] - e[:, 1] * e_next[:, 0]


def validate_config(points, boundary_values, alf_constant=0.0):
    """Build a validated instance; clockwise input is auto-reversed."""
    return MonopoleConfig(np.asarray(points, dtype=float),
                          np.asarray(boundary_values, dtype=float),
                          float(alf_constant))


_CONFIG_KEYS = {"points", "b", "A"}


def config_from_json(source):
    """Load a config from a JSON file path, JSON string, or parsed dict.

    Schema: {"points": [[x, y], ...], "b": [...], "A": number}.
    Unknown keys are rejected.
    """
    if isinstance(source, dict):
        doc = source
    else:
        text = None
        try:
            with open(source) as fh:
                text = fh.read()
        except (OSError, TypeError):
            text = source
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config JSON must be an object")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    missing = _CONFIG_KEYS - set(doc)
    if missing:
        raise ConfigError(f"missing config keys: {sorted(missing)}")
    try:
        return validate_config(doc["points"], doc["b"], doc["A"])
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config values: {exc}") from exc


def config_to_dict(cfg):
    return {
        "points": [[float(x), float(y)] for x, y in cfg.points],
        "b": [float(v) for v in cfg.boundary_values],
        "A": float(cfg.alf_constant),
    }


# ---------------------------------------------------------------------------
# potential and boundary data
# ---------------------------------------------------------------------------

def potential(cfg, u):
    """V(u) = A + sum_i 1/(2 |u - p_i|); strictly positive away from vertices."""
    u = np.asarray(u, dtype=float)
    rel = u[..., None, :] - cfg.points
    dist = np.linalg.norm(rel, axis=-1)
    if np.any(dist == 0.0):
        raise SingularPotentialError("potential evaluated at a monopole point")
    return cfg.alf_constant + np.sum(0.5 / dist, axis=-1)


def boundary_value(cfg, u):
    """Affine interpolation of the vertex values along the containing edge."""
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    u2 = np.atleast_2d(u)
    m = u2.shape[0]
    best_d = np.full(m, np.inf)
    best_val = np.zeros(m)
    for i in range(cfg.n):
        rel = u2 - cfg.points[i]
        t = np.clip(rel @ cfg.tangents[i], 0.0, cfg.edge_lengths[i])
        foot = cfg.points[i] + t[:, None] * cfg.tangents[i]
        d = np.linalg.norm(u2 - foot, axis=1)
        val = cfg.boundary_values[i] + (t / cfg.edge_lengths[i]) * cfg.offsets[i]
        take = d < best_d
        best_d = np.where(take, d, best_d)
        best_val = np.where(take, val, best_val)
    if np.any(best_d > cfg.boundary_tol):
        worst = float(np.max(best_d))
        raise BoundaryToleranceError(
            f"point off the boundary by {worst:.3e} (tol {cfg.boundary_tol:.3e})")
    return float(best_val[0]) if single else best_val


# ---------------------------------------------------------------------------
# lower convex envelope of the lifted vertex data
# ---------------------------------------------------------------------------

def envelope_faces(cfg):
    """Affine pieces (g, c) of the lower convex envelope of {(p_i, b_i)}.

    The envelope is the max of the returned affine functions g.u + c.  Faces
    are found by enumerating vertex triples and keeping the planes that stay
    below all lifted points, which is exact for the small n used here.
    """
    pts, b = cfg.points, cfg.boundary_values
    n = cfg.n
    zscale = max(1.0, float(np.max(np.abs(b))))
    eps = 1e-10 * zscale
    faces = []
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                A = np.array([
                    [pts[i, 0], pts[i, 1], 1.0],
                    [pts[j, 0], pts[j, 1], 1.0],
                    [pts[k, 0], pts[k, 1], 1.0],
                ])
                try:
                    sol = np.linalg.solve(A, np.array([b[i], b[j], b[k]]))
                except np.linalg.LinAlgError:
                    continue
                vals = pts @ sol[:2] + sol[2]
                if np.all(b >= vals - eps):
                    faces.append(sol)
    if not faces:
        raise ConfigError("failed to build the lower envelope")
    return np.asarray(faces)


def convex_envelope_init(cfg, u, faces=None):
    """Lower convex envelope of the vertex data, evaluated at u.

    Agrees with :func:`boundary_value` on the boundary and is the maximal
    convex function with that boundary data, so it is a valid upper barrier
    for initializing the solver.
    """
    if faces is None:
        faces = envelope_faces(cfg)
    u = np.asarray(u, dtype=float)
    vals = u @ faces[:, :2].T + faces[:, 2]
    return np.max(vals, axis=-1)


# ---------------------------------------------------------------------------
# edge frames (standard position) and wedge regions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EdgeFrame:
    """Proper isometry mapping edge [p_i, p_{i+1}] onto {u1 = 0, u2 in [0, L]}.

    The polygon interior maps into the right half-plane u1 > 0.  The image of
    p_{i+1} is the origin and the image of p_i is (0, L), so u2 measures arc
    length from p_{i+1}.  The rotation part has determinant +1.
    """

    edge_index: int
    origin: np.ndarray
    rotation: np.ndarray
    edge_length: float

    def to_frame(self, u):
        u = np.asarray(u, dtype=float)
        return (u - self.origin) @ self.rotation.T

    def from_frame(self, w):
        w = np.asarray(w, dtype=float)
        return w @ self.rotation + self.origin


def edge_frame(cfg, i):
    if not 0 <= i < cfg.n:
        raise IndexError(f"edge index {i} out of range")
    rot = np.stack([cfg.inward_normals[i], -cfg.tangents[i]])
    return EdgeFrame(edge_index=i,
                     origin=cfg.points[(i + 1) % cfg.n].copy(),
                     rotation=rot,
                     edge_length=float(cfg.edge_lengths[i]))


@dataclass(frozen=True)
class WedgeRegion:
    """Wedge of slopes attached to vertex p_i.

    Constraints (one per adjacent edge):
        y . (p_{i+1} - p_i) <= b_{i+1} - b_i
        y . (p_{i-1} - p_i) <= b_{i-1} - b_i
    The apex is the intersection of the two constraint lines; the extremal
    rays leave the apex along the rotated edge tangents of edges i and i-1.
    """

    vertex_index: int
    apex: np.ndarray
    normals: np.ndarray       # (2, 2) rows: constraint normals
    offsets: np.ndarray       # (2,)
    ray_directions: np.ndarray  # (2, 2) unit rows

    def violation_distances(self, y):
        """Per-constraint signed distances; <= 0 means satisfied."""
        y = np.asarray(y, dtype=float)
        norms = np.linalg.norm(self.normals, axis=1)
        return (y @ self.normals.T - self.offsets) / norms

    def contains(self, y, tol=0.0):
        return np.all(self.violation_distances(y) <= tol, axis=-1)

    def opening_angle(self):
        d0, d1 = self.ray_directions
        return float(np.arccos(np.clip(np.dot(d0, d1), -1.0, 1.0)))

    def rays(self):
        return [(self.apex.copy(), self.ray_directions[0].copy()),
                (self.apex.copy(), self.ray_directions[1].copy())]


def wedge(cfg, i):
    if not 0 <= i < cfg.n:
        raise IndexError(f"vertex index {i} out of range")
    n = cfg.n
    e_fwd = cfg.edges[i]                      # p_{i+1} - p_i
    e_bwd = -cfg.edges[(i - 1) % n]           # p_{i-1} - p_i
    normals = np.stack([e_fwd, e_bwd])
    offsets = np.array([cfg.offsets[i], -cfg.offsets[(i - 1) % n]])
    apex = np.linalg.solve(normals, offsets)
    rays = np.stack([cfg.rotated_tangents[(i - 1) % n], cfg.rotated_tangents[i]])
    return WedgeRegion(vertex_index=i, apex=apex, normals=normals,
                       offsets=offsets, ray_directions=rays)


# ---------------------------------------------------------------------------
# small convex polygon kernel (floating point, tolerance based)
# ---------------------------------------------------------------------------

def clip_halfplane(verts, normal, offset):
    """Clip a convex polygon against {y . normal <= offset} (Sutherland-Hodgman)."""
    if len(verts) == 0:
        return verts
    verts = np.asarray(verts, dtype=float)
    s = verts @ np.asarray(normal, dtype=float) - offset
    keep = s <= 0.0
    if np.all(keep):
        return verts
    if not np.any(keep):
        return verts[:0]
    out = []
    m = len(verts)
    for a in range(m):
        b = (a + 1) % m
        if keep[a]:
            out.append(verts[a])
        if keep[a] != keep[b]:
            t = s[a] / (s[a] - s[b])
            out.append(verts[a] + t * (verts[b] - verts[a]))
    return np.asarray(out)


def box_polygon(center, half_side):
    cx, cy = float(center[0]), float(center[1])
    r = float(half_side)
    return np.array([[cx - r, cy - r], [cx + r, cy - r],
                     [cx + r, cy + r], [cx - r, cy + r]])


def polygon_area(verts):
    if len(verts) < 3:
        return 0.0
    x, y = np.asarray(verts, dtype=float).T
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _point_segment_distance(pts, a, b):
    ab = b - a
    L2 = float(ab @ ab)
    if L2 == 0.0:
        return np.linalg.norm(pts - a, axis=-1)
    t = np.clip((pts - a) @ ab / L2, 0.0, 1.0)
    foot = a + t[..., None] * ab
    return np.linalg.norm(pts - foot, axis=-1)


def _point_polygon_distance(pts, verts):
    """Distance from points to a convex polygon (0 inside)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    verts = np.asarray(verts, dtype=float)
    m = len(verts)
    d = np.full(pts.shape[0], np.inf)
    inside = np.ones(pts.shape[0], dtype=bool)
    for a in range(m):
        b = (a + 1) % m
        d = np.minimum(d, _point_segment_distance(pts, verts[a], verts[b]))
        edge = verts[b] - verts[a]
        inside &= ((pts - verts[a]) @ _rot90(edge)) >= 0.0
    d[inside] = 0.0
    return d


def convex_polygon_distance(pa, pb):
    """Minimum distance between two convex polygons (0 when they touch)."""
    pa, pb = np.asarray(pa, dtype=float), np.asarray(pb, dtype=float)
    if len(pa) == 0 or len(pb) == 0:
        return np.inf
    da = np.min(_point_polygon_distance(pa, pb))
    db = np.min(_point_polygon_distance(pb, pa))
    return float(min(da, db))


def convex_hausdorff(pa, pb):
    """Hausdorff distance between convex polygons (attained at vertices)."""
    pa, pb = np.asarray(pa, dtype=float), np.asarray(pb, dtype=float)
    if len(pa) == 0 or len(pb) == 0:
        return np.inf
    da = np.max(_point_polygon_distance(pa, pb))
    db = np.max(_point_polygon_distance(pb, pa))
    return float(max(da, db))


def clip_convex(subject, clip_poly):
    """Intersection of a convex polygon with a ccw convex clip polygon."""
    clip_poly = np.asarray(clip_poly, dtype=float)
    out = np.asarray(subject, dtype=float)
    m = len(clip_poly)
    for a in range(m):
        b = (a + 1) % m
        e = clip_poly[b] - clip_poly[a]
        normal = np.array([e[1], -e[0]])   # outward for ccw clip polygon
        out = clip_halfplane(out, normal, float(normal @ clip_poly[a]))
        if len(out) == 0:
            break
    return out


def erode_convex(verts, eps):
    """Shrink a convex polygon by eps (each edge line moved inward)."""
    verts = np.asarray(verts, dtype=float)
    if len(verts) < 3:
        return verts[:0]
    out = verts
    m = len(verts)
    for a in range(m):
        b = (a + 1) % m
        e = verts[b] - verts[a]
        L = np.linalg.norm(e)
        if L == 0:
            continue
        normal = np.array([e[1], -e[0]]) / L   # outward for ccw polygon
        out = clip_halfplane(out, normal, float(normal @ verts[a]) - eps)
        if len(out) == 0:
            break
    return out


def regular_polygon(center, radius, sides=128):
    ang = 2.0 * np.pi * np.arange(sides) / sides
    return np.stack([center[0] + radius * np.cos(ang),
                     center[1] + radius * np.sin(ang)], axis=-1)
