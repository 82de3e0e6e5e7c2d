import json

import numpy as np
import pytest
from scipy.optimize import linprog

from maslag.geometry import (ConfigError, BoundaryToleranceError,
                             SingularPotentialError, validate_config,
                             config_from_json, potential, boundary_value,
                             convex_envelope_init, edge_frame, wedge,
                             clip_halfplane, box_polygon, polygon_area)
from maslag.quadrature import potential_mass

from conftest import equilateral_config, random_config_suite


class TestValidate:
    def test_equilateral_valid_offsets_telescope(self):
        cfg = equilateral_config()
        assert cfg.n == 3
        assert np.allclose(cfg.offsets, 0.0)
        assert abs(np.sum(cfg.offsets)) == 0.0

    def test_rotated_tangent_convention(self):
        # horizontal tangent maps to the downward normal
        cfg = validate_config([(0, 0), (1, 0), (1, 1), (0, 1)], [0, 0, 0, 0], 0)
        i = int(np.argmax([np.allclose(t, (1, 0)) for t in cfg.tangents]))
        assert np.allclose(cfg.rotated_tangents[i], (0, -1))

    def test_collinear_rejected(self):
        with pytest.raises(ConfigError, match="degenerate"):
            validate_config([(0, 0), (1, 0), (2, 0)], [0, 0, 0], 0)

    def test_duplicate_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            validate_config([(0, 0), (0, 0), (1, 1)], [0, 0, 0], 0)

    def test_negative_alf_rejected(self):
        with pytest.raises(ConfigError):
            equilateral = equilateral_config()
            validate_config(equilateral.points, equilateral.boundary_values, -1.0)

    def test_clockwise_auto_reversed(self):
        ccw = equilateral_config()
        cw = validate_config(ccw.points[::-1], ccw.boundary_values[::-1], 0.0)
        nxt = np.roll(cw.edges, -1, axis=0)
        signs = cw.edges[:, 0] * nxt[:, 1] - cw.edges[:, 1] * nxt[:, 0]
        assert np.all(signs > 0)

    def test_offsets_sum_zero_randomized(self):
        for cfg in random_config_suite(6, seed=3):
            assert abs(float(np.sum(cfg.offsets))) < 1e-14


class TestPotential:
    def test_equilateral_center(self):
        cfg = equilateral_config()
        assert potential(cfg, np.array([0.0, 0.0])) == pytest.approx(1.5, abs=1e-14)

    def test_single_term_at_half_distance(self):
        # one point at distance 1/2 contributes exactly 1 on top of A
        cfg = validate_config([(0.5, 0), (-0.3, 0.4), (-0.3, -0.4)], [0, 0, 0], 2.0)
        v = potential(cfg, np.array([0.0, 0.0]))
        expected = 2.0 + 1.0 + 0.5 / 0.5 + 0.5 / 0.5
        assert v == pytest.approx(expected, abs=1e-14)

    def test_singularity_signaled(self):
        cfg = equilateral_config()
        with pytest.raises(SingularPotentialError):
            potential(cfg, cfg.points[0])

    def test_lower_bound_on_closure(self):
        cfg = equilateral_config()
        rng = np.random.default_rng(1)
        pts = rng.uniform(-1, 1, (400, 2))
        pts = pts[cfg.contains(pts)]
        vals = potential(cfg, pts)
        bound = cfg.alf_constant + cfg.n / (2.0 * cfg.diameter)
        assert np.all(vals >= bound - 1e-12)


class TestBoundaryValue:
    def test_edge_midpoint(self):
        cfg = validate_config([(0, 0), (1, 0), (1, 1), (0, 1)], [0, 2, 0, 0], 0)
        mid = 0.5 * (cfg.points[0] + cfg.points[1])
        assert boundary_value(cfg, mid) == pytest.approx(1.0, abs=1e-12)

    def test_vertices_hit_b(self):
        cfg = validate_config([(0, 0), (1, 0), (1, 1), (0, 1)], [0.5, -1, 2, 3], 0)
        for p, b in zip(cfg.points, cfg.boundary_values):
            assert boundary_value(cfg, p) == pytest.approx(b, abs=1e-12)

    def test_interior_point_rejected(self):
        cfg = equilateral_config()
        with pytest.raises(BoundaryToleranceError):
            boundary_value(cfg, np.array([0.05, 0.0]))


def _envelope_lp(cfg, u):
    """Independent oracle: min sum(lam_i b_i) s.t. sum(lam_i p_i) = u, lam in simplex."""
    n = cfg.n
    res = linprog(cfg.boundary_values,
                  A_eq=np.vstack([cfg.points.T, np.ones(n)]),
                  b_eq=np.concatenate([u, [1.0]]),
                  bounds=[(0, None)] * n, method="highs")
    assert res.success
    return res.fun


class TestEnvelope:
    def test_flat_for_zero_data(self):
        cfg = equilateral_config()
        rng = np.random.default_rng(2)
        pts = rng.uniform(-0.4, 0.4, (50, 2))
        assert np.allclose(convex_envelope_init(cfg, pts), 0.0, atol=1e-12)

    def test_triangle_is_affine_plane(self):
        cfg = validate_config([(0, 0), (2, 0), (0, 2)], [1.0, 3.0, -1.0], 0)
        rng = np.random.default_rng(3)
        w = rng.dirichlet(np.ones(3), size=40)
        pts = w @ cfg.points
        vals = convex_envelope_init(cfg, pts)
        exact = w @ cfg.boundary_values
        assert np.allclose(vals, exact, atol=1e-12)

    def test_square_with_one_lifted_corner(self):
        cfg = validate_config([(-1, 1), (-1, -1), (1, -1), (1, 1)], [0, 0, 0, 1], 0)
        assert convex_envelope_init(cfg, np.array([0.0, 0.0])) == pytest.approx(0.0, abs=1e-12)

    def test_matches_lp_oracle(self):
        for cfg in random_config_suite(3, seed=7):
            rng = np.random.default_rng(11)
            w = rng.dirichlet(np.ones(cfg.n), size=15)
            pts = w @ cfg.points
            for u in pts:
                mine = float(convex_envelope_init(cfg, u))
                oracle = _envelope_lp(cfg, u)
                assert mine == pytest.approx(oracle, abs=1e-8)

    def test_agrees_with_boundary_data_on_edges(self):
        for cfg in random_config_suite(3, seed=9):
            for i in range(cfg.n):
                t = np.linspace(0, 1, 7)[:, None]
                pts = (1 - t) * cfg.points[i] + t * cfg.points[(i + 1) % cfg.n]
                env = convex_envelope_init(cfg, pts)
                bv = boundary_value(cfg, pts)
                assert np.allclose(env, bv, atol=1e-10)


class TestEdgeFrame:
    def test_identity_case(self):
        # square with interior at x > 0; the edge between (0,0) and (0,1)
        cfg = validate_config([(0, 0), (1, 0), (1, 1), (0, 1)], [0, 0, 0, 0], 0)
        i = next(i for i in range(4)
                 if np.allclose(sorted([tuple(cfg.points[i]),
                                        tuple(cfg.points[(i + 1) % 4])]),
                                [(0.0, 0.0), (0.0, 1.0)]))
        fr = edge_frame(cfg, i)
        pts = np.array([[0.3, 0.4], [0.9, 0.1]])
        assert np.allclose(fr.to_frame(pts), pts, atol=1e-14)

    def test_diagonal_edge_roundtrip(self):
        cfg = validate_config([(1, 0), (0, 1), (-1, 0), (0, -1)], [0, 0, 0, 0], 0)
        fr = edge_frame(cfg, 0)
        assert abs(np.linalg.det(fr.rotation) - 1.0) < 1e-14
        rng = np.random.default_rng(4)
        pts = rng.uniform(-2, 2, (64, 2))
        back = fr.from_frame(fr.to_frame(pts))
        assert np.max(np.abs(back - pts)) < 1e-12

    def test_edge_maps_to_segment_with_interior_right(self):
        for cfg in random_config_suite(4, seed=5):
            for i in range(cfg.n):
                fr = edge_frame(cfg, i)
                w = fr.to_frame(cfg.points)
                assert np.min(w[:, 0]) > -1e-12
                a = fr.to_frame(cfg.points[(i + 1) % cfg.n])
                b = fr.to_frame(cfg.points[i])
                assert np.allclose(a, (0, 0), atol=1e-12)
                assert np.allclose(b, (0, fr.edge_length), atol=1e-12)


class TestWedge:
    def test_equilateral_apexes_at_origin(self):
        cfg = equilateral_config()
        for i in range(3):
            w = wedge(cfg, i)
            assert np.allclose(w.apex, 0.0, atol=1e-14)
            assert w.opening_angle() < np.pi

    def test_apex_solves_both_constraints(self):
        for cfg in random_config_suite(4, seed=6):
            for i in range(cfg.n):
                w = wedge(cfg, i)
                oracle = np.linalg.solve(w.normals, w.offsets)
                assert np.allclose(w.apex, oracle, atol=1e-12)
                assert np.allclose(w.normals @ w.apex, w.offsets, atol=1e-10)

    def test_zero_data_wedges_tile_plane(self):
        cfg = equilateral_config()
        wedges = [wedge(cfg, i) for i in range(3)]
        rng = np.random.default_rng(8)
        ys = rng.uniform(-5, 5, (500, 2))
        membership = np.stack([w.contains(ys, tol=1e-9) for w in wedges])
        assert np.all(np.any(membership, axis=0))
        # multiple membership only near the boundary rays
        multi = np.count_nonzero(membership, axis=0) > 1
        for y in ys[multi]:
            dmin = min(abs(np.cross(d, y - w.apex))
                       for w in wedges for _, d in [w.rays()[0], w.rays()[1]])
            assert dmin < 1e-6 * np.linalg.norm(y) + 1e-9

    def test_generic_pairwise_intersection_bounded(self):
        cfg = validate_config(equilateral_config().points, [0.3, -0.1, -0.2], 0.0)
        wedges = [wedge(cfg, i) for i in range(3)]
        areas = {}
        for box in (100.0, 200.0):
            big = box_polygon((0, 0), box)
            total = 0.0
            for i in range(3):
                for j in range(i + 1, 3):
                    poly = big
                    for w in (wedges[i], wedges[j]):
                        for nrm, off in zip(w.normals, w.offsets):
                            poly = clip_halfplane(poly, nrm, off)
                    total += polygon_area(poly)
            areas[box] = total
        assert areas[100.0] == pytest.approx(areas[200.0], abs=1e-6)

    def test_ray_directions_are_rotated_tangents(self):
        cfg = equilateral_config()
        for i in range(3):
            w = wedge(cfg, i)
            assert np.allclose(w.ray_directions[0], cfg.rotated_tangents[(i - 1) % 3])
            assert np.allclose(w.ray_directions[1], cfg.rotated_tangents[i])


class TestInvariants:
    def test_rotated_tangents_unit_and_perpendicular(self):
        for cfg in random_config_suite(5, seed=10):
            dots = np.einsum("ij,ij->i", cfg.rotated_tangents, cfg.edges)
            assert np.max(np.abs(dots)) < 1e-12
            assert np.allclose(np.linalg.norm(cfg.rotated_tangents, axis=1), 1.0)

    def test_potential_mass_stable(self):
        cfg = equilateral_config()
        coarse = potential_mass(cfg, tol=1e-6)
        fine = potential_mass(cfg, tol=1e-10)
        assert coarse == pytest.approx(fine, rel=1e-4)   # 4 significant digits

    def test_potential_mass_alf_term(self):
        cfg0 = equilateral_config()
        cfg1 = validate_config(cfg0.points, cfg0.boundary_values, 2.0)
        assert potential_mass(cfg1) == pytest.approx(
            potential_mass(cfg0) + 2.0 * cfg0.area, rel=1e-9)


class TestConfigJson:
    def test_roundtrip(self, tmp_path):
        doc = {"points": [[1, 0], [-0.5, 0.8], [-0.5, -0.8]], "b": [0, 0.1, -0.1], "A": 0.5}
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(doc))
        cfg = config_from_json(str(p))
        assert cfg.alf_constant == 0.5

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            config_from_json({"points": [[1, 0], [0, 1], [-1, 0]], "b": [0, 0, 0],
                              "A": 0, "extra": 1})

    def test_missing_keys_rejected(self):
        with pytest.raises(ConfigError, match="missing"):
            config_from_json({"points": [[1, 0], [0, 1], [-1, 0]], "b": [0, 0, 0]})

    def test_malformed_json_rejected(self):
        with pytest.raises(ConfigError, match="malformed"):
            config_from_json("{not json")
