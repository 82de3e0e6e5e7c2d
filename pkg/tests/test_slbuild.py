import numpy as np
import pytest

from maslag import validate_config, solve, SolverParams
from maslag.slbuild import (build_reduced_graph, sl_residual_report,
                            extract_end, appendix_constraint_check,
                            export_mesh, load_mesh, EndResolutionError)

from conftest import (equilateral_config, unit_square_config, quadratic_exact,
                      quadratic_rhs, random_config_suite, end_scale_h, EDGE)


@pytest.fixture(scope="module")
def quad_mesh():
    cfg = unit_square_config()
    fld = solve(cfg, SolverParams(h=1.0 / 64), rhs=quadratic_rhs,
                boundary=quadratic_exact)
    return build_reduced_graph(fld)


@pytest.fixture(scope="module")
def eq_mesh_128(eq_field_128):
    return build_reduced_graph(eq_field_128)


@pytest.fixture(scope="module")
def eq_ends_128(eq_field_128):
    return [extract_end(eq_field_128, i) for i in range(3)]


class TestMesh:
    def test_quadratic_defects_tiny(self, quad_mesh):
        rep = sl_residual_report(quad_mesh, det_tol=1e-6, curl_tol=1e-6)
        assert rep["passed"]
        assert rep["interior_det_defect"]["max"] < 1e-8
        assert rep["interior_curl_defect"]["max"] < 1e-8

    def test_is_topological_disc(self, quad_mesh, eq_mesh_128):
        for mesh in (quad_mesh, eq_mesh_128):
            assert mesh.euler_characteristic == 1
            assert mesh.boundary_ends == mesh.cfg.n

    def test_faces_reference_valid_vertices(self, eq_mesh_128):
        assert eq_mesh_128.faces.min() >= 0
        assert eq_mesh_128.faces.max() < len(eq_mesh_128.vertices)
        assert np.all(eq_mesh_128.face_area > 0)

    def test_residuals_finite(self, eq_mesh_128):
        assert np.all(np.isfinite(eq_mesh_128.det_defect))
        assert np.all(np.isfinite(eq_mesh_128.curl_defect))

    def test_pentagon_mesh_builds(self):
        cfg = random_config_suite(3, seed=2)[2]
        assert cfg.n == 5
        fld = solve(cfg, SolverParams(h=cfg.min_width / 48))
        mesh = build_reduced_graph(fld)
        assert mesh.euler_characteristic == 1


class TestResidualReport:
    def test_collar_reported_separately(self, eq_mesh_128):
        rep = sl_residual_report(eq_mesh_128)
        assert "collar_det_defect" in rep
        assert rep["collar_det_defect"]["q50"] is not None
        # near-edge faces are worse than the interior on the singular problem
        assert rep["collar_det_defect"]["q50"] >= rep["interior_det_defect"]["q50"]

    def test_corrupted_field_fails(self, eq_field_128):
        import copy
        noisy = copy.copy(eq_field_128)
        rng = np.random.default_rng(0)
        noisy.values = eq_field_128.values + 1e-2 * rng.standard_normal(
            eq_field_128.grid.n_interior)
        if hasattr(noisy, "_maslag_interp"):
            del noisy._maslag_interp
        clean = sl_residual_report(build_reduced_graph(eq_field_128))
        dirty = sl_residual_report(build_reduced_graph(noisy))
        assert dirty["interior_det_defect"]["q50"] > 5 * clean["interior_det_defect"]["q50"]
        assert not dirty["passed"]

    def test_worst_face_location_reported(self, eq_mesh_128):
        rep = sl_residual_report(eq_mesh_128)
        assert len(rep["worst_face_centroid"]) == 2


class TestExtractEnd:
    def test_equilateral_tangential_limits(self, eq_field_128, eq_ends_128):
        h = eq_field_128.grid.h
        for e in eq_ends_128:
            assert abs(e.c_measured) <= 5.0 * np.sqrt(h) * e.lip_local

    def test_profile_strictly_increasing(self, eq_ends_128):
        for e in eq_ends_128:
            prof = e.normal_divergence_profile
            assert len(prof) >= 4
            grads = [g for _, g in prof]
            assert all(b > a for a, b in zip(grads, grads[1:]))

    def test_decay_exponents(self, eq_ends_128):
        for e in eq_ends_128:
            assert e.u1_decay_fit["exponent"] <= -1.6
            assert e.y2_decay_fit["exponent"] <= -0.8

    def test_exponential_tail(self, eq_ends_128):
        for e in eq_ends_128:
            assert e.exp_decay_fit["gamma"] > 0
            assert e.exp_decay_fit["r2"] >= 0.9

    def test_insufficient_resolution_raises(self, eq_cfg):
        fld = solve(eq_cfg, SolverParams(h=EDGE / 14, continuation_levels=1))
        with pytest.raises(EndResolutionError):
            extract_end(fld, 0)

    def test_bad_edge_index(self, eq_field_128):
        with pytest.raises(IndexError):
            extract_end(eq_field_128, 7)


class TestAppendixConstraint:
    def test_zero_data_sums_to_zero(self, eq_ends_128):
        rep = appendix_constraint_check(eq_ends_128)
        assert rep["passed"]
        assert abs(rep["sum_c_measured"]) <= rep["tolerance"]

    def test_triangle_with_telescoping_data(self):
        cfg = validate_config(equilateral_config().points, [0.1, -0.1, 0.0], 0.0)
        assert np.allclose(cfg.offsets, [-0.2, 0.1, 0.1])
        fld = solve(cfg, SolverParams(h=end_scale_h(cfg)))
        ends = [extract_end(fld, i) for i in range(3)]
        h = fld.grid.h
        for e in ends:
            assert abs(e.c_measured - e.c_reference) <= 5.0 * np.sqrt(h) * e.lip_local
        rep = appendix_constraint_check(ends)
        assert rep["passed"]


class TestExport:
    def test_roundtrip_exact(self, tmp_path, eq_mesh_128):
        export_mesh(eq_mesh_128, str(tmp_path))
        back = load_mesh(str(tmp_path))
        assert np.array_equal(back["vertices"], eq_mesh_128.vertices)
        assert np.array_equal(back["grad"], eq_mesh_128.grad)
        assert np.array_equal(back["faces"], eq_mesh_128.faces)
        assert np.array_equal(back["det_defect"], eq_mesh_128.det_defect)
        assert np.array_equal(back["phi"], eq_mesh_128.phi)

    def test_header_has_provenance(self, tmp_path, eq_mesh_128):
        paths = export_mesh(eq_mesh_128, str(tmp_path), params={"h": eq_mesh_128.h})
        head = open(paths["vertices"]).read().splitlines()[:3]
        assert head[0].startswith("# config_hash=")
        assert head[1].startswith("# h=")
        assert head[2].startswith("# params=")

    def test_faces_valid_in_export(self, tmp_path, eq_mesh_128):
        export_mesh(eq_mesh_128, str(tmp_path))
        back = load_mesh(str(tmp_path))
        f = back["faces"]
        assert f.min() >= 0 and f.max() < len(back["vertices"])
        v = back["vertices"]
        a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        areas = 0.5 * np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                             - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
        assert np.all(areas > 0)


class TestRefinementRates:
    def test_curl_decreases_with_h(self, eq_cfg, eq_field_64, eq_field_128):
        r64 = sl_residual_report(build_reduced_graph(eq_field_64))
        r128 = sl_residual_report(build_reduced_graph(eq_field_128))
        assert (r128["interior_curl_defect"]["q50"]
                < r64["interior_curl_defect"]["q50"])

    def test_quadratic_defects_scale_with_h(self):
        cfg = unit_square_config()
        meds = {}
        for denom in (32, 64):
            fld = solve(cfg, SolverParams(h=1.0 / denom), rhs=quadratic_rhs,
                        boundary=quadratic_exact)
            rep = sl_residual_report(build_reduced_graph(fld))
            meds[denom] = rep["interior_det_defect"]["max"]
        # exact data: defects at rounding level for all h
        assert max(meds.values()) < 1e-8
