import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shellinv.nurbs import (KnotVector, KnotVectorError, NurbsPatch, bezier_extraction,
                            make_cylindrical_panel, make_flat_strip)


def cox_de_boor(U, p, i, x):
    """Textbook recursion, with the right end of the last span included."""
    U = np.asarray(U, dtype=float)
    if p == 0:
        if U[i] <= x < U[i + 1]:
            return 1.0
        last = x == U[-1] and U[i] < U[i + 1] == U[-1]
        return 1.0 if last else 0.0
    out = 0.0
    if U[i + p] > U[i]:
        out += (x - U[i]) / (U[i + p] - U[i]) * cox_de_boor(U, p - 1, i, x)
    if U[i + p + 1] > U[i + 1]:
        out += (U[i + p + 1] - x) / (U[i + p + 1] - U[i + 1]) * cox_de_boor(U, p - 1, i + 1, x)
    return out


def bspline_1d(U, p, x):
    n = len(U) - p - 1
    return np.array([cox_de_boor(U, p, i, x) for i in range(n)])


def random_patch(seed, p=2, q=3, nx=3, ny=2, rational=True):
    rng = np.random.default_rng(seed)
    kx = KnotVector(p, tuple([0.0] * (p + 1) + sorted(rng.uniform(0.1, 0.9, nx - 1)) + [1.0] * (p + 1)))
    ky = KnotVector(q, tuple([0.0] * (q + 1) + sorted(rng.uniform(0.1, 0.9, ny - 1)) + [1.0] * (q + 1)))
    n = kx.n_basis * ky.n_basis
    pts = rng.normal(size=(n, 3))
    w = rng.uniform(0.5, 2.0, n) if rational else np.ones(n)
    return NurbsPatch(kx, ky, pts, w)


class TestKnotVector:
    def test_uniform_counts(self):
        kv = KnotVector.uniform(2, 5)
        assert kv.n_elements == 5
        assert kv.n_basis == 7

    @pytest.mark.parametrize("knots", [(0, 0, 1, 1, 1), (0, 0, 0, 0.7, 0.3, 1, 1, 1),
                                        (0, 0.1, 0, 1, 1, 1), (0, 0, 0, 0.5, 0.5, 0.5, 1, 1, 1)])
    def test_invalid(self, knots):
        with pytest.raises(KnotVectorError):
            KnotVector(2, knots)

    def test_greville_of_open_uniform(self):
        g = KnotVector.uniform(2, 2).greville()
        np.testing.assert_allclose(g, [0.0, 0.25, 0.75, 1.0])

    def test_find_element_right_end(self):
        kv = KnotVector.uniform(2, 4)
        assert kv.find_element(1.0) == 3
        assert kv.find_element(0.0) == 0


class TestBezierExtraction:
    def test_single_element_is_identity(self):
        C = bezier_extraction(KnotVector(2, (0, 0, 0, 1, 1, 1)))
        assert C.shape == (1, 3, 3)
        np.testing.assert_array_equal(C[0], np.eye(3))

    def test_two_elements_against_cox_de_boor(self):
        U = (0, 0, 0, 0.5, 1, 1, 1)
        kv = KnotVector(2, U)
        C = bezier_extraction(kv)
        assert C.shape == (2, 3, 3)
        from shellinv.nurbs import bernstein_basis
        for e, (a, b) in enumerate(kv.element_bounds):
            for t in np.linspace(-1, 1, 10):
                x = a + 0.5 * (t + 1) * (b - a)
                B = bernstein_basis(t, 2)[0]
                first = kv.spans[e] - 2
                ref = bspline_1d(U, 2, x)[first: first + 3]
                np.testing.assert_allclose(C[e] @ B, ref, atol=1e-12)

    @given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_rows_are_convex_combinations(self, p, nel, seed):
        rng = np.random.default_rng(seed)
        inner = sorted(rng.uniform(0.05, 0.95, nel - 1))
        kv = KnotVector(p, tuple([0.0] * (p + 1) + inner + [1.0] * (p + 1)))
        C = bezier_extraction(kv)
        assert np.all(C >= -1e-14)
        # columns combine Bernstein polynomials; each column of C^e sums to one
        np.testing.assert_allclose(C.sum(axis=1), 1.0, atol=1e-12)


class TestBasis:
    def test_polynomial_case_matches_cox_de_boor(self):
        patch = random_patch(1, rational=False)
        rng = np.random.default_rng(0)
        for _ in range(10):
            xi, eta = rng.uniform(0, 1, 2)
            e, parent = patch.locate(xi, eta)
            be = patch.eval_basis(e, parent)
            full = np.outer(bspline_1d(patch.kv_eta.knots, 3, eta),
                            bspline_1d(patch.kv_xi.knots, 2, xi)).ravel()
            np.testing.assert_allclose(be.N, full[be.nodes], atol=1e-12)

    @given(st.integers(0, 5), st.floats(-1, 1), st.floats(-1, 1), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_partition_of_unity(self, e, u, v, seed):
        patch = random_patch(seed)
        be = patch.eval_basis(e % patch.n_elements, [u, v])
        assert abs(be.N.sum() - 1.0) < 1e-13
        np.testing.assert_allclose(be.dN.sum(-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(be.ddN.sum(-1), 0.0, atol=1e-8)

    def test_rational_derivatives_by_central_differences(self):
        patch = random_patch(3)
        e = 4
        (x0, x1), (y0, y1) = patch.element_span(e)
        t = np.array([0.3, -0.4])
        h = 1e-5
        be = patch.eval_basis(e, t)
        scale = np.array([2.0 / (x1 - x0), 2.0 / (y1 - y0)])
        for a in range(2):
            dt = np.zeros(2)
            dt[a] = h * scale[a]
            plus, minus = patch.eval_basis(e, t + dt), patch.eval_basis(e, t - dt)
            np.testing.assert_allclose((plus.N - minus.N) / (2 * h), be.dN[a], rtol=1e-6, atol=1e-6)
            np.testing.assert_allclose((plus.dN - minus.dN) / (2 * h), be.ddN[a], rtol=1e-6, atol=1e-5)

    def test_unit_weights_reduce_to_bspline(self):
        a, b = random_patch(5, rational=False), random_patch(5, rational=False)
        b.weights[:] = 3.7
        ea, eb = a.eval_basis(2, [0.1, 0.2]), b.eval_basis(2, [0.1, 0.2])
        np.testing.assert_allclose(ea.ddN, eb.ddN, atol=1e-12)

    def test_out_of_range_element(self):
        patch = random_patch(0)
        with pytest.raises(IndexError):
            patch.eval_basis(patch.n_elements, [0.0, 0.0])


def patch_area(patch, n=4):
    from shellinv.assembly import ShellModel
    from shellinv.constitutive import Koiter
    model = ShellModel(patch, Koiter(1.0, 0.0, 1.0))
    return float(model.dA.sum())


class TestGeometryBuilders:
    def test_cantilever_strip_area(self):
        strip = make_flat_strip(10.0, 1.0, 2, 40, 4)
        assert patch_area(strip) == pytest.approx(10.0, rel=1e-13)
        np.testing.assert_allclose(strip.control_points[:, 2], 0.0)

    def test_buckling_strip_mesh(self):
        strip = make_flat_strip(5.0, 1.0, 2, 40, 8)
        assert strip.n_elements == 320
        assert patch_area(strip) == pytest.approx(5.0, rel=1e-13)

    def test_metric_constant_per_element(self):
        from shellinv.kinematics import surface_geometry
        strip = make_flat_strip(3.0, 2.0, 2, 3, 2)
        pts = np.array([[-0.7, -0.2], [0.1, 0.9], [0.8, -0.9]])
        for e in range(strip.n_elements):
            be = strip.eval_basis(e, pts)
            g = surface_geometry(be.N, be.dN, be.ddN, strip.control_points[be.nodes[0]])
            np.testing.assert_allclose(g.metric, np.broadcast_to(g.metric[0], g.metric.shape), atol=1e-12)
            np.testing.assert_allclose(g.curvature, 0.0, atol=1e-12)

    def test_downward_normal(self):
        from shellinv.kinematics import surface_geometry
        strip = make_flat_strip(5.0, 1.0, 2, 4, 2, normal_down=True)
        be = strip.eval_basis(0, [0.0, 0.0])
        g = surface_geometry(be.N[None], be.dN[None], be.ddN[None], strip.control_points[be.nodes][None])
        np.testing.assert_allclose(g.normal[0], [0, 0, -1], atol=1e-14)
        assert patch_area(strip) == pytest.approx(5.0, rel=1e-13)

    def test_cylindrical_panel_is_exact(self):
        R, L, B = 2540.0, 504.0, 504.0
        panel = make_cylindrical_panel(R, L, B, 2, 10, 8, quarter=True)
        rng = np.random.default_rng(2)
        for xi, eta in rng.uniform(0, 1, (20, 2)):
            x = panel.evaluate(xi, eta)
            assert np.hypot(x[1], x[2]) == pytest.approx(R, rel=1e-12)
        # quarter: axial length L/2 times arc length B/2
        assert patch_area(panel) == pytest.approx(0.25 * L * B, rel=1e-10)

    def test_full_panel_area(self):
        panel = make_cylindrical_panel(10.0, 4.0, 6.0, 3, 3, 4, quarter=False)
        assert patch_area(panel) == pytest.approx(24.0, rel=1e-10)

    def test_bad_dimensions(self):
        with pytest.raises(ValueError):
            make_flat_strip(-1.0, 1.0)
        with pytest.raises(ValueError):
            make_cylindrical_panel(1.0, 1.0, 7.0)


def test_patch_roundtrip(tmp_path):
    patch = random_patch(9)
    patch.dump(tmp_path / "p.json")
    back = NurbsPatch.load(tmp_path / "p.json")
    np.testing.assert_array_equal(back.control_points, patch.control_points)
    np.testing.assert_array_equal(back.weights, patch.weights)
    assert back.kv_xi.knots == patch.kv_xi.knots
