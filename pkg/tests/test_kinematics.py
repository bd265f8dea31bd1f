import numpy as np
import pytest

from shellinv.kinematics import (SingularElementError, SurfacePointState, deformation_tensors,
                                 inv2, strain_measures, surface_geometry)
from shellinv.nurbs import make_cylindrical_panel, make_flat_strip


def geometry_at(patch, e, pts, coords=None):
    be = patch.eval_basis(e, np.atleast_2d(pts))
    X = patch.control_points if coords is None else coords
    return surface_geometry(be.N[None], be.dN[None], be.ddN[None], X[be.nodes][None])


class TestInv2:
    def test_against_numpy(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(5, 2, 2))
        m = a @ np.swapaxes(a, 1, 2) + np.eye(2)
        inv, det = inv2(m)
        np.testing.assert_allclose(inv, np.linalg.inv(m), rtol=1e-12)
        np.testing.assert_allclose(det, np.linalg.det(m), rtol=1e-12)


class TestCylinder:
    R = 3.0

    @pytest.fixture
    def geom(self):
        panel = make_cylindrical_panel(self.R, 4.0, 2.0, 2, 3, 3, quarter=False)
        pts = np.array([[0.0, 0.0], [0.5, -0.3], [-0.8, 0.7]])
        return geometry_at(panel, 4, pts)

    def test_unit_normal_is_radial(self, geom):
        n = geom.normal[0]
        np.testing.assert_allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-14)
        radial = geom.position[0].copy()
        radial[:, 0] = 0.0
        radial /= np.linalg.norm(radial, axis=-1, keepdims=True)
        np.testing.assert_allclose(np.abs(np.sum(n * radial, axis=-1)), 1.0, atol=1e-12)

    def test_principal_curvatures(self, geom):
        k1, k2 = geom.principal_curvatures()
        big = np.maximum(np.abs(k1), np.abs(k2))
        small = np.minimum(np.abs(k1), np.abs(k2))
        np.testing.assert_allclose(big, 1.0 / self.R, rtol=1e-10)
        np.testing.assert_allclose(small, 0.0, atol=1e-12)
        np.testing.assert_allclose(geom.gaussian_curvature, 0.0, atol=1e-12)

    def test_dual_basis(self, geom):
        d = np.einsum("...ai,...bi->...ab", geom.contravariant, geom.tangents)
        np.testing.assert_allclose(d, np.broadcast_to(np.eye(2), d.shape), atol=1e-12)

    def test_christoffel_symmetry(self, geom):
        G = geom.christoffel
        np.testing.assert_allclose(G, np.swapaxes(G, -1, -2), atol=1e-14)


class TestFlat:
    def test_affine_map_has_no_christoffel(self):
        strip = make_flat_strip(2.0, 1.0, 3, 2, 2)
        g = geometry_at(strip, 1, [[0.2, 0.4], [-0.5, 0.1]])
        np.testing.assert_allclose(g.christoffel, 0.0, atol=1e-12)
        np.testing.assert_allclose(g.normal[0], [[0, 0, 1]] * 2, atol=1e-14)

    def test_collapsed_element_is_rejected(self):
        strip = make_flat_strip(2.0, 1.0, 2, 2, 2)
        X = strip.control_points.copy()
        X[:, 1] = 0.0
        with pytest.raises(SingularElementError):
            geometry_at(strip, 0, [[0.0, 0.0]], X)


class TestStrains:
    @pytest.fixture
    def strip(self):
        return make_flat_strip(2.0, 1.0, 2, 2, 2)

    def states(self, strip, x):
        pts = np.array([[0.1, -0.2], [0.6, 0.3]])
        ref = geometry_at(strip, 3, pts)
        cur = geometry_at(strip, 3, pts, x)
        return SurfacePointState(ref, cur)

    def test_rigid_motion_is_strain_free(self, strip):
        c, s = np.cos(0.7), np.sin(0.7)
        Q = np.array([[1, 0, 0], [0, c, -s], [0, s, c]]) @ np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
        st = self.states(strip, strip.control_points @ Q.T + [1.0, -2.0, 3.0])
        sm = strain_measures(st)
        np.testing.assert_allclose(sm.E, 0.0, atol=1e-13)
        np.testing.assert_allclose(sm.K, 0.0, atol=1e-13)
        np.testing.assert_allclose(st.stretch, 1.0, rtol=1e-13)

    def test_uniform_stretch(self, strip):
        x = strip.control_points * [1.2, 0.9, 1.0]
        st = self.states(strip, x)
        sm = strain_measures(st)
        A = st.ref.metric
        expected = 0.5 * np.einsum("...ab,b->...ab", A, [1.2**2 - 1, 0.9**2 - 1])
        np.testing.assert_allclose(sm.E, expected, atol=1e-12)
        np.testing.assert_allclose(st.stretch, 1.08, rtol=1e-12)
        F, C, B = deformation_tensors(st)
        np.testing.assert_allclose(F[0, 0], np.diag([1.2, 0.9, 0.0]), atol=1e-12)
        np.testing.assert_allclose(C[0, 0], np.diag([1.44, 0.81, 0.0]), atol=1e-12)

    def test_parabolic_bend_curvature(self, strip):
        """z = c x^2 lies in the quadratic space; compare b_11 with the graph formula."""
        c = 0.3
        X = strip.control_points
        ncp = strip.kv_xi.n_basis
        gx = strip.kv_xi.greville()
        # collocate on the first row of control points; x(xi) is linear
        N = np.zeros((ncp, ncp))
        for i, g in enumerate(gx):
            e, t = strip.locate(g, 0.0)
            be = strip.eval_basis(e, t)
            for k, A in enumerate(be.nodes):
                if A < ncp:
                    N[i, A % ncp] += be.N[k]
        xs = np.array([strip.evaluate(g, 0.0)[0] for g in gx])
        zc = np.linalg.solve(N, c * xs**2)
        x = X.copy()
        x[:, 2] = np.tile(zc, X.shape[0] // ncp)
        st = self.states(strip, x)
        pos = st.cur.position[0]
        dxdxi = st.ref.tangents[0, :, 0, 0]
        slope = 2 * c * pos[:, 0]
        expected = 2 * c * dxdxi**2 / np.sqrt(1 + slope**2)
        np.testing.assert_allclose(pos[:, 2], c * pos[:, 0] ** 2, atol=1e-12)
        np.testing.assert_allclose(strain_measures(st).K[0, :, 0, 0], expected, rtol=1e-10)
