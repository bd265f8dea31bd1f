import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shellinv.constitutive import (InvertedConfigurationError, Koiter, ProjectedNeoHookean,
                                   koiter_response, lame_3d, projected_response)
from shellinv.kinematics import SurfaceGeometry, SurfacePointState, inv2

PAIRS = [(0, 0), (1, 1), (0, 1)]


def geom(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    inv, det = inv2(a)
    z = np.zeros(a.shape[:-2])
    return SurfaceGeometry(position=None, tangents=None, tangent_derivs=None, metric=a,
                           metric_inv=inv, jacobian=np.sqrt(det), normal=None, curvature=b,
                           contravariant=None, christoffel=z)


def state(A, B, a, b):
    return SurfacePointState(geom(A, B), geom(a, b))


def sym(i, j):
    e = np.zeros((2, 2))
    e[i, j] = e[j, i] = 1.0
    return e


def random_state(seed, curved=True, amp=0.1):
    rng = np.random.default_rng(seed)
    L = np.eye(2) + 0.3 * rng.normal(size=(2, 2))
    A = L @ L.T
    B = 0.2 * (rng.normal(size=(2, 2)) if curved else np.zeros((2, 2)))
    B = 0.5 * (B + B.T)
    D = amp * rng.normal(size=(2, 2))
    a = A + 0.5 * (D + D.T)
    db = 0.5 * rng.normal(size=(2, 2))
    return A, B, a, B + 0.5 * (db + db.T)


LAWS = [Koiter(2.0e3, 0.3, 0.1), ProjectedNeoHookean(2.0e3, 0.3, 0.1, n_layers=5),
        ProjectedNeoHookean(1.0e3, 0.0, 0.05)]


@pytest.mark.parametrize("law", LAWS, ids=["koiter", "projected", "projected_nu0"])
class TestConsistency:
    h = 1e-6

    def stresses_by_fd(self, law, A, B, a, b):
        tau, M0 = np.zeros((2, 2)), np.zeros((2, 2))
        for i, j in PAIRS:
            s = 1.0 if i == j else 0.5
            dE = (law.energy(state(A, B, a + self.h * sym(i, j), b))
                  - law.energy(state(A, B, a - self.h * sym(i, j), b))) / (2 * self.h)
            dB = (law.energy(state(A, B, a, b + self.h * sym(i, j)))
                  - law.energy(state(A, B, a, b - self.h * sym(i, j)))) / (2 * self.h)
            tau[i, j] = tau[j, i] = 2 * s * dE
            M0[i, j] = M0[j, i] = s * dB
        return tau, M0

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_stress_is_energy_gradient(self, law, seed):
        A, B, a, b = random_state(seed)
        r = law.response(state(A, B, a, b))
        tau, M0 = self.stresses_by_fd(law, A, B, a, b)
        np.testing.assert_allclose(r.tau, tau, rtol=1e-6, atol=1e-6 * np.abs(tau).max())
        np.testing.assert_allclose(r.M0, M0, rtol=1e-6, atol=1e-6 * np.abs(M0).max())

    @pytest.mark.parametrize("seed", [3, 4])
    def test_tangent_blocks(self, law, seed):
        A, B, a, b = random_state(seed)
        r = law.response(state(A, B, a, b))
        for g, d in PAIRS:
            pa = law.response(state(A, B, a + self.h * sym(g, d), b))
            ma = law.response(state(A, B, a - self.h * sym(g, d), b))
            pb = law.response(state(A, B, a, b + self.h * sym(g, d)))
            mb = law.response(state(A, B, a, b - self.h * sym(g, d)))
            fd = {"c": 2 * (pa.tau - ma.tau) / (2 * self.h), "e": 2 * (pa.M0 - ma.M0) / (2 * self.h),
                  "d": (pb.tau - mb.tau) / (2 * self.h), "f": (pb.M0 - mb.M0) / (2 * self.h)}
            for key, val in fd.items():
                blk = getattr(r, key)
                ref = max(np.abs(r.c).max() if key in "ce" else np.abs(r.f).max(), 1e-30)
                # an off-diagonal perturbation moves both a_gd and a_dg
                an = blk[:, :, g, d] if g == d else blk[:, :, g, d] + blk[:, :, d, g]
                np.testing.assert_allclose(an, val, atol=1e-6 * max(ref, np.abs(val).max()))

    def test_tangent_major_symmetry(self, law):
        A, B, a, b = random_state(7)
        r = law.response(state(A, B, a, b))
        np.testing.assert_allclose(r.c, np.transpose(r.c, (2, 3, 0, 1)), atol=1e-10 * np.abs(r.c).max())
        np.testing.assert_allclose(r.f, np.transpose(r.f, (2, 3, 0, 1)), atol=1e-10 * np.abs(r.f).max())
        np.testing.assert_allclose(r.d, np.transpose(r.e, (2, 3, 0, 1)), atol=1e-10 * np.abs(r.c).max())

    def test_stress_free_reference(self, law):
        A, B, _, _ = random_state(5)
        r = law.response(state(A, B, A, B))
        np.testing.assert_allclose(r.tau, 0.0, atol=1e-9 * law.E)
        np.testing.assert_allclose(r.M0, 0.0, atol=1e-9 * law.E)
        assert law.energy(state(A, B, A, B)) == pytest.approx(0.0, abs=1e-12 * law.E)


class TestSmallStrainAgreement:
    """The projected law linearizes to Koiter for a flat reference (small thickness)."""

    @given(st.integers(0, 10_000), st.floats(0.0, 0.45))
    @settings(max_examples=25, deadline=None)
    def test_linearization(self, seed, nu):
        A, _, a, b = random_state(seed, curved=False, amp=1e-6)
        b = 1e-6 * b
        B = np.zeros((2, 2))
        k = Koiter(1.0e3, nu, 0.1).response(state(A, B, a, b))
        p = ProjectedNeoHookean(1.0e3, nu, 0.1).response(state(A, B, a, b))
        np.testing.assert_allclose(p.tau, k.tau, rtol=1e-3, atol=1e-3 * np.abs(k.tau).max())
        np.testing.assert_allclose(p.M0, k.M0, rtol=1e-3, atol=1e-3 * np.abs(k.M0).max())
        np.testing.assert_allclose(p.c, k.c, rtol=1e-4, atol=1e-4 * np.abs(k.c).max())
        np.testing.assert_allclose(p.f, k.f, rtol=1e-4, atol=1e-4 * np.abs(k.f).max())

    def test_plane_stress_modulus(self):
        """Uniaxial stretch with free contraction (nu=0) gives Young's modulus times thickness."""
        law = Koiter(200.0, 0.0, 0.5)
        A = np.eye(2)
        eps = 1e-3
        r = law.response(state(A, np.zeros((2, 2)), np.diag([1 + 2 * eps, 1.0]), np.zeros((2, 2))))
        assert r.tau[0, 0] == pytest.approx(200.0 * 0.5 * eps, rel=1e-12)
        Lam, mu = law.surface_lame
        assert Lam == 0.0
        assert mu == pytest.approx(50.0)


class TestValidation:
    @pytest.mark.parametrize("args", [(-1.0, 0.3, 0.1), (1.0, 0.5, 0.1), (1.0, -1.0, 0.1), (1.0, 0.3, 0.0)])
    def test_bad_parameters(self, args):
        with pytest.raises(ValueError):
            Koiter(*args)
        with pytest.raises(ValueError):
            ProjectedNeoHookean(*args)

    def test_layers(self):
        with pytest.raises(ValueError):
            ProjectedNeoHookean(1.0, 0.3, 0.1, n_layers=1)
        z, w = ProjectedNeoHookean(1.0, 0.3, 0.4, n_layers=3).layers()
        assert w.sum() == pytest.approx(0.4)
        np.testing.assert_allclose(z, [-0.2 * np.sqrt(0.6), 0.0, 0.2 * np.sqrt(0.6)], atol=1e-15)

    def test_inverted_layer(self):
        law = ProjectedNeoHookean(1.0, 0.3, 0.2)
        A = np.eye(2)
        with pytest.raises(InvertedConfigurationError):
            # curvature so large that the outer layer metric turns indefinite
            law.response(state(A, np.zeros((2, 2)), A, np.diag([20.0, 0.0])))

    def test_wrong_law_type(self):
        A = np.eye(2)
        s = state(A, np.zeros((2, 2)), A, np.zeros((2, 2)))
        with pytest.raises(TypeError):
            projected_response(s, Koiter(1.0, 0.3, 0.1))
        with pytest.raises(TypeError):
            from shellinv.kinematics import strain_measures
            koiter_response(strain_measures(s), A, ProjectedNeoHookean(1.0, 0.3, 0.1))

    def test_lame(self):
        lam, mu = lame_3d(3.0e6, 0.3)
        assert mu == pytest.approx(3.0e6 / 2.6)
        assert lam == pytest.approx(3.0e6 * 0.3 / (1.3 * 0.4))
