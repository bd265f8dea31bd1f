"""Shell constitutive laws: Koiter and a through-thickness projected Neo-Hookean law.

Both return Kirchhoff membrane resultants ``tau^{ab}`` (work conjugate to
``a_ab / 2``), moments ``M0^{ab}`` (conjugate to ``b_ab``) and the four
tangent blocks

    c = 2 d tau / d a,   d = d tau / d b,   e = 2 d M0 / d a,   f = d M0 / d b

with all indices contravariant and ordered ``[a, b, g, d]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kinematics import SurfacePointState, StrainState, inv2, strain_measures


class InvertedConfigurationError(RuntimeError):
    pass


@dataclass
class StressState:
    tau: np.ndarray
    M0: np.ndarray
    c: np.ndarray
    d: np.ndarray
    e: np.ndarray
    f: np.ndarray


def lame_3d(E, nu):
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E / (2.0 * (1.0 + nu))
    return lam, mu


def _check_parameters(E, nu, T):
    if not E > 0:
        raise ValueError(f"Young's modulus must be positive, got {E}")
    if not -1.0 < nu < 0.5:
        raise ValueError(f"Poisson ratio must lie in (-1, 0.5), got {nu}")
    if not T > 0:
        raise ValueError(f"thickness must be positive, got {T}")


def _sym_pair(inv):
    """``g^ag g^bd + g^ad g^bg`` with index order ``[a, b, g, d]``."""
    t1 = np.einsum("...ag,...bd->...abgd", inv, inv)
    t2 = np.einsum("...ad,...bg->...abgd", inv, inv)
    return t1 + t2


@dataclass(frozen=True)
class Koiter:
    """Quadratic energy in membrane strain and curvature change.

    Surface Lame constants follow from thickness integration of a
    St. Venant-Kirchhoff solid under plane stress.
    """

    E: float
    nu: float
    thickness: float

    def __post_init__(self):
        _check_parameters(self.E, self.nu, self.thickness)

    @property
    def surface_lame(self):
        lam, mu = lame_3d(self.E, self.nu)
        T = self.thickness
        return T * 2.0 * lam * mu / (lam + 2.0 * mu), T * mu

    def response(self, state: SurfacePointState) -> StressState:
        return koiter_response(strain_measures(state), state.ref.metric_inv, self)

    def energy(self, state: SurfacePointState):
        s = strain_measures(state)
        Ai = state.ref.metric_inv
        Lam, mu = self.surface_lame

        def quad(X):
            tr = np.einsum("...ab,...ab->...", Ai, X)
            up = Ai @ X @ Ai
            return Lam * tr * tr + 2.0 * mu * np.einsum("...ab,...ab->...", X, up)

        return 0.5 * quad(s.E) + self.thickness**2 / 24.0 * quad(s.K)


def koiter_response(strain: StrainState, A_inv, law: Koiter) -> StressState:
    if not isinstance(law, Koiter):
        raise TypeError("koiter_response needs a Koiter law")
    Lam, mu = law.surface_lame
    T2 = law.thickness**2 / 12.0

    def resultant(X):
        tr = np.einsum("...ab,...ab->...", A_inv, X)
        return Lam * tr[..., None, None] * A_inv + 2.0 * mu * (A_inv @ X @ A_inv)

    c = Lam * np.einsum("...ab,...gd->...abgd", A_inv, A_inv) + mu * _sym_pair(A_inv)
    zero = np.zeros_like(c)
    return StressState(resultant(strain.E), T2 * resultant(strain.K), c, zero, zero, T2 * c)


def nh_3d_stress(g_inv, G_inv, Jstar, law):
    """Plane-stress 3D Kirchhoff stress of the compressible Neo-Hookean solid."""
    Jstar = np.asarray(Jstar, dtype=float)
    if np.any(~(Jstar > 0)):
        raise InvertedConfigurationError("non-positive layer area stretch")
    lam, mu = lame_3d(law.E, law.nu)
    l3sq = (lam + 2.0 * mu) / (lam * Jstar**2 + 2.0 * mu)
    return mu * G_inv - mu * l3sq[..., None, None] * g_inv


@dataclass(frozen=True)
class ProjectedNeoHookean:
    """Compressible Neo-Hookean solid integrated through the thickness.

    Layer metrics are linear in the thickness coordinate,
    ``g_ab(z) = a_ab - 2 z b_ab``; the thickness stretch is eliminated by
    the plane-stress condition.
    """

    E: float
    nu: float
    thickness: float
    n_layers: int = 4

    def __post_init__(self):
        _check_parameters(self.E, self.nu, self.thickness)
        if self.n_layers < 2:
            raise ValueError("need at least 2 through-thickness points")

    @property
    def surface_lame(self):
        return Koiter(self.E, self.nu, self.thickness).surface_lame

    def layers(self):
        z, w = np.polynomial.legendre.leggauss(self.n_layers)
        h = 0.5 * self.thickness
        return h * z, h * w

    def _layer_metrics(self, state):
        z, _ = self.layers()
        zz = z[:, None, None]
        g = state.cur.metric[..., None, :, :] - 2.0 * zz * state.cur.curvature[..., None, :, :]
        G = state.ref.metric[..., None, :, :] - 2.0 * zz * state.ref.curvature[..., None, :, :]
        g_inv, g_det = inv2(g)
        G_inv, G_det = inv2(G)
        if np.any(~(g_det > 0)) or np.any(~(G_det > 0)):
            raise InvertedConfigurationError("inverted shell layer")
        return g, G, g_inv, G_inv, np.sqrt(g_det / G_det)

    def response(self, state: SurfacePointState) -> StressState:
        return projected_response(state, self)

    def energy(self, state: SurfacePointState):
        z, w = self.layers()
        g, G, g_inv, G_inv, Js = self._layer_metrics(state)
        lam, mu = lame_3d(self.E, self.nu)
        l3sq = (lam + 2.0 * mu) / (lam * Js**2 + 2.0 * mu)
        J3 = Js * np.sqrt(l3sq)
        I1 = np.einsum("...ab,...ab->...", G_inv, g) + l3sq
        W = 0.25 * lam * (J3**2 - 1.0 - 2.0 * np.log(J3)) + 0.5 * mu * (I1 - 3.0 - 2.0 * np.log(J3))
        return W @ w


def projected_response(state: SurfacePointState, law: ProjectedNeoHookean) -> StressState:
    if not isinstance(law, ProjectedNeoHookean):
        raise TypeError("projected_response needs a ProjectedNeoHookean law")
    z, w = law.layers()
    g, G, g_inv, G_inv, Js = law._layer_metrics(state)
    lam, mu = lame_3d(law.E, law.nu)
    tau_l = nh_3d_stress(g_inv, G_inv, Js, law)
    denom = lam * Js**2 + 2.0 * mu
    l3sq = (lam + 2.0 * mu) / denom
    k_vol = 2.0 * mu * lam * (lam + 2.0 * mu) * Js**2 / denom**2
    c_l = (k_vol[..., None, None, None, None] * np.einsum("...ab,...gd->...abgd", g_inv, g_inv)
           + mu * l3sq[..., None, None, None, None] * _sym_pair(g_inv))

    tau = np.einsum("...kab,k->...ab", tau_l, w)
    M0 = -np.einsum("...kab,k->...ab", tau_l, w * z)
    c = np.einsum("...kabgd,k->...abgd", c_l, w)
    d = -np.einsum("...kabgd,k->...abgd", c_l, w * z)
    f = np.einsum("...kabgd,k->...abgd", c_l, w * z * z)
    return StressState(tau, M0, c, d, d.copy(), f)
