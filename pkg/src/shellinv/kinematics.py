"""Midsurface differential geometry at quadrature points.

Arrays carry arbitrary leading axes (typically ``(element, point)``); the
trailing axes are the surface indices and Cartesian components.  Surface
index order in ``christoffel`` is ``[gamma, alpha, beta]`` for
``Gamma^gamma_{alpha beta}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SingularElementError(RuntimeError):
    pass


def inv2(m):
    """Inverse and determinant of stacked symmetric 2x2 matrices."""
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    inv = np.empty_like(m)
    inv[..., 0, 0] = m[..., 1, 1]
    inv[..., 1, 1] = m[..., 0, 0]
    inv[..., 0, 1] = -m[..., 0, 1]
    inv[..., 1, 0] = -m[..., 1, 0]
    return inv / det[..., None, None], det


@dataclass
class SurfaceGeometry:
    """One configuration (reference or current) of the midsurface."""

    position: np.ndarray
    tangents: np.ndarray  # (..., 2, 3) a_alpha
    tangent_derivs: np.ndarray  # (..., 2, 2, 3) a_{alpha,beta}
    metric: np.ndarray  # (..., 2, 2) a_{alpha beta}
    metric_inv: np.ndarray  # (..., 2, 2) a^{alpha beta}
    jacobian: np.ndarray  # (...) sqrt(det a_{alpha beta})
    normal: np.ndarray  # (..., 3)
    curvature: np.ndarray  # (..., 2, 2) b_{alpha beta}
    contravariant: np.ndarray  # (..., 2, 3) a^alpha
    christoffel: np.ndarray  # (..., 2, 2, 2) Gamma^gamma_{alpha beta}

    @property
    def mean_curvature(self):
        return 0.5 * np.einsum("...ab,...ab->...", self.metric_inv, self.curvature)

    @property
    def gaussian_curvature(self):
        b = self.curvature
        return (b[..., 0, 0] * b[..., 1, 1] - b[..., 0, 1] * b[..., 1, 0]) / self.jacobian**2

    def principal_curvatures(self):
        H, k = self.mean_curvature, self.gaussian_curvature
        root = np.sqrt(np.maximum(H * H - k, 0.0))
        return H + root, H - root


def surface_geometry(N, dN, ddN, coords, check=True):
    """Geometry of ``x = N x_e`` from basis arrays and element control coordinates.

    ``N`` has shape ``(..., nen)`` and ``coords`` ``(..., nen, 3)`` with the
    leading axes of ``coords`` broadcastable against those of ``N`` after
    inserting the point axis, e.g. ``N`` ``(E, Q, nen)`` and ``coords``
    ``(E, nen, 3)``.
    """
    if coords.ndim == N.ndim + 1:
        X = coords
    else:
        X = coords[..., None, :, :]
    pos = np.einsum("...n,...ni->...i", N, X)
    tang = np.einsum("...an,...ni->...ai", dN, X)
    dtang = np.einsum("...abn,...ni->...abi", ddN, X)
    metric = np.einsum("...ai,...bi->...ab", tang, tang)
    with np.errstate(divide="ignore", invalid="ignore"):
        minv, det = inv2(metric)
    jac = np.sqrt(np.abs(det))
    if check:
        # per element: J must exceed 1e-12 of the element's largest J
        flat = jac.reshape(jac.shape[0], -1) if jac.ndim > 1 else jac.reshape(1, -1)
        if (
            np.any(~(det > 0))
            or not np.all(np.isfinite(flat))
            or np.any(flat <= 1e-12 * flat.max(axis=1, keepdims=True))
        ):
            raise SingularElementError("degenerate surface Jacobian")
    cr = np.cross(tang[..., 0, :], tang[..., 1, :])
    normal = cr / jac[..., None]
    curv = np.einsum("...abi,...i->...ab", dtang, normal)
    contra = np.einsum("...ab,...bi->...ai", minv, tang)
    chris = np.einsum("...gi,...abi->...gab", contra, dtang)
    return SurfaceGeometry(pos, tang, dtang, metric, minv, jac, normal, curv, contra, chris)


@dataclass
class SurfacePointState:
    ref: SurfaceGeometry
    cur: SurfaceGeometry

    @property
    def stretch(self):
        return self.cur.jacobian / self.ref.jacobian


def reference_state(N, dN, ddN, X_e):
    return surface_geometry(N, dN, ddN, X_e)


def current_state(N, dN, ddN, x_e):
    return surface_geometry(N, dN, ddN, x_e)


@dataclass
class StrainState:
    E: np.ndarray  # Green-Lagrange components E_{alpha beta}
    K: np.ndarray  # relative curvature K_{alpha beta}
    H: np.ndarray
    kappa: np.ndarray
    k1: np.ndarray
    k2: np.ndarray


def strain_measures(state: SurfacePointState) -> StrainState:
    E = 0.5 * (state.cur.metric - state.ref.metric)
    K = state.cur.curvature - state.ref.curvature
    k1, k2 = state.cur.principal_curvatures()
    return StrainState(E, K, state.cur.mean_curvature, state.cur.gaussian_curvature, k1, k2)


def deformation_tensors(state: SurfacePointState):
    """Surface deformation gradient and Cauchy-Green tensors in Cartesian form.

    Returned for diagnostics; no other routine consumes them.
    """
    F = np.einsum("...ai,...aj->...ij", state.cur.tangents, state.ref.contravariant)
    C = np.einsum("...ab,...ai,...bj->...ij", state.cur.metric, state.ref.contravariant,
                  state.ref.contravariant)
    B = np.einsum("...ab,...ai,...bj->...ij", state.ref.metric_inv, state.cur.tangents,
                  state.cur.tangents)
    return F, C, B


def covariant_second_derivatives(ddN, dN, christoffel):
    """``N_{;ab} = N_{,ab} - Gamma^g_{ab} N_{,g}`` for every basis function."""
    return ddN - np.einsum("...gab,...gn->...abn", christoffel, dN)
