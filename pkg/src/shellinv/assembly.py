"""Force vectors, tangent matrices and global assembly for a single NURBS patch.

Element dof ``3 A + i`` is Cartesian component ``i`` of local control
point ``A``; global dof ``3 node + i``.  Lagrange multipliers of the
rotational constraints are appended after the displacement dofs.

Sign convention: ``r = f_int - f_ext`` and ``K_T = dr/du``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .constitutive import Koiter, StressState, _sym_pair
from .kinematics import (
    SurfaceGeometry,
    SurfacePointState,
    covariant_second_derivatives,
    surface_geometry,
)
from .nurbs import NurbsPatch, QuadratureRule, gauss_rule

CHUNK = 1024


# -- quadrature data -------------------------------------------------------


@dataclass
class QuadData:
    """Basis values at quadrature points for a block of elements."""

    N: np.ndarray  # (E, Q, nen)
    dN: np.ndarray  # (E, Q, 2, nen)
    ddN: np.ndarray  # (E, Q, 2, 2, nen)
    w: np.ndarray  # (E, Q) parent weight times parametric scaling
    nodes: np.ndarray  # (E, nen)

    def __getitem__(self, sl):
        return QuadData(self.N[sl], self.dN[sl], self.ddN[sl], self.w[sl], self.nodes[sl])

    @property
    def n_elements(self):
        return self.N.shape[0]


def element_dofs(nodes):
    return (3 * nodes[..., :, None] + np.arange(3)).reshape(nodes.shape[:-1] + (-1,))


class ShellModel:
    """A patch, its material, and precomputed quadrature and reference geometry."""

    def __init__(self, patch: NurbsPatch, material, quadrature: QuadratureRule | None = None):
        self.patch = patch
        self.material = material
        p, q = patch.degrees
        self.quadrature = quadrature or QuadratureRule.tensor_gauss(p + 1, q + 1)
        qr = self.quadrature
        N, dN, ddN = [], [], []
        for e in range(patch.n_elements):
            be = patch.eval_basis(e, qr.points)
            N.append(be.N)
            dN.append(be.dN)
            ddN.append(be.ddN)
        sizes = patch.element_sizes()
        w = qr.weights[None, :] * (0.25 * sizes[:, 0] * sizes[:, 1])[:, None]
        self.quad = QuadData(np.array(N), np.array(dN), np.array(ddN), w, patch.connectivity)
        self.X = patch.control_points.copy()
        self.ref = surface_geometry(self.quad.N, self.quad.dN, self.quad.ddN, self.X[patch.connectivity])
        self.dA = self.quad.w * self.ref.jacobian
        self.n_nodes = patch.n_control_points
        self.n_disp = 3 * self.n_nodes
        self.edofs = element_dofs(patch.connectivity)
        self._pattern = None
        self._koiter_moduli = None
        if isinstance(material, Koiter):
            Lam, mu = material.surface_lame
            Ai = self.ref.metric_inv
            self._koiter_moduli = Lam * np.einsum("...ab,...gd->...abgd", Ai, Ai) + mu * _sym_pair(Ai)

    # slicing helpers ------------------------------------------------------
    def ref_slice(self, sl):
        r = self.ref
        return SurfaceGeometry(*(getattr(r, f)[sl] for f in r.__dataclass_fields__))

    def chunks(self):
        ne = self.patch.n_elements
        for s in range(0, ne, CHUNK):
            yield slice(s, min(s + CHUNK, ne))

    def state(self, sl, x):
        q = self.quad[sl]
        cur = surface_geometry(q.N, q.dN, q.ddN, x[q.nodes])
        return q, SurfacePointState(self.ref_slice(sl), cur)

    def stress(self, sl, state) -> StressState:
        if self._koiter_moduli is not None:
            from .kinematics import strain_measures

            law = self.material
            s = strain_measures(state)
            Ai = state.ref.metric_inv
            Lam, mu = law.surface_lame
            T2 = law.thickness**2 / 12.0
            c = self._koiter_moduli[sl]

            def resultant(X):
                tr = np.einsum("...ab,...ab->...", Ai, X)
                return Lam * tr[..., None, None] * Ai + 2.0 * mu * (Ai @ X @ Ai)

            zero = np.zeros_like(c)
            return StressState(resultant(s.E), T2 * resultant(s.K), c, zero, zero, T2 * c)
        return self.material.response(state)

    def element_pattern(self):
        """Precomputed CSR pattern for scattering element matrices."""
        if self._pattern is None:
            n = self.n_disp
            ed = self.edofs
            rows = np.repeat(ed[:, :, None], ed.shape[1], axis=2).ravel()
            cols = np.repeat(ed[:, None, :], ed.shape[1], axis=1).ravel()
            keys = rows.astype(np.int64) * n + cols
            uniq, inv = np.unique(keys, return_inverse=True)
            r, c = np.divmod(uniq, n)
            indptr = np.searchsorted(r, np.arange(n + 1))
            self._pattern = (inv, c.astype(np.int32), indptr, uniq.size)
        return self._pattern

    def strain_energy(self, x):
        total = 0.0
        for sl in self.chunks():
            _, st = self.state(sl, x)
            total += float(np.sum(self.material.energy(st) * self.dA[sl]))
        return total

    # edge quadrature ------------------------------------------------------
    def edge_quadrature(self, edge, n_points=None):
        return EdgeQuadrature.build(self.patch, edge, n_points)


# -- element internal forces and tangents ----------------------------------


def variation_operators(q: QuadData, cur: SurfaceGeometry):
    """Linear operators for ``delta a_ab`` and ``delta b_ab`` on element dofs."""
    E, Q, _, nen = q.dN.shape
    dN, a = q.dN, cur.tangents
    Da = (dN[:, :, :, None, :, None] * a[:, :, None, :, None, :]
          + dN[:, :, None, :, :, None] * a[:, :, :, None, None, :]).reshape(E, Q, 2, 2, 3 * nen)
    Nt = covariant_second_derivatives(q.ddN, dN, cur.christoffel)
    Db = (Nt[..., None] * cur.normal[:, :, None, None, None, :]).reshape(E, Q, 2, 2, 3 * nen)
    return Da, Db, Nt


def element_internal_forces(q: QuadData, state: SurfacePointState, stress: StressState, dA):
    """Membrane and bending parts of the element internal force vectors."""
    Da, Db, _ = variation_operators(q, state.cur)
    f_tau = np.einsum("eqab,eqabk->ek", 0.5 * stress.tau * dA[..., None, None], Da)
    f_M = np.einsum("eqab,eqabk->ek", stress.M0 * dA[..., None, None], Db)
    return f_tau, f_M


def element_tangent(q: QuadData, state: SurfacePointState, stress: StressState, dA, parts=False):
    """Material plus geometric element tangent ``d f_int / d x``."""
    cur = state.cur
    Da, Db, Nt = variation_operators(q, cur)
    E, Q = dA.shape
    nd = Da.shape[-1]
    Z = np.concatenate([Da.reshape(E, Q, 4, nd), Db.reshape(E, Q, 4, nd)], axis=2)
    blk = np.empty((E, Q, 8, 8))
    blk[:, :, :4, :4] = 0.25 * stress.c.reshape(E, Q, 4, 4)
    blk[:, :, :4, 4:] = 0.5 * stress.d.reshape(E, Q, 4, 4)
    blk[:, :, 4:, :4] = 0.5 * stress.e.reshape(E, Q, 4, 4)
    blk[:, :, 4:, 4:] = stress.f.reshape(E, Q, 4, 4)
    MZ = blk @ Z
    Zw = (Z * dA[:, :, None, None]).reshape(E, Q * 8, nd)
    k_mat = np.swapaxes(Zw, 1, 2) @ MZ.reshape(E, Q * 8, nd)

    # membrane geometric part: tau^ab N_a N_b (x) identity
    nen = q.dN.shape[-1]
    scal = np.einsum("eqab,eqaA,eqbB->eAB", stress.tau * dA[..., None, None], q.dN, q.dN)
    k_tau = np.einsum("eAB,ij->eAiBj", scal, np.eye(3)).reshape(E, nd, nd)

    # bending geometric part: M0^ab Delta delta b_ab
    n = cur.normal
    P = (q.dN[..., None] * n[:, :, None, None, :]).reshape(E, Q, 2, nd)
    MN = np.einsum("eqab,eqabB->eqB", stress.M0, Nt)
    Qv = (MN[:, :, None, :, None] * cur.contravariant[:, :, :, None, :]).reshape(E, Q, 2, nd)
    Pw = (P * dA[:, :, None, None]).reshape(E, Q * 2, nd)
    k_m2 = -np.swapaxes(Pw, 1, 2) @ Qv.reshape(E, Q * 2, nd)
    bM = np.einsum("eqab,eqab->eq", cur.curvature, stress.M0)
    aP = np.einsum("eqgd,eqdk->eqgk", cur.metric_inv * bM[..., None, None], P)
    k_m1 = -np.swapaxes(Pw, 1, 2) @ aP.reshape(E, Q * 2, nd)
    k_M = k_m1 + k_m2 + np.swapaxes(k_m2, 1, 2)
    if parts:
        return {"material": k_mat, "membrane_geometric": k_tau, "bending_geometric": k_M}
    return k_mat + k_tau + k_M


# -- loads -------------------------------------------------------------------


@dataclass
class Support:
    """Homogeneous Dirichlet condition on some components of some nodes."""

    nodes: tuple
    components: tuple = (0, 1, 2)
    name: str = "support"


@dataclass
class PrescribedDisplacement:
    """All listed nodes move by ``value`` along Cartesian ``component``."""

    nodes: tuple
    component: int
    value: float
    name: str = "prescribed"
    stage: int = 0


@dataclass
class EdgeTraction:
    edge: str
    direction: tuple
    value: float
    per_reference_length: bool = True
    name: str = "traction"
    stage: int = 0


@dataclass
class PointLoad:
    """Dead force ``scale * value * direction`` at a control point or parametric point."""

    direction: tuple
    value: float
    node: int | None = None
    point: tuple | None = None
    scale: float = 1.0
    name: str = "point_load"
    stage: int = 0


@dataclass
class EdgeMoment:
    """Distributed boundary moment ``m_tau`` on one or more edges (follower)."""

    edges: tuple
    value: float
    per_reference_length: bool = False
    name: str = "moment"
    stage: int = 0


@dataclass
class Pressure:
    """Follower pressure along the current normal, per current area."""

    value: float
    name: str = "pressure"
    stage: int = 0


@dataclass
class BodyForce:
    """Dead surface force per reference area."""

    direction: tuple
    value: float
    name: str = "body_force"
    stage: int = 0


NEUMANN_TYPES = (EdgeTraction, PointLoad, EdgeMoment, Pressure, BodyForce)


@dataclass
class LoadSet:
    records: list = field(default_factory=list)

    def __post_init__(self):
        names = [r.name for r in self.records]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise ValueError(f"duplicate load record names: {sorted(dup)}")
        for r in self.records:
            if hasattr(r, "value") and not np.isfinite(r.value):
                raise ValueError(f"load record {r.name!r} has a non-finite value")

    def __getitem__(self, name):
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    def with_values(self, **values):
        """Copy with the ``value`` of named records replaced."""
        recs = []
        for r in self.records:
            recs.append(replace(r, value=float(values[r.name])) if r.name in values else r)
        missing = set(values) - {r.name for r in self.records}
        if missing:
            raise KeyError(f"unknown load records: {sorted(missing)}")
        return LoadSet(recs)

    @property
    def neumann(self):
        return [r for r in self.records if isinstance(r, NEUMANN_TYPES)]

    @property
    def dirichlet(self):
        return [r for r in self.records if isinstance(r, (Support, PrescribedDisplacement))]

    @property
    def stages(self):
        return sorted({getattr(r, "stage", 0) for r in self.records if hasattr(r, "stage")})


@dataclass
class EdgeQuadrature:
    edge: str
    elements: np.ndarray
    quad: QuadData  # w = parametric line weight
    along: int  # parametric direction along the edge
    across: int
    sign: float  # outward orientation

    @classmethod
    def build(cls, patch: NurbsPatch, edge, n_points=None):
        p, q = patch.degrees
        along = 0 if edge.startswith("eta") else 1
        ng = n_points or (p if along == 0 else q) + 1
        g, wg = gauss_rule(ng)
        fixed = -1.0 if edge.endswith("0") else 1.0
        pts = np.column_stack([g, np.full(ng, fixed)]) if along == 0 else np.column_stack(
            [np.full(ng, fixed), g])
        els = np.array(patch.edge_elements(edge))
        N, dN, ddN, W = [], [], [], []
        for e in els:
            be = patch.eval_basis(e, pts)
            N.append(be.N)
            dN.append(be.dN)
            ddN.append(be.ddN)
            h = np.diff(patch.element_span(e)[along])[0]
            W.append(0.5 * h * wg)
        qd = QuadData(np.array(N), np.array(dN), np.array(ddN), np.array(W), patch.connectivity[els])
        return cls(edge, els, qd, along, 1 - along, fixed)


def _outer(u, v):
    return u[..., :, None] * v[..., None, :]


def _scatter_vec(n, dofs, vals):
    out = np.zeros(n)
    np.add.at(out, dofs.ravel(), vals.ravel())
    return out


def _coo(dofs, mats):
    nd = dofs.shape[-1]
    rows = np.repeat(dofs[..., :, None], nd, axis=-1).ravel()
    cols = np.repeat(dofs[..., None, :], nd, axis=-2).ravel()
    return rows, cols, mats.ravel()


def pressure_unit(model: ShellModel, x, tangent=True):
    """Force per unit pressure and its tangent ``d f / d x`` (follower, current area)."""
    f = np.zeros(model.n_disp)
    trip = []
    for sl in model.chunks():
        q, st = model.state(sl, x)
        cur = st.cur
        wj = q.w * cur.jacobian
        fe = np.einsum("eqA,eqi->eAi", q.N * wj[..., None], cur.normal)
        ed = model.edofs[sl]
        f += _scatter_vec(model.n_disp, ed, fe.reshape(ed.shape))
        if tangent:
            op = _outer(cur.normal[:, :, None, :], cur.contravariant) - _outer(
                cur.contravariant, cur.normal[:, :, None, :])
            ke = np.einsum("eqA,eqgB,eqgij->eAiBj", q.N * wj[..., None], q.dN, op)
            nd = ed.shape[1]
            trip.append(_coo(ed, ke.reshape(-1, nd, nd)))
    return f, trip


def body_force_unit(model: ShellModel, direction):
    d = np.asarray(direction, dtype=float)
    fe = np.einsum("eqA,i->eAi", model.quad.N * model.dA[..., None], d)
    return _scatter_vec(model.n_disp, model.edofs, fe.reshape(model.edofs.shape))


def edge_geometry(model: ShellModel, eq: EdgeQuadrature, x):
    q = eq.quad
    ref = surface_geometry(q.N, q.dN, q.ddN, model.X[q.nodes])
    cur = surface_geometry(q.N, q.dN, q.ddN, x[q.nodes])
    return ref, cur


def traction_unit(model: ShellModel, eq: EdgeQuadrature, direction, x, per_reference=True,
                  tangent=True):
    d = np.asarray(direction, dtype=float)
    q = eq.quad
    ref, cur = edge_geometry(model, eq, x)
    geo = ref if per_reference else cur
    ts = geo.tangents[:, :, eq.along]
    ell = np.linalg.norm(ts, axis=-1)
    fe = np.einsum("eqA,i->eAi", q.N * (q.w * ell)[..., None], d)
    ed = element_dofs(q.nodes)
    f = _scatter_vec(model.n_disp, ed, fe.reshape(ed.shape))
    trip = []
    if tangent and not per_reference:
        that = ts / ell[..., None]
        ke = np.einsum("eqA,eqB,i,eqj->eAiBj", q.N * q.w[..., None], q.dN[:, :, eq.along], d, that)
        nd = ed.shape[1]
        trip.append(_coo(ed, ke.reshape(-1, nd, nd)))
    return f, trip


def _inv_metric_variation(cur):
    """``D[a, b, g]``: vector with ``delta a^{ab} = D[a,b,g] . delta a_g``."""
    ai, ac = cur.metric_inv, cur.contravariant
    # delta a^{ab} = -(a^a . delta a_g) a^{gb} - (a^b . delta a_g) a^{ag}
    return -(np.einsum("...gb,...ai->...abgi", ai, ac) + np.einsum("...ag,...bi->...abgi", ai, ac))


def moment_unit(model: ShellModel, eq: EdgeQuadrature, x, per_reference=False, tangent=True):
    """Force per unit boundary moment ``int N_{,a} nu^a n ds`` and its tangent."""
    q = eq.quad
    ref, cur = edge_geometry(model, eq, x)
    b, s, sig = eq.across, eq.along, eq.sign
    ai = cur.metric_inv
    n = cur.normal
    Dai = _inv_metric_variation(cur)  # (E,Q,a,b,g,3)
    if per_reference:
        lref = np.linalg.norm(ref.tangents[:, :, s], axis=-1)
        root = np.sqrt(ai[..., b, b])
        u = ai[..., :, b] / root[..., None]  # (E,Q,a)
        coef = sig * lref
        Du = (Dai[..., :, b, :, :] / root[..., None, None, None]
              - 0.5 * ai[..., :, b, None, None] * root[..., None, None, None] ** -3
              * Dai[..., b, b, :, :][..., None, :, :])
    else:
        J = cur.jacobian
        u = ai[..., :, b] * J[..., None]
        coef = sig * np.ones_like(J)
        Du = (Dai[..., :, b, :, :] + ai[..., :, b, None, None] * cur.contravariant[..., None, :, :]) \
            * J[..., None, None, None]
    phi = (coef[..., None] * u)[..., None] * n[..., None, :]  # (E,Q,a,3)
    wq = q.w
    fe = np.einsum("eqaA,eqai->eAi", q.dN * wq[..., None, None], phi)
    ed = element_dofs(q.nodes)
    f = _scatter_vec(model.n_disp, ed, fe.reshape(ed.shape))
    trip = []
    if tangent:
        # d phi^a / d a_g = coef [ n (x) Du[a, g] - u^a a^g (x) n ]
        dphi = coef[..., None, None, None, None] * (
            _outer(n[:, :, None, None, :], Du)
            - u[..., :, None, None, None] * _outer(cur.contravariant, n[:, :, None, :])[:, :, None]
        )
        ke = np.einsum("eqaA,eqagij,eqgB->eAiBj", q.dN * wq[..., None, None], dphi, q.dN)
        nd = ed.shape[1]
        trip.append(_coo(ed, ke.reshape(-1, nd, nd)))
    return f, trip


def point_load_unit(model: ShellModel, rec: PointLoad):
    d = np.asarray(rec.direction, dtype=float) * rec.scale
    f = np.zeros(model.n_disp)
    if rec.node is not None:
        f[3 * rec.node: 3 * rec.node + 3] += d
        return f
    e, parent = model.patch.locate(*rec.point)
    be = model.patch.eval_basis(e, parent)
    for A, NA in zip(be.nodes, be.N):
        f[3 * A: 3 * A + 3] += NA * d
    return f


# -- rotational (symmetry) constraint ----------------------------------------


def _normal_hessian_dot(ac, ai, n, v):
    """Hessian of ``v . n`` w.r.t. the tangent pair, shape (k, 2, 2, 3, 3)."""
    va = np.einsum("...gi,...i->...g", ac, v)
    vn = np.einsum("...i,...i->...", v, n)
    H = (np.einsum("ke,ki,kgj->kgeij", va, n, ac)
         - np.einsum("kge,k,ki,kj->kgeij", ai, vn, n, n)
         + np.einsum("kg,kei,kj->kgeij", va, ac, n))
    return H


class SymmetryConstraint:
    """Mirror-symmetry rotational constraint along a patch edge.

    The mirrored normal is ``n_bar = R n`` with ``R`` the reflection in the
    symmetry plane of unit normal ``plane_normal``.  The potential
    ``sum_k p_k w_k (g_c + g_s)`` with ``g_c = 1 - cos(theta - theta_0)``,
    ``g_s = sin(theta - theta_0)`` is collocated at the Greville points of
    the edge, one multiplier per point.
    """

    def __init__(self, model: ShellModel, edge, plane_normal, scale=None, name="symmetry"):
        self.model = model
        self.edge = edge
        self.name = name
        e = np.asarray(plane_normal, dtype=float)
        self.e = e / np.linalg.norm(e)
        patch = model.patch
        along = 0 if edge.startswith("eta") else 1
        self.along = along
        kv = patch.kv_xi if along == 0 else patch.kv_eta
        s_pts = kv.greville()
        fixed = 0.0 if edge.endswith("0") else 1.0
        lo_x, hi_x = patch.kv_xi.knots[0], patch.kv_xi.knots[-1]
        lo_y, hi_y = patch.kv_eta.knots[0], patch.kv_eta.knots[-1]
        N, dN, nodes = [], [], []
        for s in s_pts:
            if along == 0:
                xi, eta = s, lo_y + fixed * (hi_y - lo_y)
            else:
                xi, eta = lo_x + fixed * (hi_x - lo_x), s
            el, parent = patch.locate(xi, eta)
            be = patch.eval_basis(el, parent)
            N.append(be.N)
            dN.append(be.dN)
            nodes.append(be.nodes)
        self.N, self.dN, self.nodes = np.array(N), np.array(dN), np.array(nodes)
        self.dofs = element_dofs(self.nodes)
        # reference angle data and weights
        q0, r0, A = self._qr(model.X)
        c0, s0 = 1.0 - 2.0 * q0**2, -2.0 * q0 * r0
        self.c0, self.s0 = c0, s0
        ds = np.abs(np.gradient(s_pts)) * np.linalg.norm(A[:, along], axis=-1)
        if scale is None:
            mat = model.material
            scale = mat.E * mat.thickness**3 / 12.0
        self.weights = scale / ds
        self.active = np.ones(len(s_pts), dtype=bool)

    @property
    def n_points(self):
        return len(self.weights)

    def _tangents(self, x):
        return np.einsum("kan,kni->kai", self.dN, x[self.nodes])

    def _qr(self, x):
        a = self._tangents(x)
        cr = np.cross(a[:, 0], a[:, 1])
        n = cr / np.linalg.norm(cr, axis=-1)[:, None]
        ts = a[:, self.along]
        that = ts / np.linalg.norm(ts, axis=-1)[:, None]
        k = np.cross(self.e, that)
        return n @ self.e, np.einsum("ki,ki->k", n, k), a

    def angles(self, x):
        """Relative rotation ``theta - theta_0`` at the collocation points."""
        q, r, _ = self._qr(x)
        c, s = 1.0 - 2.0 * q**2, -2.0 * q * r
        crel = c * self.c0 + s * self.s0
        srel = s * self.c0 - c * self.s0
        return np.arctan2(srel, crel)

    def evaluate(self, x, hessian=True):
        """Constraint values ``g_k``, gradients (k, nd) and Hessians (k, nd, nd)."""
        a = self._tangents(x)
        K = len(a)
        cr = np.cross(a[:, 0], a[:, 1])
        J = np.linalg.norm(cr, axis=-1)
        n = cr / J[:, None]
        metric = np.einsum("kai,kbi->kab", a, a)
        ai = np.linalg.inv(metric)
        ac = np.einsum("kab,kbi->kai", ai, a)
        s_idx = self.along
        ts = a[:, s_idx]
        ell = np.linalg.norm(ts, axis=-1)
        that = ts / ell[:, None]
        e = np.broadcast_to(self.e, n.shape)
        kv = np.cross(e, that)
        q = n @ self.e
        r = np.einsum("ki,ki->k", n, kv)
        c0, s0 = self.c0, self.s0
        g = 1.0 - (1.0 - 2.0 * q**2) * (c0 + s0) + (-2.0 * q * r) * (c0 - s0)
        Gq = 4.0 * q * (c0 + s0) - 2.0 * r * (c0 - s0)
        Gr = -2.0 * q * (c0 - s0)
        Gqq = 4.0 * (c0 + s0)
        Gqr = -2.0 * (c0 - s0)
        # first derivatives w.r.t. (a_1, a_2): shape (K, 2, 3)
        dq = -np.einsum("kgi,ki->kg", ac, e)[..., None] * n[:, None, :]
        P = np.eye(3) - _outer(that, that)
        nxe = np.cross(n, e)
        dr = -np.einsum("kgi,ki->kg", ac, kv)[..., None] * n[:, None, :]
        dr[:, s_idx] += np.einsum("kij,kj->ki", P, nxe) / ell[:, None]
        grad6 = (Gq[:, None, None] * dq + Gr[:, None, None] * dr).reshape(K, 6)
        T = np.einsum("kgA,ij->kgiAj", self.dN, np.eye(3)).reshape(K, 6, -1)
        grad = np.einsum("kc,kcd->kd", grad6, T)
        if not hessian:
            return g, grad, None
        Hq = _normal_hessian_dot(ac, ai, n, e)
        Hr = _normal_hessian_dot(ac, ai, n, kv)
        axe = np.cross(ac, e[:, None, :])  # a^g x e
        Paxe = np.einsum("kij,kgj->kgi", P, axe) / ell[:, None, None]
        for gam in range(2):
            Hr[:, gam, s_idx] -= _outer(n, Paxe[:, gam])
            Hr[:, s_idx, gam] -= _outer(Paxe[:, gam], n)
        Pv = np.einsum("kij,kj->ki", P, nxe)
        vt = np.einsum("ki,ki->k", nxe, that)
        Hr[:, s_idx, s_idx] -= (_outer(that, Pv) + vt[:, None, None] * P + _outer(Pv, that)) / ell[:, None, None] ** 2
        dq6, dr6 = dq.reshape(K, 6), dr.reshape(K, 6)
        H6 = (Gq[:, None, None] * Hq.transpose(0, 1, 3, 2, 4).reshape(K, 6, 6)
              + Gr[:, None, None] * Hr.transpose(0, 1, 3, 2, 4).reshape(K, 6, 6)
              + Gqq[:, None, None] * _outer(dq6, dq6)
              + Gqr[:, None, None] * (_outer(dq6, dr6) + _outer(dr6, dq6)))
        hess = np.swapaxes(T, 1, 2) @ H6 @ T
        return g, grad, hess


# -- dof map and global system -------------------------------------------------


@dataclass
class DofMap:
    n_disp: int
    n_mult: int
    fixed: np.ndarray
    free: np.ndarray

    @property
    def n_total(self):
        return self.n_disp + self.n_mult

    @property
    def free_disp(self):
        return self.free[self.free < self.n_disp]


@dataclass
class GlobalSystem:
    residual: np.ndarray  # full length, r = f_int + f_con - f_ext
    tangent: sp.csr_matrix | None
    f_int: np.ndarray
    f_ext: np.ndarray
    dofmap: DofMap

    @property
    def reactions(self):
        return self.residual[self.dofmap.fixed]

    def free_residual(self):
        return self.residual[self.dofmap.free]

    def free_tangent(self):
        fr = self.dofmap.free
        return self.tangent[fr][:, fr].tocsc()


class ShellProblem:
    """Model + boundary conditions + loads + rotational constraints."""

    def __init__(self, model: ShellModel, loads: LoadSet, constraints=(), name="problem"):
        self.model = model
        self.loads = loads
        self.name = name
        self.constraints = list(constraints)
        self._edge_cache = {}
        fixed = {}
        for rec in loads.dirichlet:
            comps = rec.components if isinstance(rec, Support) else (rec.component,)
            for A in rec.nodes:
                if not 0 <= A < model.n_nodes:
                    raise ValueError(f"record {rec.name!r} targets missing node {A}")
                for i in comps:
                    d = 3 * int(A) + int(i)
                    if d in fixed and isinstance(rec, PrescribedDisplacement):
                        raise ValueError(f"dof {d} prescribed twice ({fixed[d]!r}, {rec.name!r})")
                    if d not in fixed or isinstance(rec, PrescribedDisplacement):
                        fixed[d] = rec.name
        for rec in loads.records:
            if isinstance(rec, EdgeTraction) and rec.edge not in ("xi0", "xi1", "eta0", "eta1"):
                raise ValueError(f"record {rec.name!r} targets unknown edge {rec.edge!r}")
            if isinstance(rec, PointLoad) and rec.node is not None and not 0 <= rec.node < model.n_nodes:
                raise ValueError(f"record {rec.name!r} targets missing node {rec.node}")
        self._fixed_owner = fixed
        fixed_idx = np.array(sorted(fixed), dtype=int)
        free_disp = np.setdiff1d(np.arange(model.n_disp), fixed_idx)
        for con in self.constraints:
            self._prune(con, free_disp)
        n_mult = sum(int(c.active.sum()) for c in self.constraints)
        free = np.concatenate([free_disp, model.n_disp + np.arange(n_mult)])
        self.dofmap = DofMap(model.n_disp, n_mult, fixed_idx, free)

    def _prune(self, con: SymmetryConstraint, free_disp):
        """Deactivate collocation points whose constraints are void or dependent."""
        _, grad, _ = con.evaluate(self.model.X, hessian=False)
        m = np.zeros((con.n_points, self.model.n_disp))
        for k in range(con.n_points):
            np.add.at(m[k], con.dofs[k], grad[k])
        # other constraints already active couple through shared dofs
        prev = [self._constraint_rows(c) for c in self.constraints if c is not con and hasattr(c, "_rows")]
        C = m[:, free_disp]
        norms = np.linalg.norm(C, axis=1)
        act = norms > 1e-8 * norms.max()
        base = np.vstack(prev)[:, free_disp] if prev else np.zeros((0, len(free_disp)))
        keep = []
        rows = [base] if base.size else []
        for k in np.flatnonzero(act):
            trial = np.vstack(rows + [C[k:k + 1]]) if rows else C[k:k + 1]
            if np.linalg.matrix_rank(trial, tol=1e-10 * norms.max()) == trial.shape[0]:
                rows = [trial]
                keep.append(k)
        con.active = np.zeros(con.n_points, dtype=bool)
        con.active[keep] = True
        con._rows = m[con.active]

    def _constraint_rows(self, con):
        return con._rows

    # -- helpers -----------------------------------------------------------
    def edge_quadrature(self, edge):
        if edge not in self._edge_cache:
            self._edge_cache[edge] = self.model.edge_quadrature(edge)
        return self._edge_cache[edge]

    def prescribed_vector(self, loads=None, factors=None):
        """Full-length vector holding the Dirichlet values (zeros elsewhere)."""
        loads = loads or self.loads
        u = np.zeros(self.dofmap.n_total)
        for rec in loads.dirichlet:
            if isinstance(rec, PrescribedDisplacement):
                fac = _factor(factors, rec.stage)
                for A in rec.nodes:
                    u[3 * int(A) + rec.component] = rec.value * fac
        return u

    def positions(self, U):
        return self.model.X + U[: self.model.n_disp].reshape(-1, 3)

    def unit_load(self, rec, U, tangent=True):
        """External force per unit ``rec.value`` (and its tangent triplets)."""
        x = self.positions(U)
        m = self.model
        if isinstance(rec, Pressure):
            return pressure_unit(m, x, tangent)
        if isinstance(rec, BodyForce):
            return body_force_unit(m, rec.direction), []
        if isinstance(rec, PointLoad):
            return point_load_unit(m, rec), []
        if isinstance(rec, EdgeTraction):
            return traction_unit(m, self.edge_quadrature(rec.edge), rec.direction, x,
                                 rec.per_reference_length, tangent)
        if isinstance(rec, EdgeMoment):
            f = np.zeros(m.n_disp)
            trip = []
            for edge in rec.edges:
                fe, te = moment_unit(m, self.edge_quadrature(edge), x, rec.per_reference_length, tangent)
                f += fe
                trip += te
            return f, trip
        raise TypeError(f"{type(rec).__name__} is not a Neumann load")

    def internal(self, U, tangent=True):
        """Internal force vector and element tangent data (values in pattern order)."""
        m = self.model
        x = self.positions(U)
        f = np.zeros(m.n_disp)
        vals = []
        for sl in m.chunks():
            q, st = m.state(sl, x)
            stress = m.stress(sl, st)
            ft, fm = element_internal_forces(q, st, stress, m.dA[sl])
            f += _scatter_vec(m.n_disp, m.edofs[sl], ft + fm)
            if tangent:
                vals.append(element_tangent(q, st, stress, m.dA[sl]).ravel())
        return f, (np.concatenate(vals) if tangent else None)

    def external(self, U, loads=None, factors=None, tangent=True):
        loads = loads or self.loads
        f = np.zeros(self.model.n_disp)
        trip = []
        for rec in loads.neumann:
            s = rec.value * _factor(factors, rec.stage)
            if s == 0.0:
                continue
            fu, tu = self.unit_load(rec, U, tangent)
            f += s * fu
            trip += [(r, c, s * v) for (r, c, v) in tu]
        return f, trip

    def constraint_terms(self, U, tangent=True):
        n = self.dofmap.n_total
        r = np.zeros(n)
        trip = []
        x = self.positions(U)
        off = self.model.n_disp
        for con in self.constraints:
            act = np.flatnonzero(con.active)
            g, grad, hess = con.evaluate(x, hessian=tangent)
            p = U[off: off + len(act)]
            w = con.weights[act]
            for j, k in enumerate(act):
                d = con.dofs[k]
                np.add.at(r, d, p[j] * w[j] * grad[k])
                r[off + j] = w[j] * g[k]
                if tangent:
                    nd = len(d)
                    trip.append((np.repeat(d, nd), np.tile(d, nd), (p[j] * w[j] * hess[k]).ravel()))
                    trip.append((d, np.full(nd, off + j), w[j] * grad[k]))
                    trip.append((np.full(nd, off + j), d, w[j] * grad[k]))
            off += len(act)
        return r, trip

    def assemble(self, U, loads=None, factors=None, tangent=True) -> GlobalSystem:
        """Residual ``f_int + f_con - f_ext`` and tangent ``K_T`` over all dofs."""
        m = self.model
        n = self.dofmap.n_total
        fint, kvals = self.internal(U, tangent)
        fext, etrip = self.external(U, loads, factors, tangent)
        rcon, ctrip = self.constraint_terms(U, tangent)
        r = rcon.copy()
        r[: m.n_disp] += fint - fext
        K = None
        if tangent:
            inv, cols, indptr, nnz = m.element_pattern()
            data = np.bincount(inv, weights=kvals, minlength=nnz)
            Kd = sp.csr_matrix((data, cols, indptr), shape=(m.n_disp, m.n_disp))
            K = sp.block_diag([Kd, sp.csr_matrix((n - m.n_disp, n - m.n_disp))], format="csr") \
                if n > m.n_disp else Kd
            extra = [(ri, ci, -vi) for (ri, ci, vi) in etrip] + ctrip
            if extra:
                rows = np.concatenate([t[0] for t in extra])
                cols_ = np.concatenate([t[1] for t in extra])
                vals = np.concatenate([t[2] for t in extra])
                K = K + sp.csr_matrix((vals, (rows, cols_)), shape=(n, n))
        full_int = np.zeros(n)
        full_int[: m.n_disp] = fint
        full_ext = np.zeros(n)
        full_ext[: m.n_disp] = fext
        return GlobalSystem(r, K, full_int + rcon, full_ext, self.dofmap)

    def strain_energy(self, U):
        return self.model.strain_energy(self.positions(U))

    def constraint_angles(self, U):
        x = self.positions(U)
        return [c.angles(x)[c.active] for c in self.constraints]


def _factor(factors, stage):
    if factors is None:
        return 1.0
    if callable(factors):
        return float(factors(stage))
    if isinstance(factors, dict):
        return float(factors.get(stage, 1.0))
    return float(factors)
