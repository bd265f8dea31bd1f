"""NURBS patches evaluated element-by-element through Bezier extraction.

Parametric coordinates live in the knot domain; every element is mapped
from the Bezier parent square [-1, 1]^2.  Control points of a patch are
numbered with the xi index running fastest: ``A = j * n_xi + i``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

PATCH_FORMAT = "shellinv-nurbs-patch/1"

EDGES = ("xi0", "xi1", "eta0", "eta1")


class KnotVectorError(ValueError):
    pass


def bernstein_basis(xi, p):
    """Bernstein polynomials of degree ``p`` on [-1, 1] and two derivatives.

    ``xi`` may be a scalar or an array; the basis index is the last axis of
    each returned array (length ``p + 1``).
    """
    if p < 1:
        raise ValueError("degree must be >= 1")
    xi = np.asarray(xi, dtype=float)

    def raw(deg):
        if deg < 0:
            return np.zeros(xi.shape + (0,))
        t0 = 0.5 * (1.0 - xi)
        t1 = 0.5 * (1.0 + xi)
        i = np.arange(deg + 1)
        binom = np.array([math.comb(deg, k) for k in i], dtype=float)
        return binom * t0[..., None] ** (deg - i) * t1[..., None] ** i

    def pad(b, lo, hi):
        width = [(0, 0)] * (b.ndim - 1) + [(lo, hi)]
        return np.pad(b, width)

    values = raw(p)
    b1 = raw(p - 1)
    d1 = 0.5 * p * (pad(b1, 1, 0) - pad(b1, 0, 1))
    if p >= 2:
        b2 = raw(p - 2)
        d2 = 0.25 * p * (p - 1) * (pad(b2, 2, 0) - 2.0 * pad(b2, 1, 1) + pad(b2, 0, 2))
    else:
        d2 = np.zeros_like(values)
    return values, d1, d2


@dataclass(frozen=True)
class KnotVector:
    degree: int
    knots: tuple

    def __post_init__(self):
        p = int(self.degree)
        u = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", tuple(float(k) for k in u))
        if p < 1:
            raise KnotVectorError(f"degree must be >= 1, got {p}")
        if u.ndim != 1 or u.size < 2 * (p + 1):
            raise KnotVectorError(f"need at least {2 * (p + 1)} knots for degree {p}")
        if np.any(np.diff(u) < 0):
            raise KnotVectorError("knots must be nondecreasing")
        if np.any(u[: p + 1] != u[0]) or np.any(u[-(p + 1):] != u[-1]):
            raise KnotVectorError("knot vector must be open (end knots repeated p+1 times)")
        if u[-1] <= u[0]:
            raise KnotVectorError("knot vector spans an empty interval")
        _, counts = np.unique(u[p + 1: -(p + 1)], return_counts=True)
        if counts.size and counts.max() > p:
            raise KnotVectorError("interior knot multiplicity exceeds the degree")

    @classmethod
    def uniform(cls, p, nel, lo=0.0, hi=1.0):
        inner = np.linspace(lo, hi, nel + 1)[1:-1]
        return cls(p, tuple([lo] * (p + 1) + list(inner) + [hi] * (p + 1)))

    @property
    def array(self):
        return np.asarray(self.knots)

    @property
    def n_basis(self):
        return len(self.knots) - self.degree - 1

    @cached_property
    def spans(self):
        """Indices ``k`` with ``U[k] < U[k+1]`` (one per element)."""
        u = self.array
        p = self.degree
        return np.array([k for k in range(p, len(u) - p - 1) if u[k + 1] > u[k]])

    @property
    def n_elements(self):
        return len(self.spans)

    @property
    def element_bounds(self):
        u = self.array
        return np.stack([u[self.spans], u[self.spans + 1]], axis=1)

    def greville(self):
        u = self.array
        p = self.degree
        return np.array([u[i + 1: i + p + 1].mean() for i in range(self.n_basis)])

    def find_element(self, x):
        lo, hi = self.element_bounds.T
        e = int(np.searchsorted(hi, x, side="left"))
        return min(e, self.n_elements - 1)


def bezier_extraction(kv: KnotVector):
    """Per-element extraction operators ``C^e`` with ``N^e = C^e B``.

    Rows index the B-spline functions supported on the element (in
    increasing global order), columns the Bernstein polynomials.
    """
    if not isinstance(kv, KnotVector):
        kv = KnotVector(*kv)
    p = kv.degree
    # 1-based indexing keeps the loop close to the published algorithm
    U = [None] + list(kv.knots)
    m = len(kv.knots)
    a, b = p + 1, p + 2
    ops = [np.eye(p + 1)]
    while b < m:
        nxt = np.eye(p + 1)
        i = b
        while b < m and U[b + 1] == U[b]:
            b += 1
        mult = b - i + 1
        cur = ops[-1]
        if mult < p:
            numer = U[b] - U[a]
            alphas = np.zeros(p + 1)
            for j in range(p, mult, -1):
                alphas[j - mult] = numer / (U[a + j] - U[a])
            r = p - mult
            for j in range(1, r + 1):
                save = r - j + 1
                s = mult + j
                for k in range(p + 1, s, -1):
                    alpha = alphas[k - s]
                    cur[:, k - 1] = alpha * cur[:, k - 1] + (1.0 - alpha) * cur[:, k - 2]
                if b < m:
                    nxt[save - 1: save + j, save - 1] = cur[p - j: p + 1, p]
        ops.append(nxt)
        if b < m:
            a = b
            b += 1
    return np.array(ops[: kv.n_elements])


def gauss_rule(n):
    pts, wts = np.polynomial.legendre.leggauss(n)
    return pts, wts


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray

    @classmethod
    def tensor_gauss(cls, n_xi, n_eta=None):
        n_eta = n_xi if n_eta is None else n_eta
        px, wx = gauss_rule(n_xi)
        py, wy = gauss_rule(n_eta)
        pts = np.array([(x, y) for y in py for x in px])
        wts = np.array([a * b for b in wy for a in wx])
        return cls(pts, wts)


@dataclass(frozen=True)
class BasisEval:
    """Rational basis of one or more points; basis index on the last axis."""

    N: np.ndarray
    dN: np.ndarray  # (..., 2, nen)
    ddN: np.ndarray  # (..., 2, 2, nen)
    nodes: np.ndarray  # (..., nen) global control point indices


@dataclass(eq=False)
class NurbsPatch:
    kv_xi: KnotVector
    kv_eta: KnotVector
    control_points: np.ndarray
    weights: np.ndarray
    name: str = "patch"
    connectivity: np.ndarray = field(init=False, repr=False)
    C_xi: np.ndarray = field(init=False, repr=False)
    C_eta: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.control_points = np.asarray(self.control_points, dtype=float).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        n = self.kv_xi.n_basis * self.kv_eta.n_basis
        if self.control_points.shape[0] != n:
            raise ValueError(f"expected {n} control points, got {self.control_points.shape[0]}")
        if self.weights.shape[0] != n:
            raise ValueError(f"expected {n} weights, got {self.weights.shape[0]}")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be strictly positive")
        self.C_xi = bezier_extraction(self.kv_xi)
        self.C_eta = bezier_extraction(self.kv_eta)
        p, q = self.degrees
        nx = self.kv_xi.n_basis
        conn = []
        for ej in range(self.kv_eta.n_elements):
            j0 = self.kv_eta.spans[ej] - q
            for ei in range(self.kv_xi.n_elements):
                i0 = self.kv_xi.spans[ei] - p
                conn.append([(j0 + j) * nx + i0 + i for j in range(q + 1) for i in range(p + 1)])
        self.connectivity = np.array(conn, dtype=int)

    @property
    def degrees(self):
        return self.kv_xi.degree, self.kv_eta.degree

    @property
    def shape(self):
        """Control net size ``(n_xi, n_eta)``."""
        return self.kv_xi.n_basis, self.kv_eta.n_basis

    @property
    def n_control_points(self):
        return self.control_points.shape[0]

    @property
    def n_elements(self):
        return self.kv_xi.n_elements * self.kv_eta.n_elements

    @property
    def nen(self):
        p, q = self.degrees
        return (p + 1) * (q + 1)

    def element_index(self, ei, ej):
        return ej * self.kv_xi.n_elements + ei

    def element_span(self, e):
        """Knot-domain bounds ``((xi_lo, xi_hi), (eta_lo, eta_hi))`` of element ``e``."""
        ei, ej = e % self.kv_xi.n_elements, e // self.kv_xi.n_elements
        return self.kv_xi.element_bounds[ei], self.kv_eta.element_bounds[ej]

    def element_sizes(self):
        """Parametric sizes ``(h_xi, h_eta)`` per element, shape ``(nel, 2)``."""
        hx = np.diff(self.kv_xi.element_bounds, axis=1)[:, 0]
        hy = np.diff(self.kv_eta.element_bounds, axis=1)[:, 0]
        return np.array([(hx[e % len(hx)], hy[e // len(hx)]) for e in range(self.n_elements)])

    def eval_basis(self, element, points):
        """Rational basis, first and second parametric derivatives.

        ``points`` are parent coordinates with shape ``(..., 2)``.
        Derivatives are taken w.r.t. the knot-domain coordinates.
        """
        if not 0 <= element < self.n_elements:
            raise IndexError(f"element {element} out of range [0, {self.n_elements})")
        points = np.asarray(points, dtype=float)
        p, q = self.degrees
        nxe = self.kv_xi.n_elements
        ei, ej = element % nxe, element // nxe
        (hx, hy) = (np.diff(b)[0] for b in self.element_span(element))
        bx, dbx, ddbx = bernstein_basis(points[..., 0], p)
        by, dby, ddby = bernstein_basis(points[..., 1], q)
        Cx, Cy = self.C_xi[ei], self.C_eta[ej]
        sx, sy = 2.0 / hx, 2.0 / hy
        nx, dnx, ddnx = bx @ Cx.T, dbx @ Cx.T * sx, ddbx @ Cx.T * sx**2
        ny, dny, ddny = by @ Cy.T, dby @ Cy.T * sy, ddby @ Cy.T * sy**2

        def outer(fy, fx):
            return (fy[..., :, None] * fx[..., None, :]).reshape(fx.shape[:-1] + (-1,))

        Nh = outer(ny, nx)
        dNh = np.stack([outer(ny, dnx), outer(dny, nx)], axis=-2)
        ddNh = np.stack(
            [
                np.stack([outer(ny, ddnx), outer(dny, dnx)], axis=-2),
                np.stack([outer(dny, dnx), outer(ddny, nx)], axis=-2),
            ],
            axis=-3,
        )
        nodes = self.connectivity[element]
        N, dN, ddN = rationalize(Nh, dNh, ddNh, self.weights[nodes])
        return BasisEval(N, dN, ddN, np.broadcast_to(nodes, N.shape))

    def locate(self, xi, eta):
        """Element index and parent coordinates of a knot-domain point."""
        ei = self.kv_xi.find_element(xi)
        ej = self.kv_eta.find_element(eta)
        (x0, x1), (y0, y1) = self.kv_xi.element_bounds[ei], self.kv_eta.element_bounds[ej]
        parent = np.array([2.0 * (xi - x0) / (x1 - x0) - 1.0, 2.0 * (eta - y0) / (y1 - y0) - 1.0])
        return self.element_index(ei, ej), parent

    def evaluate(self, xi, eta, coords=None):
        """Surface point at knot-domain coordinates ``(xi, eta)``."""
        coords = self.control_points if coords is None else coords
        e, parent = self.locate(xi, eta)
        be = self.eval_basis(e, parent)
        return be.N @ coords[be.nodes]

    def edge_nodes(self, edge, layer=0):
        """Control point indices along a boundary edge (or the ``layer``-th row inward)."""
        nx, ny = self.shape
        grid = np.arange(nx * ny).reshape(ny, nx)
        if edge == "xi0":
            return grid[:, layer].copy()
        if edge == "xi1":
            return grid[:, nx - 1 - layer].copy()
        if edge == "eta0":
            return grid[layer, :].copy()
        if edge == "eta1":
            return grid[ny - 1 - layer, :].copy()
        raise ValueError(f"unknown edge {edge!r}; expected one of {EDGES}")

    def edge_elements(self, edge):
        nxe, nye = self.kv_xi.n_elements, self.kv_eta.n_elements
        if edge == "xi0":
            return [self.element_index(0, j) for j in range(nye)]
        if edge == "xi1":
            return [self.element_index(nxe - 1, j) for j in range(nye)]
        if edge == "eta0":
            return [self.element_index(i, 0) for i in range(nxe)]
        if edge == "eta1":
            return [self.element_index(i, nye - 1) for i in range(nxe)]
        raise ValueError(f"unknown edge {edge!r}; expected one of {EDGES}")

    def corner_node(self, corner):
        """Control point at a patch corner, e.g. ``("xi0", "eta0")``."""
        a = set(self.edge_nodes(corner[0])) & set(self.edge_nodes(corner[1]))
        if len(a) != 1:
            raise ValueError(f"{corner} is not a corner")
        return a.pop()

    # -- serialization -------------------------------------------------
    def to_dict(self):
        return {
            "format": PATCH_FORMAT,
            "name": self.name,
            "degrees": list(self.degrees),
            "knots_xi": list(self.kv_xi.knots),
            "knots_eta": list(self.kv_eta.knots),
            "n_control_points": list(self.shape),
            "control_points": self.control_points.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != PATCH_FORMAT:
            raise ValueError(f"unsupported patch format {d.get('format')!r}")
        p, q = d["degrees"]
        return cls(
            KnotVector(p, tuple(d["knots_xi"])),
            KnotVector(q, tuple(d["knots_eta"])),
            np.array(d["control_points"]),
            np.array(d["weights"]),
            name=d.get("name", "patch"),
        )

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def rationalize(Nh, dNh, ddNh, w):
    """Quotient rule from B-spline to NURBS basis through second order."""
    wN = w * Nh
    W = wN.sum(-1)
    dW = (w * dNh).sum(-1)
    ddW = (w * ddNh).sum(-1)
    R = wN / W[..., None]
    dR = (w * dNh - R[..., None, :] * dW[..., None]) / W[..., None, None]
    ddR = (
        w * ddNh
        - dR[..., :, None, :] * dW[..., None, :, None]
        - dR[..., None, :, :] * dW[..., :, None, None]
        - R[..., None, None, :] * ddW[..., None]
    ) / W[..., None, None, None]
    return R, dR, ddR


# -- geometry construction ------------------------------------------------


def _elevate_bezier(P):
    """Raise a Bezier segment (homogeneous control points, rows) by one degree."""
    p = P.shape[0] - 1
    Q = np.zeros((p + 2, P.shape[1]))
    Q[0], Q[-1] = P[0], P[-1]
    for i in range(1, p + 1):
        a = i / (p + 1)
        Q[i] = a * P[i - 1] + (1.0 - a) * P[i]
    return Q


def insert_knot(U, p, P, x):
    """Boehm single knot insertion on homogeneous control points ``P``."""
    U = np.asarray(U, dtype=float)
    k = int(np.searchsorted(U, x, side="right") - 1)
    Q = np.zeros((P.shape[0] + 1, P.shape[1]))
    Q[: k - p + 1] = P[: k - p + 1]
    Q[k + 1:] = P[k:]
    for i in range(k - p + 1, k + 1):
        a = (x - U[i]) / (U[i + p] - U[i])
        Q[i] = a * P[i] + (1.0 - a) * P[i - 1]
    return np.insert(U, k + 1, x), Q


def _linear_coords(kv: KnotVector, lo, hi):
    # Greville abscissae reproduce the affine map exactly
    return lo + (hi - lo) * kv.greville()


def make_flat_strip(L, W, p=2, nel_x=1, nel_y=1, normal_down=False):
    """Rectangle ``[0, L] x [0, W]`` in the plane z = 0.

    The surface normal ``a_1 x a_2`` is ``+e_z``; with ``normal_down`` the
    second parameter runs from ``y = W`` to ``y = 0`` and the normal is
    ``-e_z``.
    """
    if L <= 0 or W <= 0:
        raise ValueError("strip dimensions must be positive")
    if nel_x < 1 or nel_y < 1:
        raise ValueError("need at least one element per direction")
    kx, ky = KnotVector.uniform(p, nel_x), KnotVector.uniform(p, nel_y)
    xs, ys = _linear_coords(kx, 0.0, L), _linear_coords(ky, 0.0, W)
    if normal_down:
        ys = ys[::-1]
    pts = np.array([(x, y, 0.0) for y in ys for x in xs])
    return NurbsPatch(kx, ky, pts, np.ones(len(pts)), name="flat_strip")


def make_cylindrical_panel(R, L, B, p=2, nel_x=1, nel_y=1, quarter=True):
    """Cylindrical panel with axis along x and crown on the z axis.

    ``L`` is the axial length and ``B`` the arc length of the full panel.
    With ``quarter`` the patch covers ``x in [0, L/2]`` and the arc from the
    crown (theta = 0) to theta = B / (2R); otherwise the whole panel.
    The circular arc is exact: a rational quadratic segment, degree
    elevated to ``p`` and refined by knot insertion.
    """
    if p < 2:
        raise ValueError("a circular arc needs degree >= 2")
    if R <= 0 or L <= 0 or B <= 0:
        raise ValueError("panel dimensions must be positive")
    if B >= 2 * math.pi * R:
        raise ValueError("arc length must be below the circumference")
    half = B / (2.0 * R)
    th0, th1 = (0.0, half) if quarter else (-half, half)
    x0, x1 = (0.0, L / 2.0) if quarter else (-L / 2.0, L / 2.0)
    phi = th1 - th0
    if phi >= math.pi:
        raise ValueError("a single-patch panel must subtend less than pi")
    thm = 0.5 * (th0 + th1)
    w1 = math.cos(phi / 2.0)
    arc = np.array(
        [
            [R * math.sin(th0), R * math.cos(th0), 1.0],
            [R * math.sin(thm) / w1, R * math.cos(thm) / w1, w1],
            [R * math.sin(th1), R * math.cos(th1), 1.0],
        ]
    )
    Pw = np.column_stack([arc[:, :2] * arc[:, 2:], arc[:, 2]])
    for _ in range(p - 2):
        Pw = _elevate_bezier(Pw)
    U = np.array([0.0] * (p + 1) + [1.0] * (p + 1))
    for k in range(1, nel_y):
        U, Pw = insert_knot(U, p, Pw, k / nel_y)
    ky = KnotVector(p, tuple(U))
    kx = KnotVector.uniform(p, nel_x)
    xs = _linear_coords(kx, x0, x1)
    w = Pw[:, 2]
    yz = Pw[:, :2] / w[:, None]
    pts = np.array([(x, yz[j, 0], yz[j, 1]) for j in range(len(w)) for x in xs])
    wts = np.array([w[j] for j in range(len(w)) for _ in xs])
    return NurbsPatch(kx, ky, pts, wts, name="cylindrical_panel")
