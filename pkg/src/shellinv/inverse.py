"""Inverse load identification: objective, adjoint gradients, pseudo loads and the MMA loop.

With the forward residual ``r(u, s) = 0`` on the free dofs, the
objective ``J = 1/2 |u_meas - u|^2`` has gradient

    dJ/ds_i = lambda . f*_i,    K_T^T lambda = z,    z = u_meas - u,

where ``f*_i = d r / d s_i`` at frozen ``u`` is the pseudo load of design
entry ``i``.  The transpose solve keeps the gradient exact when follower
loads make ``K_T`` unsymmetric.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import (
    BodyForce,
    EdgeMoment,
    EdgeTraction,
    LoadSet,
    PointLoad,
    PrescribedDisplacement,
    Pressure,
    ShellProblem,
)
from .constitutive import InvertedConfigurationError
from .kinematics import SingularElementError
from .mma import MMAState, descent, mma_step
from .solver import (
    ConvergenceError,
    SingularTangentError,
    SolveSettings,
    arc_length_solve,
    factorize,
    load_stepping,
    newton_solve,
)

log = logging.getLogger("shellinv.inverse")

KINDS = {
    PrescribedDisplacement: "prescribed_displacement",
    EdgeTraction: "traction",
    PointLoad: "point_load",
    EdgeMoment: "moment",
    Pressure: "pressure",
    BodyForce: "body_force",
}

FORWARD_ERRORS = (ConvergenceError, SingularTangentError, InvertedConfigurationError,
                  SingularElementError, FloatingPointError, np.linalg.LinAlgError)


class ForwardFailure(RuntimeError):
    pass


# -- forward strategy ----------------------------------------------------------


@dataclass
class ForwardResult:
    U: np.ndarray
    system: object
    path: object = None


class ForwardModel:
    """Solve the forward problem for a given load set.

    ``method="newton"`` ramps the load stages in ``settings.n_steps``
    increments (or starts Newton from a warm state at full load).
    ``method="arc"`` traces an arc-length path with all Neumann loads scaled
    by the load factor until it first reaches 1, then corrects with Newton
    at full load.  Arc-length runs always start from the unloaded state.
    """

    def __init__(self, problem: ShellProblem, settings: SolveSettings | None = None,
                 method="newton", warm_start=True):
        if method not in ("newton", "arc"):
            raise ValueError(f"unknown forward method {method!r}")
        self.problem = problem
        self.settings = settings or SolveSettings()
        self.method = method
        self.warm_start = warm_start and method == "newton"

    def solve(self, loads: LoadSet, U_warm=None) -> ForwardResult:
        if self.method == "arc":
            return self._arc(loads)
        if self.warm_start and U_warm is not None:
            try:
                res = newton_solve(self.problem, self.settings, U_warm, loads)
                return ForwardResult(res.U, res.system)
            except FORWARD_ERRORS as exc:
                log.info("warm-start Newton failed (%s); restarting from zero", exc)
        try:
            path = load_stepping(self.problem, self.settings, None, loads)
            res = newton_solve(self.problem, self.settings, path[-1].U, loads)
        except FORWARD_ERRORS as exc:
            raise ForwardFailure(str(exc)) from exc
        return ForwardResult(res.U, res.system, path)

    def _arc(self, loads):
        def stop(sample, prev):
            return sample.load_factor >= 1.0

        try:
            path = arc_length_solve(self.problem, self.settings, loads=loads, stop=stop)
            if not path.samples or path[-1].load_factor < 1.0:
                raise ForwardFailure("arc-length path never reached the full load")
            a, b = path[-2], path[-1]
            t = (1.0 - a.load_factor) / (b.load_factor - a.load_factor)
            U0 = a.U + t * (b.U - a.U)
            res = newton_solve(self.problem, self.settings, U0, loads)
        except FORWARD_ERRORS as exc:
            raise ForwardFailure(str(exc)) from exc
        return ForwardResult(res.U, res.system, path)


# -- design and measurement ----------------------------------------------------


@dataclass
class DesignEntry:
    record: str
    lower: float
    upper: float
    initial: float | None = None
    true: float | None = None
    kind: str | None = None

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"design {self.record!r}: need lower < upper")


def make_measurement(u, seed=None, amplitude=1.0, mode="stochastic", gamma=None):
    """Experiment-like data ``u (1 + 0.01 gamma)``.

    ``mode="stochastic"`` draws ``gamma_i`` uniformly on ``[-amplitude,
    amplitude]`` per component; ``mode="systematic"`` applies the single
    value ``gamma`` to every component.
    """
    u = np.asarray(u, dtype=float)
    if mode == "systematic":
        g = 0.0 if gamma is None else float(gamma)
        return u * (1.0 + 0.01 * g)
    if mode != "stochastic":
        raise ValueError(f"unknown noise mode {mode!r}")
    rng = np.random.default_rng(seed)
    g = rng.uniform(-1.0, 1.0, size=u.shape) * amplitude
    return u * (1.0 + 0.01 * g)


def objective(u, u_meas):
    """``1/2 |u_meas - u|^2``."""
    r = np.asarray(u_meas, dtype=float) - np.asarray(u, dtype=float)
    return 0.5 * float(r @ r)


@dataclass
class StateConstraint:
    """``lower - u[dof] <= 0`` for each listed displacement dof."""

    dofs: np.ndarray
    lower: float = 0.0
    scale: float = 1.0
    cap: int = 20

    def values(self, U):
        return (self.lower - U[self.dofs]) / self.scale


@dataclass
class InverseSettings:
    max_iter: int = 30
    tol: float = 1e-3
    step_tol: float = 2e-4
    min_iter: int = 2
    sensitivity: str = "analytic"
    semi_scheme: str = "central"
    semi_step: float = 1e-5
    max_failures: int = 5
    max_rejects: int = 8
    move: float = 0.5
    precondition: bool = True
    frame_cond: float = 10.0

    def __post_init__(self):
        if self.sensitivity not in ("analytic", "semi"):
            raise ValueError("sensitivity must be 'analytic' or 'semi'")
        if self.semi_scheme not in ("forward", "central"):
            raise ValueError("semi_scheme must be 'forward' or 'central'")
        if not 0 < self.semi_step < 1:
            raise ValueError("semi_step must lie in (0, 1)")
        if self.frame_cond < 1:
            raise ValueError("frame_cond must be at least 1")


@dataclass
class IterationRecord:
    iteration: int
    J: float
    s: np.ndarray
    grad_norm: float
    error_x: float
    error_y: float
    max_violation: float = 0.0


@dataclass
class InverseResult:
    s: np.ndarray
    U: np.ndarray
    history: list
    converged: bool
    message: str = ""

    def write_csv(self, path, names):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "J", *names, "grad_norm", "error_X", "error_Y", "max_violation"])
            for h in self.history:
                w.writerow([h.iteration, f"{h.J:.10g}", *[f"{v:.10g}" for v in h.s],
                            f"{h.grad_norm:.6g}", f"{h.error_x:.6g}", f"{h.error_y:.6g}",
                            f"{h.max_violation:.6g}"])


class InverseProblem:
    """Identify load/boundary magnitudes from measured displacements."""

    def __init__(self, forward: ForwardModel, design, u_meas, measured=None,
                 state_constraint: StateConstraint | None = None,
                 settings: InverseSettings | None = None):
        self.forward = forward
        self.problem = forward.problem
        self.design = list(design)
        self.settings = settings or InverseSettings()
        dm = self.problem.dofmap
        self.measured = dm.free_disp if measured is None else np.asarray(measured, dtype=int)
        if self.measured.size == 0:
            raise ValueError("measured dof set is empty")
        if np.any(np.isin(self.measured, dm.fixed)) or np.any(self.measured >= dm.n_disp):
            raise ValueError("measured dofs must be free displacement dofs")
        u_meas = np.asarray(u_meas, dtype=float)
        self.u_meas = u_meas[self.measured] if u_meas.size == dm.n_total else u_meas
        if self.u_meas.size != self.measured.size:
            raise ValueError("u_meas does not match the measured dof set")
        self.state_constraint = state_constraint
        names = {r.name for r in self.problem.loads.records}
        for d in self.design:
            if d.record not in names:
                raise ValueError(f"design entry targets unknown load record {d.record!r}")
            d.kind = KINDS[type(self.problem.loads[d.record])]
        # position of each measured dof inside the free vector
        pos = np.full(dm.n_total, -1)
        pos[dm.free] = np.arange(dm.free.size)
        self._meas_pos = pos[self.measured]
        self._pos = pos

    @property
    def names(self):
        return [d.record for d in self.design]

    @property
    def lower(self):
        return np.array([d.lower for d in self.design])

    @property
    def upper(self):
        return np.array([d.upper for d in self.design])

    def loads_for(self, s):
        return self.problem.loads.with_values(**dict(zip(self.names, map(float, s))))

    def solve_forward(self, s, U_warm=None) -> ForwardResult:
        return self.forward.solve(self.loads_for(s), U_warm)

    def objective_at(self, U):
        return objective(U[self.measured], self.u_meas)

    # -- pseudo loads -------------------------------------------------------
    def pseudo_loads(self, s, fr: ForwardResult, mode="analytic"):
        """``d r_free / d s_i`` at frozen state, one column per design entry."""
        if mode == "semi":
            return semi_analytic_pseudo_loads(self, s, fr.U)
        loads = self.loads_for(s)
        return np.column_stack([analytic_pseudo_load(self.problem, loads[d.record], fr)
                                for d in self.design])

    def gradient(self, s, fr: ForwardResult, mode=None):
        """Adjoint gradient of J and (optionally) of the active state constraints."""
        mode = mode or self.settings.sensitivity
        dm = self.problem.dofmap
        z = np.zeros(dm.free.size)
        z[self._meas_pos] = self.u_meas - fr.U[self.measured]
        F = self.pseudo_loads(s, fr, mode)
        lu = adjoint_factor(fr.system.free_tangent())
        lam = lu.solve(z, trans="T")
        return F.T @ lam, (lu, F)

    def gauss_newton(self, lu, F):
        """Gauss-Newton Hessian ``S^T S`` of J, ``S = d u_meas / d s``."""
        S = lu.solve(np.asarray(F, dtype=float))[self._meas_pos]
        return S.T @ S

    def constraint_gradients(self, fr, lu, F, active):
        """``d g_j / d s`` for state constraints ``g_j = (lower - u_j) / scale``."""
        sc = self.state_constraint
        dm = self.problem.dofmap
        E = np.zeros((dm.free.size, len(active)))
        E[self._pos[sc.dofs[active]], np.arange(len(active))] = 1.0 / sc.scale
        mu = lu.solve(E, trans="T")
        return (F.T @ mu).T

    # -- driver -------------------------------------------------------------
    def run(self, s0=None, s_true=None, callback=None) -> InverseResult:
        return run_inverse(self, s0, s_true, callback)


def adjoint_factor(Kff):
    try:
        return factorize(Kff)
    except SingularTangentError:
        scale = abs(Kff.diagonal()).mean()
        warnings.warn("singular tangent at the forward state; regularizing the adjoint", RuntimeWarning)
        return factorize(Kff + 1e-10 * scale * sp.identity(Kff.shape[0], format="csc"))


def analytic_pseudo_load(problem: ShellProblem, rec, fr: ForwardResult):
    """``d r_free / d s`` for one load record at the converged state."""
    dm = problem.dofmap
    if isinstance(rec, PrescribedDisplacement):
        cols = np.array([3 * int(A) + rec.component for A in rec.nodes])
        K = fr.system.tangent
        return np.asarray(K[dm.free][:, cols].sum(axis=1)).ravel()
    f, _ = problem.unit_load(rec, fr.U, tangent=False)
    full = np.zeros(dm.n_total)
    full[: dm.n_disp] = f
    return -full[dm.free]


def pseudo_load_prescribed_displacement(problem, rec, fr):
    return analytic_pseudo_load(problem, rec, fr)


def pseudo_load_traction(problem, rec, fr):
    return analytic_pseudo_load(problem, rec, fr)


def pseudo_load_point_load(problem, rec, fr):
    return analytic_pseudo_load(problem, rec, fr)


def pseudo_load_moment(problem, rec, fr):
    return analytic_pseudo_load(problem, rec, fr)


def pseudo_load_pressure(problem, rec, fr):
    return analytic_pseudo_load(problem, rec, fr)


def semi_step(s, i, rel=1e-3):
    """Difference step ``rel * s_i``, or ``rel * max(1, |s|_inf)`` when ``s_i`` is zero."""
    if s[i] != 0.0:
        return rel * s[i]
    return rel * max(1.0, float(np.max(np.abs(s))))


def semi_analytic_pseudo_loads(inv: InverseProblem, s, U, scheme=None, rel_step=None):
    """Finite differences of the residual in each design entry at frozen ``u``.

    ``scheme="forward"`` is the one-sided difference with step
    :func:`semi_step`; ``"central"`` uses the same step on both sides.  The
    adjoint amplifies pseudo-load truncation by roughly the membrane to
    bending stiffness ratio for prescribed-displacement designs, hence the
    central default with a small relative step (``settings.semi_step``).
    """
    scheme = scheme or inv.settings.semi_scheme
    rel = inv.settings.semi_step if rel_step is None else rel_step
    pb = inv.problem
    dm = pb.dofmap

    def residual(sv):
        loads = inv.loads_for(sv)
        Up = U.copy()
        Up[dm.fixed] = pb.prescribed_vector(loads)[dm.fixed]
        return pb.assemble(Up, loads, tangent=False).residual[dm.free]

    base = residual(np.asarray(s, dtype=float)) if scheme == "forward" else None
    cols = []
    for i in range(len(s)):
        ds = semi_step(s, i, rel)
        sp_ = np.array(s, dtype=float)
        sp_[i] += ds
        if scheme == "forward":
            cols.append((residual(sp_) - base) / ds)
        else:
            sm = np.array(s, dtype=float)
            sm[i] -= ds
            cols.append((residual(sp_) - residual(sm)) / (2.0 * ds))
    return np.column_stack(cols)


def adjoint_gradient(inv: InverseProblem, s, fr: ForwardResult, mode="analytic"):
    return inv.gradient(s, fr, mode)[0]


def total_fd_gradient(inv: InverseProblem, s, fr: ForwardResult, rel_step=1e-6):
    """Central differences of J with full forward re-solves (verification oracle)."""
    g = np.zeros(len(s))
    for i in range(len(s)):
        h = rel_step * max(abs(s[i]), 1e-3)
        vals = []
        for sign in (1.0, -1.0):
            sp_ = np.array(s, dtype=float)
            sp_[i] += sign * h
            vals.append(inv.objective_at(inv.solve_forward(sp_, fr.U).U))
        g[i] = (vals[0] - vals[1]) / (2.0 * h)
    return g


class DesignFrame:
    """Affine coordinates ``x = xc + W y`` on the normalized design box.

    ``W`` whitens a Hessian estimate so that the separable MMA
    approximations see decoupled variables; for a narrow, nearly straight valley
    of J this turns the valley direction into a coordinate axis.  The box
    ``0 <= x <= 1`` becomes the bounding box of its image in ``y`` plus, when
    ``W`` is not diagonal, ``2n`` linear constraints.
    """

    def __init__(self, xc, W=None):
        self.xc = np.asarray(xc, dtype=float).copy()
        n = self.xc.size
        self.W = np.eye(n) if W is None else np.asarray(W, dtype=float)
        self.Winv = np.linalg.inv(self.W)
        a = self.Winv * (-self.xc)[None, :]
        b = self.Winv * (1.0 - self.xc)[None, :]
        self.ymin = np.minimum(a, b).sum(axis=1)
        self.ymax = np.maximum(a, b).sum(axis=1)
        self.diagonal = bool(np.all(self.W == np.diag(np.diag(self.W))))

    @classmethod
    def whitening(cls, xc, H, floor=1e-8):
        """Frame from a symmetric positive semidefinite ``H``; identity if ``H`` vanishes."""
        w, V = np.linalg.eigh(0.5 * (H + H.T))
        top = float(w.max()) if w.size else 0.0
        if not np.isfinite(top) or top <= 0.0:
            return cls(xc)
        w = np.maximum(w, floor * top)
        return cls(xc, V * np.sqrt(top / w)[None, :])

    def x(self, y):
        return self.xc + self.W @ y

    def y(self, x):
        return self.Winv @ (np.asarray(x, dtype=float) - self.xc)

    def condition(self, H):
        """Condition number of ``H`` expressed in this frame."""
        w = np.linalg.eigvalsh(self.W.T @ (0.5 * (H + H.T)) @ self.W)
        return float(w.max() / w.min()) if w.min() > 0 else np.inf

    def bounds(self, y):
        """Values and ``y``-gradients of ``-x <= 0`` and ``x - 1 <= 0``; empty when exact."""
        n = self.xc.size
        if self.diagonal:
            return np.zeros(0), np.zeros((0, n))
        x = self.x(y)
        return np.concatenate([-x, x - 1.0]), np.vstack([-self.W, self.W])


def run_inverse(inv: InverseProblem, s0=None, s_true=None, callback=None) -> InverseResult:
    """MMA loop until ``|J_k - J_{k-1}| / J_0 <= tol`` and the design settles.

    The design has settled when the largest normalized step is at most
    ``step_tol``; the objective test alone can fire while a weakly
    identifiable design is still drifting along a flat valley of J.

    Designs are normalized to ``[0, 1]`` by their bounds and each MMA
    subproblem by the current objective value.  With ``precondition`` the
    MMA variables are a :class:`DesignFrame` that whitens the Gauss-Newton
    Hessian; the frame is rebuilt (and the MMA history reset) whenever the
    Hessian's condition number in the current frame exceeds ``frame_cond``,
    and the Hessian diagonal in the frame floors the curvature of the MMA
    objective approximation.
    Trial points go through the conservative inner loop of
    :class:`MMAState`; a trial that fails the test is still taken when it
    strictly lowers J without adding constraint violation, while its
    curvature weights stay raised.  A failed forward solve tightens the
    asymptotes and retries; after ``max_failures`` such failures the run
    aborts with its history.
    """
    st = inv.settings
    lo, hi = inv.lower, inv.upper
    span = hi - lo
    if s0 is None:
        s0 = []
        for d in inv.design:
            if d.initial is not None:
                s0.append(d.initial)
            elif d.true is not None:
                s0.append(0.5 * d.true)
            else:
                s0.append(0.5 * (d.lower + d.upper))
    s = np.clip(np.asarray(s0, dtype=float), lo, hi)
    if s_true is None and all(d.true is not None for d in inv.design):
        s_true = np.array([d.true for d in inv.design])
    meas_norm = float(np.linalg.norm(inv.u_meas)) or 1.0

    def evaluate(s, U_warm):
        fr = inv.solve_forward(s, U_warm)
        J = inv.objective_at(fr.U)
        return fr, J

    def constraints(fr, lu, F):
        """Active state-constraint values, gradients, max violation and indices."""
        sc = inv.state_constraint
        if sc is None:
            return None, None, 0.0, None
        g = sc.values(fr.U)
        order = np.argsort(-g)[: sc.cap]
        act = order[g[order] > -0.05]
        if act.size == 0:
            act = order[:1]
        dg = inv.constraint_gradients(fr, lu, F, act)
        return g[act], dg, float(np.max(np.maximum(g, 0.0))), act

    def hessian(lu, F):
        return inv.gauss_newton(lu, F) * np.outer(span, span) if st.precondition else None

    fr, J = evaluate(s, None)
    J0 = J if J > 0 else 1.0
    history = []
    failures = 0
    converged = False
    message = ""
    x = (s - lo) / span

    def record(it, s, J, grad, fr, viol):
        ex = float(np.linalg.norm(s - s_true) / np.linalg.norm(s_true)) if s_true is not None else float("nan")
        ey = float(np.linalg.norm(fr.U[inv.measured] - inv.u_meas) / meas_norm)
        rec = IterationRecord(it, J, s.copy(), float(np.linalg.norm(grad)), ex, ey, viol)
        history.append(rec)
        log.info("inverse it=%d J=%.6e s=%s", it, J, np.array2string(s, precision=6))
        if callback:
            callback(rec)

    grad, (lu, F) = inv.gradient(s, fr)
    cons = constraints(fr, lu, F)
    H = hessian(lu, F)
    frame = DesignFrame.whitening(x, H) if H is not None else DesignFrame(x)
    state = MMAState(len(s), move=st.move)
    record(0, s, J, grad, fr, cons[2])
    for it in range(1, st.max_iter + 1):
        if H is not None and frame.condition(H) > st.frame_cond:
            log.debug("inverse it=%d: rebuilding the design frame", it)
            frame = DesignFrame.whitening(x, H)
            state = MMAState(len(s), move=st.move)
        y = frame.y(x)
        # subproblem objective normalized by the current value of J
        df0 = frame.W.T @ (grad * span) / J
        gb, dgb = frame.bounds(y)
        curv = np.diag(frame.W.T @ H @ frame.W) / J if H is not None else None
        if cons[0] is not None:
            g = np.concatenate([cons[0], gb])
            dg = np.vstack([cons[1] * span[None, :] @ frame.W, dgb])
        else:
            g, dg = gb, dgb
        accepted = False
        for _ in range(st.max_rejects):
            yn = mma_step(state, y, 1.0, df0, g, dg, frame.ymin, frame.ymax, curvature=curv)
            xn = np.clip(frame.x(yn), 0.0, 1.0)
            sn = lo + xn * span
            try:
                frn, Jn = evaluate(sn, fr.U)
            except ForwardFailure as exc:
                failures += 1
                log.warning("forward solve failed at s=%s: %s", sn, exc)
                if failures >= st.max_failures:
                    message = f"aborted after {failures} forward failures"
                    return InverseResult(s, fr.U, history, False, message)
                state.reject()
                continue
            gall = inv.state_constraint.values(frn.U) if inv.state_constraint is not None else None
            gn = gall[cons[3]] if gall is not None else np.zeros(0)
            gn = np.concatenate([gn, frame.bounds(yn)[0]])
            # conservative points are always taken; others only on strict descent
            ok = state.conservative(yn, Jn / J, gn, eps=1e-10)
            if ok or descent(J, Jn, _violation_of(cons), _violation_of(gall)):
                accepted = True
                break
            state.retry()
        if not accepted:
            # no trial lowered J: the current design is stationary to MMA
            converged = it > st.min_iter
            message = "no descent step found near the current design"
            break
        gradn, (lun, Fn) = inv.gradient(sn, frn)
        consn = constraints(frn, lun, Fn)
        H = hessian(lun, Fn)
        state.relax()
        dJ = abs(Jn - J) / J0
        dx = float(np.max(np.abs(xn - x)))
        x, s, fr, J, grad, cons = xn, sn, frn, Jn, gradn, consn
        record(it, s, J, grad, fr, consn[2])
        if it >= st.min_iter and dJ <= st.tol and dx <= st.step_tol:
            converged = True
            break
    return InverseResult(s, fr.U, history, converged, message)


def _violation_of(c):
    """Constraint values as a vector for :func:`descent` (``None`` when unconstrained)."""
    if c is None:
        return None
    if isinstance(c, tuple):
        return None if c[0] is None else np.array([c[2]])
    return np.asarray(c)
