"""Nonlinear equilibrium drivers: incremental Newton-Raphson and Crisfield arc-length."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .assembly import GlobalSystem, LoadSet, ShellProblem

log = logging.getLogger("shellinv.solver")


class ConvergenceError(RuntimeError):
    def __init__(self, message, history=None, U=None):
        super().__init__(message)
        self.history = history or []
        self.U = U


class SingularTangentError(RuntimeError):
    pass


@dataclass
class SolveSettings:
    tol: float = 1e-8
    abs_tol: float = 1e-12
    max_iter: int = 30
    n_steps: int = 1
    # arc-length controls
    arc_radius: float = 1.0
    arc_min: float = 1e-4
    arc_max: float = 1e3
    arc_grow: float = 1.2
    arc_fast_iters: int = 4
    arc_max_iter: int = 15
    arc_max_steps: int = 200
    predictor_sign: int = 1

    def __post_init__(self):
        if not (self.tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1 or self.n_steps < 1 or self.arc_max_iter < 1:
            raise ValueError("iteration and step counts must be at least 1")
        if not 0 < self.arc_min <= self.arc_radius <= self.arc_max:
            raise ValueError("need 0 < arc_min <= arc_radius <= arc_max")
        if self.predictor_sign not in (-1, 1):
            raise ValueError("predictor_sign must be +1 or -1")


@dataclass
class NewtonResult:
    U: np.ndarray
    converged: bool
    iterations: int
    history: list
    system: GlobalSystem

    @property
    def convergence_ratios(self):
        """``|r_{k+1}| / |r_k|^2`` for consecutive iterates."""
        h = np.asarray(self.history)
        return h[1:] / np.maximum(h[:-1] ** 2, 1e-300)


@dataclass
class PathSample:
    step: int
    load_factor: float
    U: np.ndarray
    iterations: int = 0
    reactions: np.ndarray | None = None


@dataclass
class EquilibriumPath:
    samples: list = field(default_factory=list)
    completed: bool = True
    message: str = ""

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def load_factors(self):
        return np.array([s.load_factor for s in self.samples])

    def dof_history(self, dof):
        return np.array([s.U[dof] for s in self.samples])

    def write_csv(self, path, dofs=None, reaction_sets=None):
        """One row per sample: step, load factor, chosen dofs, reaction sums."""
        dofs = dofs or {}
        reaction_sets = reaction_sets or {}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "load_factor", *dofs, *reaction_sets])
            for s in self.samples:
                row = [s.step, f"{s.load_factor:.10g}"]
                row += [f"{s.U[d]:.10g}" for d in dofs.values()]
                for idx in reaction_sets.values():
                    val = float(np.sum(s.reactions[idx])) if s.reactions is not None else float("nan")
                    row.append(f"{val:.10g}")
                w.writerow(row)


def factorize(K):
    try:
        lu = spla.splu(K.tocsc())
    except RuntimeError as exc:
        raise SingularTangentError(str(exc)) from exc
    diag = np.abs(lu.U.diagonal())
    if not np.all(np.isfinite(diag)) or diag.min() <= 1e-14 * diag.max():
        raise SingularTangentError("tangent matrix is numerically singular")
    return lu


def residual_norms(gs: GlobalSystem):
    """Free residual norm and the force scale it is compared against."""
    dm = gs.dofmap
    r = gs.residual[dm.free]
    scale = max(np.linalg.norm(gs.f_ext[dm.free]), np.linalg.norm(gs.reactions),
                np.linalg.norm(gs.f_int[dm.free_disp]))
    return float(np.linalg.norm(r)), float(scale)


def _converged(rn, scale, settings):
    return rn <= settings.tol * scale or rn <= settings.abs_tol


def newton_solve(problem: ShellProblem, settings: SolveSettings | None = None, U0=None,
                 loads: LoadSet | None = None, factors=None) -> NewtonResult:
    """Newton-Raphson at a fixed load level.

    Prescribed displacements are imposed through a linearized first
    iterate, ``K_ff du_f = -(r_f + K_fp du_p)``, so large jumps in the
    Dirichlet data do not distort the first trial state.
    """
    settings = settings or SolveSettings()
    dm = problem.dofmap
    U = np.zeros(dm.n_total) if U0 is None else np.array(U0, dtype=float)
    target = problem.prescribed_vector(loads, factors)
    dup = np.zeros_like(U)
    dup[dm.fixed] = target[dm.fixed] - U[dm.fixed]
    history = []
    energy0 = None
    gs = None
    for it in range(settings.max_iter + 1):
        gs = problem.assemble(U, loads, factors, tangent=True)
        rf = gs.residual[dm.free]
        first = it == 0 and np.any(dup)
        if first:
            rhs = rf + gs.tangent[dm.free][:, dm.fixed] @ dup[dm.fixed]
        else:
            rn, scale = residual_norms(gs)
            history.append(rn)
            log.debug("newton it=%d |r|=%.3e scale=%.3e", it, rn, scale)
            if _converged(rn, scale, settings):
                return NewtonResult(U, True, it, history, gs)
            if len(history) >= 2 and rn <= np.sqrt(settings.tol) * scale and rn >= 0.5 * history[-2]:
                # stagnation below sqrt(tol): the strain cancellation floor
                log.debug("newton stagnated at |r|=%.3e (scale %.3e)", rn, scale)
                return NewtonResult(U, True, it, history, gs)
            rhs = rf
        if it == settings.max_iter:
            break
        lu = factorize(gs.free_tangent())
        du = lu.solve(-rhs)
        if not np.all(np.isfinite(du)):
            raise SingularTangentError("non-finite Newton increment")
        energy = abs(float(du @ rhs))
        if first:
            U = U + dup
        U[dm.free] += du
        if energy0 is None:
            energy0 = energy
        elif energy <= settings.tol**2 * energy0:
            # residual has reached the roundoff floor of the internal forces
            gs = problem.assemble(U, loads, factors, tangent=True)
            history.append(residual_norms(gs)[0])
            return NewtonResult(U, True, it + 1, history, gs)
    raise ConvergenceError(f"Newton did not converge in {settings.max_iter} iterations", history, U)


def load_stepping(problem: ShellProblem, settings: SolveSettings | None = None, U0=None,
                  loads: LoadSet | None = None, stages=None) -> EquilibriumPath:
    """Ramp each load stage linearly to full value in ``n_steps`` increments.

    Stages are applied one after another; earlier stages stay at full value.
    """
    settings = settings or SolveSettings()
    loads = loads or problem.loads
    stages = stages if stages is not None else (loads.stages or [0])
    U = np.zeros(problem.dofmap.n_total) if U0 is None else np.array(U0, dtype=float)
    path = EquilibriumPath()
    step = 0
    for k, stage in enumerate(stages):
        for i in range(1, settings.n_steps + 1):
            lam = i / settings.n_steps
            fac = {s: (1.0 if j < k else lam if j == k else 0.0) for j, s in enumerate(stages)}
            res = newton_solve(problem, settings, U, loads, fac)
            U = res.U
            step += 1
            path.samples.append(PathSample(step, k + lam, U.copy(), res.iterations,
                                           res.system.reactions.copy()))
    return path


def arc_length_solve(problem: ShellProblem, settings: SolveSettings | None = None, U0=None,
                     loads: LoadSet | None = None, stop=None, lam0=0.0, stage=None,
                     hold=None) -> EquilibriumPath:
    """Crisfield cylindrical arc-length continuation in a load factor.

    With ``stage=None`` all Neumann loads are scaled by the load factor and
    Dirichlet data stay at full value.  With ``stage=k`` the factor drives
    both the Neumann and the Dirichlet data of stage ``k``; earlier stages
    are held at full value and later ones at zero unless ``hold`` maps a
    stage to another factor.  The constraint measures
    the free displacement increment plus the increment of the driven
    prescribed values.  ``stop(sample, previous)`` ends the trace when it
    returns True.
    """
    settings = settings or SolveSettings()
    loads = loads or problem.loads
    dm = problem.dofmap
    free, fixed = dm.free, dm.fixed
    dmask = free < dm.n_disp
    if stage is None:
        def fac(lam):
            return lam
        unit = 1.0
        p0 = problem.prescribed_vector(loads)
        p1 = np.zeros(dm.n_total)
    else:
        order = sorted(set(loads.stages) | {stage})
        k = order.index(stage)

        held = {s: (1.0 if j < k else 0.0) for j, s in enumerate(order)}
        held.update(hold or {})

        def fac(lam):
            return {s: (lam if s == stage else held[s]) for s in order}
        unit = {s: (1.0 if s == stage else 0.0) for s in order}
        p0 = problem.prescribed_vector(loads, fac(0.0))
        p1 = problem.prescribed_vector(loads, fac(1.0)) - p0
    p1f = p1[fixed]
    c_fix = float(p1f @ p1f)
    U = np.zeros(dm.n_total) if U0 is None else np.array(U0, dtype=float)
    lam = float(lam0)
    U[fixed] = p0[fixed] + lam * p1f
    radius = settings.arc_radius
    path = EquilibriumPath()
    gs = problem.assemble(U, loads, fac(lam), tangent=False)
    path.samples.append(PathSample(0, lam, U.copy(), 0, gs.reactions.copy()))
    prev_inc = None
    step = 0
    fails = 0

    def dnorm2(v):
        return float(v[dmask] @ v[dmask])

    while step < settings.arc_max_steps:
        U_n, lam_n = U.copy(), lam
        dU = np.zeros(len(free))
        dlam = 0.0
        ok = False
        iters = 0
        for it in range(settings.arc_max_iter):
            Ut = U_n.copy()
            Ut[free] += dU
            Ut[fixed] = p0[fixed] + (lam_n + dlam) * p1f
            gs = problem.assemble(Ut, loads, fac(lam_n + dlam), tangent=True)
            fhat = problem.external(Ut, loads, unit, tangent=False)[0]
            fh = np.zeros(dm.n_total)
            fh[: dm.n_disp] = fhat
            q = fh[free]
            if c_fix:
                q = q - gs.tangent[free][:, fixed] @ p1f
            r = gs.residual[free]
            if it > 0:
                rn, scale = residual_norms(gs)
                if _converged(rn, scale, settings):
                    ok = True
                    iters = it
                    break
            try:
                lu = factorize(gs.free_tangent())
            except SingularTangentError:
                break
            du_t = lu.solve(q)
            du_r = lu.solve(-r)
            if it == 0:
                sign = settings.predictor_sign
                if prev_inc is not None:
                    sign = 1 if float(du_t[dmask] @ prev_inc[dmask]) + c_fix * prev_dlam >= 0 else -1
                dl = sign * radius / np.sqrt(dnorm2(du_t) + c_fix)
                dU = dU + du_r + dl * du_t
                dlam += dl
                continue
            base = dU + du_r
            a1 = dnorm2(du_t) + c_fix
            a2 = 2.0 * (float(du_t[dmask] @ base[dmask]) + c_fix * dlam)
            a3 = dnorm2(base) + c_fix * dlam**2 - radius**2
            disc = a2 * a2 - 4.0 * a1 * a3
            if disc < 0:
                break
            roots = [(-a2 + s * np.sqrt(disc)) / (2.0 * a1) for s in (1.0, -1.0)]
            best, bcos = None, -np.inf
            for dl in roots:
                cand = base + dl * du_t
                num = float(cand[dmask] @ dU[dmask]) + c_fix * (dlam + dl) * dlam
                den = np.sqrt((dnorm2(cand) + c_fix * (dlam + dl) ** 2) * (dnorm2(dU) + c_fix * dlam**2))
                cos = num / max(den, 1e-300)
                if cos > bcos:
                    best, bcos = dl, cos
            dU = base + best * du_t
            dlam += best
        if not ok:
            fails += 1
            radius *= 0.5
            log.debug("arc-length step failed; radius -> %.3e", radius)
            if radius < settings.arc_min or fails > 30:
                path.completed = False
                path.message = "arc-length radius fell below the minimum"
                return path
            continue
        U = U_n.copy()
        U[free] += dU
        lam = lam_n + dlam
        U[fixed] = p0[fixed] + lam * p1f
        gs_chk = problem.assemble(U, loads, fac(lam), tangent=False)
        rn, scale = residual_norms(gs_chk)
        if not rn <= 10.0 * max(settings.tol * scale, settings.abs_tol):
            raise ConvergenceError("accepted arc-length sample failed the residual re-check")
        step += 1
        prev_inc, prev_dlam = dU.copy(), dlam
        sample = PathSample(step, lam, U.copy(), iters, gs_chk.reactions.copy())
        path.samples.append(sample)
        log.debug("arc step %d lam=%.6g iters=%d radius=%.3e", step, lam, iters, radius)
        if iters <= settings.arc_fast_iters:
            radius = min(radius * settings.arc_grow, settings.arc_max)
        if stop is not None and stop(sample, path.samples[-2]):
            return path
    path.completed = stop is None
    if stop is not None:
        path.message = "maximum arc-length steps reached before the stop condition"
    return path


def energy_norm_error(E_num, E_ref):
    """``sqrt(|(E_num - E_ref) / E_ref|)``."""
    if E_ref == 0:
        raise ValueError("reference strain energy is zero")
    return float(np.sqrt(abs((E_num - E_ref) / E_ref)))
