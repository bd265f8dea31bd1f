"""Method of moving asymptotes for small dense problems.

Solves ``min f0(x)`` subject to ``f_j(x) <= 0`` and box bounds, following
Svanberg's formulation with artificial variables ``y`` (weights ``c``, ``d``)
and ``z`` (weights ``a0``, ``a``).  The convex subproblem is solved by a
primal-dual interior-point Newton method.

Conservativeness follows the globally convergent variant: each accepted
point must satisfy ``f_i(x_new) <= f~_i(x_new)`` for the convex
approximations ``f~_i``; otherwise the curvature weights ``rho_i`` grow
and the same subproblem is re-solved with unchanged asymptotes.  The
weights are kept per design variable, and the growth is shared out in
proportion to each variable's part of the distance measure, so a stiff
variable does not freeze a flat one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MMAState:
    """Iterate history and asymptotes carried between MMA steps."""

    n: int
    iteration: int = 0
    xold1: np.ndarray | None = None
    xold2: np.ndarray | None = None
    low: np.ndarray | None = None
    upp: np.ndarray | None = None
    asyinit: float = 0.5
    asyincr: float = 1.2
    asydecr: float = 0.7
    move: float = 0.5
    forced: tuple | None = None
    rho0: np.ndarray | None = None
    rho: np.ndarray | None = None
    _prev: tuple | None = None
    _approx: dict | None = None

    def reject(self, factor=0.5):
        """Undo the last step's bookkeeping and tighten its asymptotes.

        The next call to :func:`mma_step` from the same point then solves a
        more conservative subproblem.
        """
        if self.low is None or self.xold1 is None:
            self.asyinit *= factor
            return
        x = self.xold1
        self.forced = (x - factor * (x - self.low), x + factor * (self.upp - x))
        self.xold1, self.xold2 = self._prev
        self.iteration -= 1

    def approximation(self, xn):
        """Values of the convex approximations ``(f~_0, f~)`` at ``xn``."""
        ap = self._approx
        ux, xl = ap["upp"] - xn, xn - ap["low"]
        f0 = ap["r0"] + ap["p0"] @ (1.0 / ux) + ap["q0"] @ (1.0 / xl)
        f = ap["r"] + ap["P"] @ (1.0 / ux) + ap["Q"] @ (1.0 / xl)
        return float(f0), f

    def conservative(self, xn, f0n, fn=None, eps=1e-12):
        """Check the trial point and raise ``rho`` where it fails.

        Returns True when every approximation overestimates its function at
        ``xn``.  On failure the curvature weights grow; call :meth:`retry`
        to re-solve the same subproblem with them.
        """
        ap = self._approx
        if ap is None:
            return True
        a0, a = self.approximation(xn)
        fn = np.zeros(0) if fn is None else np.asarray(fn, dtype=float).reshape(-1)
        if len(a) != len(fn):
            fn = np.full(len(a), -np.inf)
        x, low, upp, span = ap["x"], ap["low"], ap["upp"], ap["span"]
        di = (upp - low) * (xn - x) ** 2 / ((upp - xn) * (xn - low) * span)
        dd = max(float(di @ di), 1e-20)
        bad0 = f0n > a0 + eps * max(1.0, abs(a0))
        bad = fn > a + eps * np.maximum(1.0, np.abs(a))
        if not (bad0 or np.any(bad)):
            return True

        def grow(r, excess):
            # sum_i dr_i d_i = 1.1 excess; variables that did not move keep their weight
            inc = 1.1 * excess * di / dd if float(di.sum()) > 1e-10 else np.full_like(r, 1.1 * excess / 1e-10)
            return np.minimum(r + inc, np.maximum(10.0 * r, 10.0 * r.max()))

        if bad0:
            self.rho0 = grow(self.rho0, f0n - a0)
        rho = self.rho
        for j in np.flatnonzero(bad):
            rho[j] = grow(rho[j], fn[j] - a[j])
        return False

    def retry(self):
        """Roll back the last step so the next call re-solves it with the same asymptotes."""
        ap = self._approx
        if ap is None:
            return
        self.forced = (ap["low"], ap["upp"])
        self.xold1, self.xold2 = self._prev
        self.iteration -= 1

    def relax(self):
        """Shrink the curvature weights after an accepted step."""
        if self.rho0 is not None:
            self.rho0 = np.maximum(0.1 * self.rho0, 1e-6)
        if self.rho is not None:
            self.rho = np.maximum(0.1 * self.rho, 1e-6)


def mma_step(state: MMAState, x, f0, df0, fval=None, dfdx=None, xmin=None, xmax=None,
             a0=1.0, a=None, c=None, d=None, curvature=None):
    """One MMA update; returns the new point (and updates ``state`` in place).

    ``fval`` (m,) and ``dfdx`` (m, n) describe constraints ``f_j <= 0``.
    ``curvature`` (n,) is a lower bound on the second derivatives of the
    objective approximation at ``x``, e.g. the diagonal of a Gauss-Newton
    Hessian; without it the curvature comes from the gradient and ``rho0``.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    df0 = np.asarray(df0, dtype=float).reshape(n)
    xmin = np.zeros(n) if xmin is None else np.asarray(xmin, dtype=float)
    xmax = np.ones(n) if xmax is None else np.asarray(xmax, dtype=float)
    if fval is None or len(fval) == 0:
        fval = np.zeros(1) - 1.0
        dfdx = np.zeros((1, n))
    fval = np.asarray(fval, dtype=float).reshape(-1)
    dfdx = np.asarray(dfdx, dtype=float).reshape(fval.size, n)
    m = fval.size
    a = np.zeros(m) if a is None else np.asarray(a, dtype=float)
    c = np.full(m, 1000.0) if c is None else np.asarray(c, dtype=float)
    d = np.ones(m) if d is None else np.asarray(d, dtype=float)

    if not np.any(df0) and np.all(fval < 0):
        state.iteration += 1
        state._approx = None
        return x.copy()

    state.iteration += 1
    span = xmax - xmin
    if state.forced is not None:
        low, upp = state.forced
        state.forced = None
    elif state.iteration <= 2 or state.low is None or state.xold2 is None:
        low = x - state.asyinit * span
        upp = x + state.asyinit * span
    else:
        zzz = (x - state.xold1) * (state.xold1 - state.xold2)
        factor = np.ones(n)
        factor[zzz > 0] = state.asyincr
        factor[zzz < 0] = state.asydecr
        low = x - factor * (state.xold1 - state.low)
        upp = x + factor * (state.upp - state.xold1)
        low = np.clip(low, x - 10 * span, x - 0.01 * span)
        upp = np.clip(upp, x + 0.01 * span, x + 10 * span)
    albefa = 0.1
    if state.rho0 is None or len(state.rho0) != n:
        state.rho0 = np.full(n, 1e-5)
    if state.rho is None or state.rho.shape != (m, n):
        state.rho = np.full((m, n), 1e-5)
    alfa = np.maximum.reduce([low + albefa * (x - low), x - state.move * span, xmin])
    beta = np.minimum.reduce([upp - albefa * (upp - x), x + state.move * span, xmax])
    xmami = np.maximum(span, 1e-5)
    ux2 = (upp - x) ** 2
    xl2 = (x - low) ** 2
    p0 = np.maximum(df0, 0.0)
    q0 = np.maximum(-df0, 0.0)
    pq0 = 1e-3 * (p0 + q0) + state.rho0 / xmami
    if curvature is not None:
        # f~0'' >= 2 pq0 (1/(U-x) + 1/(x-L))
        h = np.maximum(np.asarray(curvature, dtype=float).reshape(n), 0.0)
        pq0 = pq0 + 0.5 * h / (1.0 / (upp - x) + 1.0 / (x - low))
    p0 = (p0 + pq0) * ux2
    q0 = (q0 + pq0) * xl2
    P = np.maximum(dfdx, 0.0)
    Q = np.maximum(-dfdx, 0.0)
    PQ = 1e-3 * (P + Q) + state.rho / xmami[None, :]
    P = (P + PQ) * ux2
    Q = (Q + PQ) * xl2
    b = P @ (1.0 / (upp - x)) + Q @ (1.0 / (x - low)) - fval
    xnew = subsolv(m, n, 1e-7, low, upp, alfa, beta, p0, q0, P, Q, a0, a, b, c, d)[0]
    r0 = f0 - p0 @ (1.0 / (upp - x)) - q0 @ (1.0 / (x - low))
    state._approx = dict(x=x.copy(), low=low, upp=upp, span=xmami, p0=p0, q0=q0, P=P, Q=Q,
                         r0=float(r0), r=-b)
    state._prev = (state.xold1, state.xold2)
    state.xold2 = None if state.xold1 is None else state.xold1.copy()
    state.xold1 = x.copy()
    state.low, state.upp = low, upp
    return np.clip(xnew, xmin, xmax)


def minimize(fun, x0, xmin, xmax, constraints=None, max_iter=100, tol=1e-8, max_rejects=20):
    """Bound-constrained MMA loop with conservative step acceptance.

    A trial that fails the conservative test is still taken when it lowers
    the objective without adding constraint violation (see :func:`descent`).

    ``fun(x) -> (f0, df0)``; ``constraints(x) -> (g, dg)`` with ``g <= 0``.
    Returns ``(x, history)`` where history holds accepted ``(x, f0)``.
    """
    x = np.asarray(x0, dtype=float)
    state = MMAState(x.size)
    f, df = fun(x)
    g, dg = constraints(x) if constraints else (None, None)
    hist = [(x.copy(), f)]
    for _ in range(max_iter):
        for _ in range(max_rejects):
            xn = mma_step(state, x, f, df, g, dg, xmin, xmax)
            fn, dfn = fun(xn)
            gn, dgn = constraints(xn) if constraints else (None, None)
            if state.conservative(xn, fn, gn) or descent(f, fn, g, gn):
                break
            state.retry()
        else:
            break
        state.relax()
        done = abs(f - fn) <= tol * max(abs(hist[0][1]), 1e-300)
        x, f, df, g, dg = xn, fn, dfn, gn, dgn
        hist.append((x.copy(), f))
        if done:
            break
    return x, hist


def violation(g):
    return 0.0 if g is None or len(g) == 0 else float(np.max(np.maximum(g, 0.0)))


def descent(f_old, f_new, g_old=None, g_new=None):
    """Strict decrease of the objective that does not add constraint violation."""
    v_old, v_new = violation(g_old), violation(g_new)
    return f_new < f_old - 1e-12 * abs(f_old) and v_new <= max(v_old, 1e-9)


def acceptable(f_old, f_new, g_old=None, g_new=None):
    """Accept a step that lowers the objective or the constraint violation."""
    v_old, v_new = violation(g_old), violation(g_new)
    if v_new > v_old + 1e-12:
        return v_new <= 1e-9 and f_new <= f_old
    return f_new <= f_old + 1e-14 * abs(f_old) or v_new < v_old - 1e-12


def subsolv(m, n, epsimin, low, upp, alfa, beta, p0, q0, P, Q, a0, a, b, c, d):
    """Primal-dual Newton solution of the MMA subproblem."""
    een, eem = np.ones(n), np.ones(m)
    epsi = 1.0
    x = 0.5 * (alfa + beta)
    y = eem.copy()
    z = 1.0
    lam = eem.copy()
    xsi = np.maximum(1.0 / (x - alfa), een)
    eta = np.maximum(1.0 / (beta - x), een)
    mu = np.maximum(eem, 0.5 * c)
    zet = 1.0
    s = eem.copy()

    def residual(x, y, z, lam, xsi, eta, mu, zet, s, epsi):
        ux1, xl1 = upp - x, x - low
        plam = p0 + P.T @ lam
        qlam = q0 + Q.T @ lam
        gvec = P @ (1.0 / ux1) + Q @ (1.0 / xl1)
        rex = plam / ux1**2 - qlam / xl1**2 - xsi + eta
        rey = c + d * y - mu - lam
        rez = a0 - zet - a @ lam
        relam = gvec - a * z - y + s - b
        rexsi = xsi * (x - alfa) - epsi
        reeta = eta * (beta - x) - epsi
        remu = mu * y - epsi
        rezet = zet * z - epsi
        res = lam * s - epsi
        return np.concatenate([rex, rey, [rez], relam, rexsi, reeta, remu, [rezet], res])

    while epsi > epsimin:
        r = residual(x, y, z, lam, xsi, eta, mu, zet, s, epsi)
        rnorm, rmax = np.linalg.norm(r), np.max(np.abs(r))
        it = 0
        while rmax > 0.9 * epsi and it < 200:
            it += 1
            ux1, xl1 = upp - x, x - low
            ux2, xl2 = ux1**2, xl1**2
            plam = p0 + P.T @ lam
            qlam = q0 + Q.T @ lam
            gvec = P @ (1.0 / ux1) + Q @ (1.0 / xl1)
            GG = P / ux2[None, :] - Q / xl2[None, :]
            dpsidx = plam / ux2 - qlam / xl2
            delx = dpsidx - epsi / (x - alfa) + epsi / (beta - x)
            dely = c + d * y - lam - epsi / y
            delz = a0 - a @ lam - epsi / z
            dellam = gvec - a * z - y - b + epsi / lam
            diagx = 2.0 * (plam / (ux1 * ux2) + qlam / (xl1 * xl2)) + xsi / (x - alfa) + eta / (beta - x)
            diagy = d + mu / y
            diaglamyi = s / lam + 1.0 / diagy
            if m < n:
                blam = dellam + dely / diagy - GG @ (delx / diagx)
                Alam = np.diag(diaglamyi) + (GG / diagx[None, :]) @ GG.T
                AA = np.block([[Alam, a[:, None]], [a[None, :], np.array([[-zet / z]])]])
                sol = np.linalg.solve(AA, np.concatenate([blam, [delz]]))
                dlam, dz = sol[:m], sol[m]
                dx = -delx / diagx - (GG.T @ dlam) / diagx
            else:
                dellamyi = dellam + dely / diagy
                Axx = np.diag(diagx) + (GG.T / diaglamyi[None, :]) @ GG
                azz = zet / z + a @ (a / diaglamyi)
                axz = -GG.T @ (a / diaglamyi)
                bx = delx + GG.T @ (dellamyi / diaglamyi)
                bz = delz - a @ (dellamyi / diaglamyi)
                AA = np.block([[Axx, axz[:, None]], [axz[None, :], np.array([[azz]])]])
                sol = np.linalg.solve(AA, np.concatenate([-bx, [-bz]]))
                dx, dz = sol[:n], sol[n]
                dlam = (GG @ dx) / diaglamyi - dz * (a / diaglamyi) + dellamyi / diaglamyi
            dy = -dely / diagy + dlam / diagy
            dxsi = -xsi + epsi / (x - alfa) - (xsi * dx) / (x - alfa)
            deta = -eta + epsi / (beta - x) + (eta * dx) / (beta - x)
            dmu = -mu + epsi / y - (mu * dy) / y
            dzet = -zet + epsi / z - zet * dz / z
            ds = -s + epsi / lam - (s * dlam) / lam
            xx = np.concatenate([y, [z], lam, xsi, eta, mu, [zet], s])
            dxx = np.concatenate([dy, [dz], dlam, dxsi, deta, dmu, [dzet], ds])
            stmxx = np.max(-1.01 * dxx / xx)
            stmalfa = np.max(-1.01 * dx / (x - alfa))
            stmbeta = np.max(1.01 * dx / (beta - x))
            steg = 1.0 / max(stmalfa, stmbeta, stmxx, 1.0)
            old = (x, y, z, lam, xsi, eta, mu, zet, s)
            for _ in range(50):
                x = old[0] + steg * dx
                y = old[1] + steg * dy
                z = old[2] + steg * dz
                lam = old[3] + steg * dlam
                xsi = old[4] + steg * dxsi
                eta = old[5] + steg * deta
                mu = old[6] + steg * dmu
                zet = old[7] + steg * dzet
                s = old[8] + steg * ds
                r = residual(x, y, z, lam, xsi, eta, mu, zet, s, epsi)
                if np.linalg.norm(r) <= rnorm:
                    break
                steg *= 0.5
            rnorm, rmax = np.linalg.norm(r), np.max(np.abs(r))
        epsi *= 0.1
    return x, y, z, lam, xsi, eta, mu, zet, s
