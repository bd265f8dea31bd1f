import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import forward_solution, private_forward, scenario
from shellinv import assembly as asm
from shellinv.constitutive import Koiter, ProjectedNeoHookean
from shellinv.inverse import (DesignEntry, ForwardModel, InverseProblem, InverseSettings,
                              StateConstraint, make_measurement, objective,
                              semi_analytic_pseudo_loads, semi_step, total_fd_gradient)
from shellinv.nurbs import make_cylindrical_panel, make_flat_strip
from shellinv.solver import SolveSettings

TIGHT = SolveSettings(tol=1e-12, n_steps=4)


def cantilever_case(kind):
    """Small clamped strip with one design record of the given class."""
    strip = make_flat_strip(4.0, 1.0, 2, 8, 2)
    model = asm.ShellModel(strip, ProjectedNeoHookean(1.0e4, 0.3, 0.1))
    clamp = tuple(strip.edge_nodes("xi0", 0)) + tuple(strip.edge_nodes("xi0", 1))
    tip = tuple(strip.edge_nodes("xi1"))
    recs = [asm.Support(clamp, name="clamp")]
    rec, true = {
        "prescribed_displacement": (asm.PrescribedDisplacement(tip, 2, 1.0, "s"), 1.0),
        "traction": (asm.EdgeTraction("xi1", (0, 0, 1), 0.5, name="s"), 0.5),
        "point_load": (asm.PointLoad((0, 0, 1), 0.4, point=(1.0, 0.5), name="s"), 0.4),
        "moment": (asm.EdgeMoment(("xi1",), 0.4, name="s"), 0.4),
        "pressure": (asm.Pressure(0.2, "s"), 0.2),
        "body_force": (asm.BodyForce((0, 0, 1), 0.2, name="s"), 0.2),
    }[kind]
    recs.append(rec)
    problem = asm.ShellProblem(model, asm.LoadSet(recs))
    fw = ForwardModel(problem, TIGHT)
    u_true = fw.solve(problem.loads).U
    meas = make_measurement(u_true, seed=1, amplitude=1.0)
    inv = InverseProblem(fw, [DesignEntry("s", 0.0, 2 * true, true=true)], meas)
    return inv, true


KINDS = ["prescribed_displacement", "traction", "point_load", "moment", "pressure", "body_force"]


@pytest.mark.parametrize("kind", KINDS)
class TestGradients:
    @pytest.fixture
    def case(self, kind):
        inv, true = cantilever_case(kind)
        s = np.array([0.6 * true])
        return inv, s, inv.solve_forward(s)

    def test_adjoint_matches_total_fd(self, case, kind):
        inv, s, fr = case
        ga = inv.gradient(s, fr, "analytic")[0]
        gf = total_fd_gradient(inv, s, fr)
        assert inv.design[0].kind == kind
        np.testing.assert_allclose(ga, gf, rtol=1e-4)

    def test_semi_analytic_matches_total_fd(self, case, kind):
        inv, s, fr = case
        gs = inv.gradient(s, fr, "semi")[0]
        gf = total_fd_gradient(inv, s, fr)
        np.testing.assert_allclose(gs, gf, rtol=1e-3)

    def test_pseudo_load_by_residual_difference(self, case, kind):
        inv, s, fr = case
        Fa = inv.pseudo_loads(s, fr, "analytic")
        Fs = semi_analytic_pseudo_loads(inv, s, fr.U, "central")
        np.testing.assert_allclose(Fa, Fs, atol=1e-7 * np.abs(Fa).max())


class TestBenchmarkGradients:
    @pytest.mark.parametrize("name", ["cantilever_disp", "cantilever_traction"])
    def test_cantilevers(self, name):
        sc = scenario(name)
        inv = sc.inverse_problem(sc.measurement(base=forward_solution(name).U))
        private_forward(inv)
        s = np.array([0.5 * d.true for d in inv.design])
        fr = inv.solve_forward(s)
        gf = total_fd_gradient(inv, s, fr)
        np.testing.assert_allclose(inv.gradient(s, fr, "analytic")[0], gf, rtol=1e-4)
        np.testing.assert_allclose(inv.gradient(s, fr, "semi")[0], gf, rtol=1e-3)

    def test_forward_scheme_is_first_order(self):
        """One-sided pseudo loads carry an O(step) error that the central scheme removes."""
        inv, true = cantilever_case("prescribed_displacement")
        s = np.array([0.6 * true])
        fr = inv.solve_forward(s)
        Fa = inv.pseudo_loads(s, fr, "analytic")
        ef = np.linalg.norm(semi_analytic_pseudo_loads(inv, s, fr.U, "forward", 1e-3) - Fa)
        ec = np.linalg.norm(semi_analytic_pseudo_loads(inv, s, fr.U, "central", 1e-3) - Fa)
        assert ec < 1e-2 * ef


class TestMeasurement:
    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 5.0))
    @settings(max_examples=30, deadline=None)
    def test_stochastic_bounds_and_determinism(self, seed, amp):
        u = np.linspace(-2.0, 3.0, 50)
        m1 = make_measurement(u, seed, amp)
        np.testing.assert_array_equal(m1, make_measurement(u, seed, amp))
        assert np.all(np.abs(m1 - u) <= 0.01 * amp * np.abs(u) + 1e-15)

    def test_independent_components(self):
        u = np.ones(20000)
        g = (make_measurement(u, 3) - 1.0) / 0.01
        assert abs(g.mean()) < 0.02
        assert g.var() == pytest.approx(1.0 / 3.0, rel=0.03)

    def test_systematic(self):
        u = np.array([1.0, -2.0])
        np.testing.assert_allclose(make_measurement(u, mode="systematic", gamma=5.0), [1.05, -2.1])
        np.testing.assert_array_equal(make_measurement(u, amplitude=0.0), u)
        with pytest.raises(ValueError):
            make_measurement(u, mode="bogus")

    def test_objective(self):
        assert objective([1.0, 2.0], [1.0, 4.0]) == 2.0
        assert objective(np.zeros(3), np.zeros(3)) == 0.0


class TestInverseRun:
    @pytest.mark.parametrize("kind", ["traction", "prescribed_displacement", "pressure"])
    def test_noise_free_recovery(self, kind):
        inv, true = cantilever_case(kind)
        inv.u_meas = inv.solve_forward(np.array([true])).U[inv.measured]
        res = inv.run()
        assert res.converged, res.message
        assert res.s[0] == pytest.approx(true, rel=1e-3)
        J = [h.J for h in res.history]
        assert all(b <= a * (1 + 1e-12) for a, b in zip(J, J[1:]))

    def test_two_loads_noise_free(self):
        """Tip traction and pressure on one strip: strongly correlated, recovered together.

        Plain MMA crawls along the valley of J; the whitened frame does not.
        """
        strip = make_flat_strip(4.0, 1.0, 2, 8, 2)
        model = asm.ShellModel(strip, ProjectedNeoHookean(1.0e4, 0.3, 0.1))
        clamp = tuple(strip.edge_nodes("xi0", 0)) + tuple(strip.edge_nodes("xi0", 1))
        loads = asm.LoadSet([asm.Support(clamp, name="clamp"),
                             asm.EdgeTraction("xi1", (0, 0, 1), 0.1, name="t"),
                             asm.Pressure(0.05, "q")])
        fw = ForwardModel(asm.ShellProblem(model, loads), TIGHT)
        u = fw.solve(loads).U[fw.problem.dofmap.free_disp]
        design = [DesignEntry("t", 0.0, 0.2, true=0.1), DesignEntry("q", 0.0, 0.1, true=0.05)]
        runs = {}
        for pc in (True, False):
            st_ = InverseSettings(max_iter=80, tol=1e-12, step_tol=1e-7, precondition=pc)
            runs[pc] = InverseProblem(fw, design, u, settings=st_).run(s0=np.array([0.15, 0.02]))
        assert runs[True].converged, runs[True].message
        np.testing.assert_allclose(runs[True].s, [0.1, 0.05], rtol=1e-4)
        assert runs[True].history[-1].J < 1e-6 * runs[False].history[-1].J

    def test_stationarity_at_recovered_design(self):
        inv, true = cantilever_case("traction")
        res = inv.run()
        fr = inv.solve_forward(res.s)
        g = inv.gradient(res.s, fr)[0]
        g0 = inv.gradient(np.array([0.5 * true]), inv.solve_forward(np.array([0.5 * true])))[0]
        assert abs(g[0]) <= 1e-2 * abs(g0[0])

    def test_history_csv(self, tmp_path):
        inv, _ = cantilever_case("traction")
        res = inv.run()
        res.write_csv(tmp_path / "h.csv", inv.names)
        rows = list(csv.DictReader(open(tmp_path / "h.csv")))
        assert len(rows) == len(res.history)
        assert set(rows[0]) >= {"iteration", "J", "s", "error_X", "error_Y"}

    def test_state_constraint_gradient(self):
        inv, true = cantilever_case("pressure")
        dm = inv.problem.dofmap
        dofs = dm.free_disp[dm.free_disp % 3 == 2]
        inv.state_constraint = StateConstraint(dofs, 0.0, 0.1)
        s = np.array([0.6 * true])
        fr = inv.solve_forward(s)
        lu, F = inv.gradient(s, fr)[1]
        act = np.array([len(dofs) - 1])
        dg = inv.constraint_gradients(fr, lu, F, act)
        h = 1e-6
        gp = inv.state_constraint.values(inv.solve_forward(s + h, fr.U).U)[act]
        gm = inv.state_constraint.values(inv.solve_forward(s - h, fr.U).U)[act]
        np.testing.assert_allclose(dg[:, 0], (gp - gm) / (2 * h), rtol=1e-5)


class TestValidation:
    def test_design_bounds(self):
        with pytest.raises(ValueError):
            DesignEntry("a", 1.0, 1.0)

    def test_unknown_record(self):
        inv, _ = cantilever_case("traction")
        with pytest.raises(ValueError, match="unknown load record"):
            InverseProblem(inv.forward, [DesignEntry("nope", 0, 1)], inv.u_meas)

    def test_measured_dofs_must_be_free(self):
        inv, _ = cantilever_case("traction")
        fixed = inv.problem.dofmap.fixed[:3]
        with pytest.raises(ValueError):
            InverseProblem(inv.forward, inv.design, np.zeros(3), measured=fixed)

    def test_settings(self):
        with pytest.raises(ValueError):
            InverseSettings(sensitivity="exact")
        with pytest.raises(ValueError):
            InverseSettings(semi_scheme="backward")
        with pytest.raises(ValueError):
            InverseSettings(frame_cond=0.5)

    def test_semi_step(self):
        assert semi_step(np.array([2.0, 0.0]), 0) == pytest.approx(2e-3)
        assert semi_step(np.array([2.0, 0.0]), 1) == pytest.approx(2e-3)
        assert semi_step(np.array([0.0]), 0) == pytest.approx(1e-3)
        assert semi_step(np.array([0.0, -4.0]), 0, rel=1e-5) == pytest.approx(4e-5)
        with pytest.raises(ValueError):
            InverseSettings(semi_step=0.0)
