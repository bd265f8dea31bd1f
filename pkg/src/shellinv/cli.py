"""Command-line front end.

    shellinv forward|inverse|verify-gradients|convergence --spec <file|name> --out <dir>
             [--seed N] [--threads N] [--sensitivity analytic|semi]

``--spec`` takes a YAML/JSON file or a built-in benchmark name.  The log
level comes from ``SHELLINV_LOG`` (default ``WARNING``).  Every output is a
CSV with a header row, plus a ``summary.json`` per command.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("shellinv.cli")


def _parser():
    p = argparse.ArgumentParser(prog="shellinv", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("forward", "solve the forward problem and write the equilibrium path"),
                        ("inverse", "identify the design loads from measured displacements"),
                        ("verify-gradients", "compare adjoint, semi-analytic and total-FD gradients"),
                        ("convergence", "energy-norm error over a mesh refinement series")]:
        c = sub.add_parser(name, help=help_)
        c.add_argument("--spec", required=True, help="spec file or built-in benchmark name")
        c.add_argument("--out", required=True, type=Path, help="output directory")
        c.add_argument("--seed", type=int, default=None, help="noise seed (overrides the spec file)")
        c.add_argument("--threads", type=int, default=None, help="BLAS thread count")
        c.add_argument("--sensitivity", choices=["analytic", "semi"], default=None)
    return p


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return f"{v:.12g}"


def write_displacements(path, scenario, U):
    """Control-point table: reference position and displacement."""
    m = scenario.problem.model
    X = m.X
    u = U[: m.n_disp].reshape(-1, 3)
    _write_csv(path, ["node", "X", "Y", "Z", "ux", "uy", "uz"],
               [[a, *map(_fmt, X[a]), *map(_fmt, u[a])] for a in range(m.n_nodes)])


def _summary(out, data):
    (out / "summary.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def cmd_forward(args, spec, scenario):
    fr = scenario.forward.solve(scenario.problem.loads)
    samples = fr.path.samples if fr.path is not None else []
    names = [mon.name for mon in spec.monitors]
    rows = []
    for smp in samples:
        mv = scenario.monitor_values(smp.U, smp.reactions)
        rows.append([smp.step, _fmt(smp.load_factor), *[_fmt(mv[n]) for n in names]])
    mv = scenario.monitor_values(fr.U, fr.system.reactions)
    rows.append(["final", _fmt(1.0), *[_fmt(mv[n]) for n in names]])
    _write_csv(args.out / "path.csv", ["step", "load_factor", *names], rows)
    write_displacements(args.out / "displacements.csv", scenario, fr.U)
    scenario.patch.dump(args.out / "mesh.json")
    energy = scenario.problem.strain_energy(fr.U)
    _write_csv(args.out / "energy.csv", ["strain_energy"], [[_fmt(energy)]])
    _summary(args.out, {"command": "forward", "spec": spec.name, "strain_energy": energy,
                        "monitors": mv, "path_samples": len(samples)})
    return 0


def cmd_inverse(args, spec, scenario):
    u_meas = scenario.measurement(seed=args.seed)
    if spec.inverse.measurement is None:
        write_displacements(args.out / "measurement.csv", scenario, u_meas)
    inv = scenario.inverse_problem(u_meas, args.sensitivity)
    res = inv.run()
    res.write_csv(args.out / "history.csv", inv.names)
    rows = []
    for d, v in zip(inv.design, res.s):
        rel = abs(v - d.true) / abs(d.true) if d.true else float("nan")
        rows.append([d.record, d.kind, _fmt(v), _fmt(d.true) if d.true is not None else "",
                     _fmt(d.lower), _fmt(d.upper), _fmt(rel)])
    _write_csv(args.out / "design.csv",
               ["record", "kind", "recovered", "target", "lower", "upper", "rel_error"], rows)
    write_displacements(args.out / "displacements.csv", scenario, res.U)
    last = res.history[-1]
    _summary(args.out, {"command": "inverse", "spec": spec.name, "converged": res.converged,
                        "message": res.message, "iterations": last.iteration, "J": last.J,
                        "design": dict(zip(inv.names, map(float, res.s))),
                        "field_residual": last.error_y,
                        "sensitivity": inv.settings.sensitivity})
    return 0 if res.converged else 3


def cmd_verify_gradients(args, spec, scenario):
    import numpy as np

    from .inverse import total_fd_gradient

    inv = scenario.inverse_problem(scenario.measurement(seed=args.seed))
    s = np.array([d.initial if d.initial is not None else
                  (0.5 * d.true if d.true else 0.5 * (d.lower + d.upper)) for d in inv.design])
    fr = inv.solve_forward(s)
    ga = inv.gradient(s, fr, "analytic")[0]
    gs = inv.gradient(s, fr, "semi")[0]
    gf = total_fd_gradient(inv, s, fr)
    rows, worst = [], {"analytic": 0.0, "semi": 0.0}
    scale = max(float(np.linalg.norm(gf)), 1e-300)
    for i, d in enumerate(inv.design):
        ea, es = abs(ga[i] - gf[i]) / scale, abs(gs[i] - gf[i]) / scale
        worst["analytic"] = max(worst["analytic"], ea)
        worst["semi"] = max(worst["semi"], es)
        rows.append([d.record, d.kind, _fmt(s[i]), _fmt(ga[i]), _fmt(gs[i]), _fmt(gf[i]),
                     _fmt(ea), _fmt(es)])
    _write_csv(args.out / "gradients.csv",
               ["record", "kind", "design", "analytic", "semi", "total_fd", "rel_err_analytic",
                "rel_err_semi"], rows)
    _summary(args.out, {"command": "verify-gradients", "spec": spec.name,
                        "max_rel_err": worst, "design": s.tolist()})
    return 0


def cmd_convergence(args, spec, scenario):
    from . import config
    from .solver import energy_norm_error

    if spec.convergence is None:
        raise config.SpecError("spec has no convergence block")

    def energy(nel):
        sc = config.build(spec, nel)
        fr = sc.forward.solve(sc.problem.loads)
        return sc.problem.strain_energy(fr.U)

    ref = tuple(spec.convergence.reference)
    E_ref = energy(ref)
    rows = []
    for nel in map(tuple, spec.convergence.series):
        E = E_ref if nel == ref else energy(nel)
        rows.append([nel[0], nel[1], nel[0] * nel[1], _fmt(E), _fmt(energy_norm_error(E, E_ref))])
    _write_csv(args.out / "convergence.csv", ["nel_x", "nel_y", "n_elements", "strain_energy", "e_E"], rows)
    _summary(args.out, {"command": "convergence", "spec": spec.name, "reference": list(ref),
                        "reference_energy": E_ref})
    return 0


COMMANDS = {"forward": cmd_forward, "inverse": cmd_inverse,
            "verify-gradients": cmd_verify_gradients, "convergence": cmd_convergence}


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be at least 1", file=sys.stderr)
            return 2
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
    level = os.environ.get("SHELLINV_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")

    from . import config
    from .inverse import ForwardFailure
    from .solver import ConvergenceError, SingularTangentError

    try:
        spec = config.load_spec(args.spec)
        if args.command != "forward" and args.command != "convergence" and spec.inverse is None:
            raise config.SpecError(f"spec {spec.name!r} has no inverse block")
        scenario = config.build(spec)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, spec, scenario)
    except config.SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ForwardFailure, ConvergenceError, SingularTangentError) as exc:
        print(f"error: solver failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
