"""Problem spec schema and builders.

A problem spec is a YAML (or JSON) document; see ``docs/spec_format.md``.
Every block is validated before any computation and unknown keys are
rejected.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import assembly as asm
from .constitutive import Koiter, ProjectedNeoHookean
from .inverse import (DesignEntry, ForwardModel, InverseProblem, InverseSettings, StateConstraint,
                      make_measurement)
from .nurbs import make_cylindrical_panel, make_flat_strip
from .solver import SolveSettings

COMPONENTS = {"x": 0, "y": 1, "z": 2}
Edge = Literal["xi0", "xi1", "eta0", "eta1"]
Component = Literal["x", "y", "z"]


class SpecError(ValueError):
    pass


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Geometry(Strict):
    builder: Literal["flat_strip", "cylindrical_panel"]
    length: float = Field(gt=0)
    width: float | None = Field(default=None, gt=0)
    radius: float | None = Field(default=None, gt=0)
    arc_length: float | None = Field(default=None, gt=0)
    quarter: bool = True
    normal: Literal["+z", "-z"] = "+z"
    degree: int = Field(default=2, ge=1, le=5)
    nel_x: int = Field(ge=1)
    nel_y: int = Field(ge=1)

    @model_validator(mode="after")
    def _needs(self):
        if self.builder == "flat_strip" and self.width is None:
            raise ValueError("flat_strip needs 'width'")
        if self.builder == "cylindrical_panel" and (self.radius is None or self.arc_length is None):
            raise ValueError("cylindrical_panel needs 'radius' and 'arc_length'")
        return self


class Material(Strict):
    model: Literal["koiter", "projected"]
    E: float = Field(gt=0)
    nu: float = Field(gt=-1.0, lt=0.5)
    thickness: float = Field(gt=0)
    n_layers: int = Field(default=4, ge=2)


class NodeSelector(Strict):
    edge: Edge | None = None
    layers: int = Field(default=1, ge=1)
    corner: tuple[Edge, Edge] | None = None
    node: int | None = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _one(self):
        if sum(v is not None for v in (self.edge, self.corner, self.node)) != 1:
            raise ValueError("give exactly one of 'edge', 'corner' or 'node'")
        return self

    def nodes(self, patch):
        if self.node is not None:
            return (self.node,)
        if self.corner is not None:
            return (patch.corner_node(self.corner),)
        return tuple(int(a) for k in range(self.layers) for a in patch.edge_nodes(self.edge, k))


class Support(NodeSelector):
    type: Literal["support"]
    name: str = "support"
    components: list[Component] = ["x", "y", "z"]


class Prescribed(NodeSelector):
    type: Literal["prescribed"]
    name: str
    component: Component
    value: float
    stage: int = 0


class Traction(Strict):
    type: Literal["traction"]
    name: str
    edge: Edge
    direction: tuple[float, float, float]
    value: float
    per_reference_length: bool = True
    stage: int = 0


class PointForce(Strict):
    type: Literal["point_load"]
    name: str
    direction: tuple[float, float, float]
    value: float
    corner: tuple[Edge, Edge] | None = None
    node: int | None = None
    point: tuple[float, float] | None = None
    scale: float = 1.0
    stage: int = 0

    @model_validator(mode="after")
    def _one(self):
        if sum(v is not None for v in (self.corner, self.node, self.point)) != 1:
            raise ValueError("give exactly one of 'corner', 'node' or 'point'")
        return self


class Moment(Strict):
    type: Literal["moment"]
    name: str
    edges: list[Edge]
    value: float
    per_reference_length: bool = False
    stage: int = 0


class PressureLoad(Strict):
    type: Literal["pressure"]
    name: str
    value: float
    stage: int = 0


class BodyLoad(Strict):
    type: Literal["body_force"]
    name: str
    direction: tuple[float, float, float]
    value: float
    stage: int = 0


class Symmetry(Strict):
    type: Literal["symmetry"]
    name: str = "symmetry"
    edge: Edge
    plane_normal: tuple[float, float, float]
    scale: float | None = None


class Solver(Strict):
    method: Literal["newton", "arc"] = "newton"
    n_steps: int = Field(default=1, ge=1)
    tol: float = Field(default=1e-8, gt=0)
    max_iter: int = Field(default=30, ge=1)
    arc_radius: float = Field(default=1.0, gt=0)
    arc_min: float = Field(default=1e-4, gt=0)
    arc_max: float = Field(default=1e3, gt=0)
    arc_max_steps: int = Field(default=200, ge=1)
    predictor_sign: Literal[-1, 1] = 1
    warm_start: bool = True

    def settings(self):
        return SolveSettings(tol=self.tol, max_iter=self.max_iter, n_steps=self.n_steps,
                             arc_radius=self.arc_radius, arc_min=self.arc_min, arc_max=self.arc_max,
                             arc_max_steps=self.arc_max_steps, predictor_sign=self.predictor_sign)


class Monitor(NodeSelector):
    name: str
    kind: Literal["displacement", "reaction"] = "displacement"
    component: Component
    reduce: Literal["mean", "sum", "max", "min"] = "mean"
    factor: float = 1.0


class DesignSpec(Strict):
    record: str
    lower: float
    upper: float
    initial: float | None = None
    target: float | None = None


class Synthesize(Strict):
    seed: int = 0
    amplitude: float = Field(default=1.0, ge=0)
    mode: Literal["stochastic", "systematic"] = "stochastic"
    gamma: float = 0.0


class StateBound(Strict):
    component: Component
    lower: float = 0.0
    cap: int = Field(default=20, ge=1)


class Inverse(Strict):
    design: list[DesignSpec] = Field(min_length=1)
    synthesize: Synthesize | None = None
    measurement: str | None = None
    sensitivity: Literal["analytic", "semi"] = "analytic"
    semi_scheme: Literal["forward", "central"] = "central"
    semi_step: float = Field(default=1e-5, gt=0, lt=1)
    precondition: bool = True
    max_iter: int = Field(default=30, ge=1)
    min_iter: int = Field(default=2, ge=1)
    tol: float = Field(default=1e-3, gt=0)
    step_tol: float = Field(default=2e-4, gt=0)
    move: float = Field(default=0.5, gt=0, le=1)
    state_constraint: StateBound | None = None

    @model_validator(mode="after")
    def _data(self):
        if (self.synthesize is None) == (self.measurement is None):
            raise ValueError("inverse block needs exactly one of 'synthesize' or 'measurement'")
        return self


class Convergence(Strict):
    series: list[tuple[int, int]] = Field(min_length=1)
    reference: tuple[int, int]


BoundaryItem = Support | Prescribed
LoadItem = Traction | PointForce | Moment | PressureLoad | BodyLoad


class ProblemSpec(Strict):
    name: str
    description: str = ""
    geometry: Geometry
    material: Material
    boundary: list[BoundaryItem] = Field(default_factory=list)
    loads: list[LoadItem] = Field(default_factory=list)
    constraints: list[Symmetry] = Field(default_factory=list)
    solver: Solver = Field(default_factory=Solver)
    monitors: list[Monitor] = Field(default_factory=list)
    inverse: Inverse | None = None
    convergence: Convergence | None = None


# -- loading ------------------------------------------------------------------


def builtin_names():
    return sorted(p.name[:-5] for p in resources.files("shellinv.specs").iterdir()
                  if p.name.endswith(".yaml"))


def load_spec(source) -> ProblemSpec:
    """Parse a spec from a path, a built-in benchmark name, or a mapping."""
    if isinstance(source, dict):
        data = source
    else:
        path = Path(source)
        if not path.exists() and str(source) in builtin_names():
            text = resources.files("shellinv.specs").joinpath(f"{source}.yaml").read_text()
        elif path.exists():
            text = path.read_text()
        else:
            raise SpecError(f"spec {source!r} is neither a file nor a built-in benchmark "
                            f"({', '.join(builtin_names())})")
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise SpecError(f"spec is not valid YAML: {exc}") from exc
    try:
        return ProblemSpec.model_validate(data)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"])
            lines.append(f"  {loc}: {err['msg']}")
        raise SpecError("invalid spec:\n" + "\n".join(lines)) from exc


# -- building -----------------------------------------------------------------


def build_patch(g: Geometry, nel=None):
    nx, ny = nel or (g.nel_x, g.nel_y)
    if g.builder == "flat_strip":
        return make_flat_strip(g.length, g.width, g.degree, nx, ny, normal_down=g.normal == "-z")
    return make_cylindrical_panel(g.radius, g.length, g.arc_length, g.degree, nx, ny, quarter=g.quarter)


def build_material(m: Material):
    if m.model == "koiter":
        return Koiter(m.E, m.nu, m.thickness)
    return ProjectedNeoHookean(m.E, m.nu, m.thickness, m.n_layers)


def _records(spec: ProblemSpec, patch):
    recs = []
    for b in spec.boundary:
        nodes = b.nodes(patch)
        if b.type == "support":
            recs.append(asm.Support(nodes, tuple(COMPONENTS[c] for c in b.components), b.name))
        else:
            recs.append(asm.PrescribedDisplacement(nodes, COMPONENTS[b.component], b.value, b.name, b.stage))
    for ld in spec.loads:
        if ld.type == "traction":
            recs.append(asm.EdgeTraction(ld.edge, ld.direction, ld.value, ld.per_reference_length,
                                         ld.name, ld.stage))
        elif ld.type == "point_load":
            node = patch.corner_node(ld.corner) if ld.corner is not None else ld.node
            recs.append(asm.PointLoad(ld.direction, ld.value, node, ld.point, ld.scale, ld.name, ld.stage))
        elif ld.type == "moment":
            recs.append(asm.EdgeMoment(tuple(ld.edges), ld.value, ld.per_reference_length, ld.name, ld.stage))
        elif ld.type == "pressure":
            recs.append(asm.Pressure(ld.value, ld.name, ld.stage))
        else:
            recs.append(asm.BodyForce(ld.direction, ld.value, ld.name, ld.stage))
    return recs


@dataclass
class Scenario:
    spec: ProblemSpec
    problem: asm.ShellProblem
    forward: ForwardModel

    @property
    def patch(self):
        return self.problem.model.patch

    def monitor_values(self, U, reactions=None):
        """Monitored quantities for a state (reactions restricted to fixed dofs)."""
        out = {}
        dm = self.problem.dofmap
        for mon in self.spec.monitors:
            dofs = np.array([3 * a + COMPONENTS[mon.component] for a in mon.nodes(self.patch)])
            if mon.kind == "displacement":
                vals = U[dofs]
            else:
                full = np.zeros(dm.n_total)
                if reactions is not None:
                    full[dm.fixed] = reactions
                vals = full[dofs]
            red = {"mean": np.mean, "sum": np.sum, "max": np.max, "min": np.min}[mon.reduce](vals)
            out[mon.name] = float(mon.factor * red)
        return out

    def inverse_problem(self, u_meas, sensitivity=None) -> InverseProblem:
        inv = self.spec.inverse
        if inv is None:
            raise SpecError("spec has no inverse block")
        design = [DesignEntry(d.record, d.lower, d.upper, d.initial, d.target) for d in inv.design]
        sc = None
        if inv.state_constraint is not None:
            dm = self.problem.dofmap
            comp = COMPONENTS[inv.state_constraint.component]
            dofs = dm.free_disp[dm.free_disp % 3 == comp]
            scale = max(float(np.max(np.abs(u_meas[dofs]))), 1e-12)
            sc = StateConstraint(dofs, inv.state_constraint.lower, scale, inv.state_constraint.cap)
        settings = InverseSettings(max_iter=inv.max_iter, min_iter=inv.min_iter, tol=inv.tol,
                                   step_tol=inv.step_tol,
                                   sensitivity=sensitivity or inv.sensitivity,
                                   semi_scheme=inv.semi_scheme, semi_step=inv.semi_step, move=inv.move,
                                   precondition=inv.precondition)
        return InverseProblem(self.forward, design, u_meas, None, sc, settings)

    def measurement(self, seed=None, base=None):
        """Measured displacement vector (full length).

        Synthesized from a forward solve at the target design plus noise, or
        read from the displacement CSV named in the inverse block.  ``base``
        gives that forward state directly.
        """
        inv = self.spec.inverse
        if inv is None:
            raise SpecError("spec has no inverse block")
        n = self.problem.dofmap.n_total
        if inv.measurement is not None:
            return read_displacements(inv.measurement, self.problem.model.n_nodes, n)
        if base is None:
            base = self.forward.solve(self.true_loads()).U
        syn = inv.synthesize
        return make_measurement(base, syn.seed if seed is None else seed, syn.amplitude, syn.mode, syn.gamma)

    def true_loads(self):
        """Load set with design records at their ``true`` values (for synthesis)."""
        vals = {d.record: d.target for d in (self.spec.inverse.design if self.spec.inverse else [])
                if d.target is not None}
        return self.problem.loads.with_values(**vals)


def read_displacements(path, n_nodes, n_total=None):
    """Control-point displacements from a CSV with ``node, ux, uy, uz`` columns."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise SpecError(f"cannot read measurement file {path!r}: {exc.strerror}") from exc
    u = np.zeros(n_total or 3 * n_nodes)
    seen = set()
    for row in rows:
        try:
            a = int(row["node"])
            vals = [float(row[k]) for k in ("ux", "uy", "uz")]
        except (KeyError, ValueError) as exc:
            raise SpecError(f"measurement file {path!r}: need numeric node, ux, uy, uz columns") from exc
        if not 0 <= a < n_nodes:
            raise SpecError(f"measurement file {path!r}: node {a} out of range")
        u[3 * a: 3 * a + 3] = vals
        seen.add(a)
    if len(seen) != n_nodes:
        raise SpecError(f"measurement file {path!r}: expected {n_nodes} nodes, found {len(seen)}")
    return u


def build(spec: ProblemSpec, nel=None) -> Scenario:
    patch = build_patch(spec.geometry, nel)
    model = asm.ShellModel(patch, build_material(spec.material))
    loads = asm.LoadSet(_records(spec, patch))
    cons = [asm.SymmetryConstraint(model, c.edge, c.plane_normal, c.scale, c.name) for c in spec.constraints]
    problem = asm.ShellProblem(model, loads, cons, spec.name)
    forward = ForwardModel(problem, spec.solver.settings(), spec.solver.method, spec.solver.warm_start)
    return Scenario(spec, problem, forward)
