"""Segregated fixed-point timeslab driver.

Each slab of thickness dt is a 3D timespace problem: iterate pressure solve,
saturation solve, and metric-driven mesh adaptation a fixed number of times,
then advance by mirroring the mesh about the end-time plane and carrying the
end-time saturation over as the next slab's inflow data.
"""

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adapt import AdaptConstraints, adapt
from .fem import (
    FlowParams,
    assemble_pressure,
    assemble_saturation,
    compute_velocity,
    inflow_dirichlet,
    solve_direct,
)
from .fields import NodalMetricField, NodalScalarField
from .mesh import (
    T_BEGIN,
    T_END,
    build_slab_mesh,
    contour_polylines,
    extract_isosurface,
    extract_time_face,
    locate_and_interpolate,
    mirror_in_time,
    signed_volumes,
    validate_mesh,
)
from .metric import (
    MassProjector,
    intersect_metrics,
    metric_from_hessian,
    recover_hessian,
)

SQRT2 = math.sqrt(2.0)

R_INNER = 0.1
R_OUTER = 1.0
R_FRONT_1 = 0.2
R_FRONT_2 = 0.3

PROFILES = ("ramp", "step", "cosine")
P_INIT_CHOICES = ("ramp", "complement")


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    """All simulation parameters; geometry and nondimensionalization fixed."""

    sigma: float
    dt: float = 0.1
    xi: float = 2.0
    q: int = 2
    t_final: float = 1.0
    v_char: float = 1.0
    h0: float = 0.05
    iters_per_slab: int = 20
    h_min: float = 1e-3
    h_max: float = 2.0
    l_low: float = 1.0 / SQRT2
    l_high: float = SQRT2
    max_sweeps: int = 5
    profile: str = "ramp"
    p_init: str = "ramp"
    write_snapshots: bool = True
    snapshot_stride: int = 1
    write_surfaces: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.sigma is None or not self.sigma > 0:
            raise ConfigError("sigma must be a positive number")
        if not 0 < self.dt <= self.t_final:
            raise ConfigError("dt must satisfy 0 < dt <= t_final")
        ratio = self.t_final / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("dt must divide t_final into an integer slab count")
        if self.iters_per_slab < 2:
            raise ConfigError("iters_per_slab must be at least 2")
        if not 0 < self.h_min < self.h_max:
            raise ConfigError("h_min and h_max must satisfy 0 < h_min < h_max")
        if not 0 < self.l_low < self.l_high:
            raise ConfigError("l_low and l_high must satisfy 0 < l_low < l_high")
        if self.h0 <= 0:
            raise ConfigError("h0 must be positive")
        if self.max_sweeps < 1:
            raise ConfigError("max_sweeps must be at least 1")
        if self.snapshot_stride < 1:
            raise ConfigError("snapshot_stride must be at least 1")
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}")
        if self.p_init not in P_INIT_CHOICES:
            raise ConfigError(f"p_init must be one of {P_INIT_CHOICES}")

    @property
    def n_slabs(self):
        return int(round(self.t_final / self.dt))


def initial_saturation(nodes, profile="ramp"):
    """Initial front: 1 inside r=0.2, 0 outside r=0.3, configured in between."""
    r = np.hypot(nodes[:, 0], nodes[:, 1])
    s = np.clip((R_FRONT_2 - r) / (R_FRONT_2 - R_FRONT_1), 0.0, 1.0)
    if profile == "ramp":
        return s
    if profile == "step":
        return (r <= R_FRONT_1).astype(float)
    if profile == "cosine":
        return 0.5 - 0.5 * np.cos(np.pi * s)
    raise ConfigError(f"unknown profile {profile!r}")


def initial_pressure(nodes, kind="ramp"):
    """Radial ramp used as the pressure solver's initial guess."""
    r = np.hypot(nodes[:, 0], nodes[:, 1])
    ramp = (r - R_INNER) / (R_OUTER - R_INNER)
    if kind == "ramp":
        return ramp
    if kind == "complement":
        return 1.0 - ramp
    raise ConfigError(f"unknown p_init {kind!r}")


@dataclass
class SlabState:
    mesh: object
    p: np.ndarray
    phi: np.ndarray
    inflow: np.ndarray  # nodal values, meaningful on T_BEGIN nodes
    slab_index: int
    t_start: float
    metric: np.ndarray = None  # tensors from the latest adaptation, or None


@dataclass
class ResidualRecord:
    slab: int
    iteration: int
    l2: float
    sqrt_l2: float
    nodes: int
    tets: int
    seconds: float


@dataclass
class ResidualTrace:
    records: list = field(default_factory=list)

    HEADER = ("slab", "iter", "L2", "sqrt_L2", "nodes", "tets", "seconds")

    def append(self, rec):
        self.records.append(rec)

    def rows(self):
        return [
            (r.slab, r.iteration, r.l2, r.sqrt_l2, r.nodes, r.tets, r.seconds)
            for r in self.records
        ]

    def slab_iterations(self, slab):
        return [r for r in self.records if r.slab == slab]

    def tail_residual(self, slab=None, last=5):
        """Median of the last few sqrt residuals of a slab (default: last slab)."""
        if slab is None:
            slab = max(r.slab for r in self.records)
        tail = [r.sqrt_l2 for r in self.slab_iterations(slab)][-last:]
        return float(np.median(tail))


def init_state(config: SimConfig) -> SlabState:
    mesh = build_slab_mesh(config.h0, 0.0, config.dt, seed=config.seed)
    phi = np.zeros(mesh.n_nodes)
    p = initial_pressure(mesh.nodes, config.p_init)
    inflow = initial_saturation(mesh.nodes, config.profile)
    return SlabState(mesh=mesh, p=p, phi=phi, inflow=inflow, slab_index=1, t_start=0.0)


def l2_residual(phi_now, phi_prev, mesh):
    """Volume-normalized exact L2 norm squared of the P1 difference field."""
    d = np.asarray(phi_now) - np.asarray(phi_prev)
    vols = signed_volumes(mesh.nodes, mesh.tets)
    dt = d[mesh.tets]
    s = dt.sum(axis=1)
    # exact P1 mass quadrature: int (sum_i d_i phi_i)^2 = V/20 ((sum d)^2 + sum d^2)
    per_tet = vols / 20.0 * (s**2 + (dt**2).sum(axis=1))
    return float(per_tet.sum() / vols.sum())


def build_metric(mesh, p, phi, config, projector=None):
    """Intersected optimal-interpolation metric of pressure and saturation."""
    proj = projector or MassProjector(mesh)
    Hp = recover_hessian(NodalScalarField(mesh, p), proj)
    Hf = recover_hessian(NodalScalarField(mesh, phi), proj)
    Mp = metric_from_hessian(
        Hp, config.sigma, q=config.q, h_min=config.h_min, h_max=config.h_max
    )
    Mf = metric_from_hessian(
        Hf, config.sigma, q=config.q, h_min=config.h_min, h_max=config.h_max
    )
    return intersect_metrics(Mp, Mf)


class SimulationError(Exception):
    pass


def slab_iteration(state: SlabState, config: SimConfig, iteration: int):
    """One fixed-point iteration: pressure, saturation, then adaptation.

    Returns (updated state, ResidualRecord).  Adaptation is skipped on the
    first iteration of every slab.
    """
    t0 = time.perf_counter()
    params = FlowParams(xi=config.xi)
    mesh = state.mesh
    prev_mesh, prev_phi = mesh, state.phi

    psys = assemble_pressure(mesh, NodalScalarField(mesh, state.phi), params)
    p = solve_direct(psys)

    vel = compute_velocity(
        mesh, NodalScalarField(mesh, p), NodalScalarField(mesh, state.phi), params
    )
    ssys = assemble_saturation(mesh, vel, inflow_dirichlet(mesh, state.inflow))
    phi = solve_direct(ssys)

    inflow = state.inflow
    metric = state.metric
    if iteration >= 2:
        M = build_metric(mesh, p, phi, config)
        frozen = T_BEGIN if state.slab_index > 1 else None
        new_mesh, new_metric, _ = adapt(
            mesh,
            NodalMetricField(mesh, M, check=False),
            AdaptConstraints(frozen_face=frozen),
            max_sweeps=config.max_sweeps,
            l_low=config.l_low,
            l_high=config.l_high,
        )
        defects = validate_mesh(new_mesh)
        if not defects.clean:
            raise SimulationError(
                f"slab {state.slab_index} iteration {iteration}: "
                f"adaptation produced an invalid mesh ({defects})"
            )
        p, phi, inflow = locate_and_interpolate(
            mesh, [p, phi, inflow], new_mesh.nodes
        )
        if state.slab_index == 1:
            # first slab: the inflow face may move, re-evaluate analytically
            inflow = initial_saturation(new_mesh.nodes, config.profile)
        mesh = new_mesh
        metric = new_metric.tensors

    if mesh is prev_mesh:
        prev_on_current = prev_phi
    else:
        prev_on_current = locate_and_interpolate(prev_mesh, prev_phi, mesh.nodes)
    l2 = l2_residual(phi, prev_on_current, mesh)

    new_state = replace(
        state, mesh=mesh, p=p, phi=phi, inflow=inflow, metric=metric
    )
    rec = ResidualRecord(
        slab=state.slab_index,
        iteration=iteration,
        l2=l2,
        sqrt_l2=math.sqrt(l2),
        nodes=mesh.n_nodes,
        tets=mesh.n_tets,
        seconds=time.perf_counter() - t0,
    )
    return new_state, rec


def advance_slab(state: SlabState, config: SimConfig) -> SlabState:
    """Mirror the mesh forward in time and carry the saturation as inflow."""
    t_end = state.t_start + config.dt
    mesh = mirror_in_time(state.mesh, state.mesh.time_face_value(T_END))
    mesh.frozen[:] = False
    for i in mesh.time_face_nodes(T_BEGIN):
        mesh.frozen[i] = True
    # mirroring keeps node indices, so the old T_END values transfer directly
    inflow = state.phi.copy()
    phi = np.zeros(mesh.n_nodes)
    p = initial_pressure(mesh.nodes, config.p_init)
    return SlabState(
        mesh=mesh,
        p=p,
        phi=phi,
        inflow=inflow,
        slab_index=state.slab_index + 1,
        t_start=t_end,
        metric=None,
    )


def run_simulation(config: SimConfig, outdir=None, log=None):
    """Run all slabs; returns (ResidualTrace, final SlabState).

    When outdir is given, writes the residual CSV, per-iteration VTK
    snapshots, the phi=0.5 isosurface per slab, the final-time slice, and
    the phi=0.5 contour on the t=0.5 face when a slab boundary lands there.
    """
    from pathlib import Path

    from .vtk_io import write_vtk, write_vtk_polydata

    out = Path(outdir) if outdir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    trace = ResidualTrace()
    state = init_state(config)
    csv_file = open(out / "residuals.csv", "w", newline="") if out else None
    writer = None
    if csv_file:
        writer = csv.writer(csv_file)
        writer.writerow(ResidualTrace.HEADER)

    try:
        for k in range(1, config.n_slabs + 1):
            for j in range(1, config.iters_per_slab + 1):
                try:
                    state, rec = slab_iteration(state, config, j)
                except Exception as exc:
                    raise SimulationError(
                        f"slab {k} iteration {j} failed: {exc}"
                    ) from exc
                trace.append(rec)
                if writer:
                    writer.writerow(
                        (
                            rec.slab,
                            rec.iteration,
                            repr(rec.l2),
                            repr(rec.sqrt_l2),
                            rec.nodes,
                            rec.tets,
                            f"{rec.seconds:.3f}",
                        )
                    )
                    csv_file.flush()
                if log:
                    log(rec)
                if (
                    out is not None
                    and config.write_snapshots
                    and j % config.snapshot_stride == 0
                ):
                    write_vtk(
                        state.mesh,
                        {"p": state.p, "phi": state.phi},
                        out / f"slab{k}_iter{j}.vtk",
                        metric=state.metric,
                    )
            if out is not None and config.write_surfaces:
                verts, tris = extract_isosurface(state.mesh, state.phi, 0.5)
                write_vtk_polydata(verts, tris, out / f"iso_phi05_slab{k}.vtk")
            t_end = state.t_start + config.dt
            if out is not None and abs(t_end - 0.5) < 1e-9:
                _write_contour_csv(state, out / "contour_t05.csv")
            if k < config.n_slabs:
                state = advance_slab(state, config)
    finally:
        if csv_file:
            csv_file.close()

    if out is not None and config.write_surfaces:
        _write_final_slice(state, out / "final_slice.vtk")
    return trace, state


def _write_contour_csv(state, path):
    sl = extract_time_face(state.mesh, {"phi": state.phi}, T_END)
    lines = contour_polylines(sl, sl.fields["phi"], 0.5)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("polyline", "x", "y"))
        for i, line in enumerate(lines):
            for x, y in line:
                w.writerow((i, repr(float(x)), repr(float(y))))


def _write_final_slice(state, path):
    from .vtk_io import write_vtk_polydata

    sl = extract_time_face(state.mesh, {"phi": state.phi, "p": state.p}, T_END)
    t_end = state.mesh.time_face_value(T_END)
    verts = np.column_stack([sl.points, np.full(len(sl.points), t_end)])
    write_vtk_polydata(
        verts, [tuple(t) for t in sl.triangles], path, point_fields=sl.fields
    )
