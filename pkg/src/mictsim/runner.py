"""Complete simulation orchestration: compose the clinical domain model,
step the protocol machine, drive the modality solver stack, and persist
results.

Modality dispatch:
  RFA  - Gaussian tine source scaled by the live power setpoint, implicit
         bioheat stepping, three-state cell death, lesion = {D >= theta}.
  MWA  - axisymmetric antenna solve (re-run when the near-probe
         temperature moved more than the re-solve threshold), revolved SAR
         scaled by the setpoint, bioheat + cell death as RFA.
  CRYO - freezing solver with the probe surface at coolant temperature
         while the coolant runs; lesion from the lethal-isotherm rule over
         freeze cycles.
  IRE  - per protocol step potential solve between the step's electrode
         pair, pointwise field-maximum accumulation, lesion as the
         threshold superlevel set; the potential solve also supplies the
         impedance signal.

Protocol signals: elapsed time, maximum temperature within 2 mm of any
probe surface, and the impedance proxy (from the potential solve for IRE,
from a scenario-supplied synthetic trace otherwise).
"""

from __future__ import annotations

import importlib.resources
import os
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

from . import cdm, celldeath, electro, scenario as scen, sources
from .bioheat import (BioheatSolver, MaterialFields, SolverError,
                      ThermalState, TissueProperties,
                      rasterize_probe_cylinder, step_cryo)
from .grid import GridSpec, LabelMask, Probe, ScalarField
from .results import RunWriter
from .surfaces import TriangleMesh
from .volio import read_volume


class RunnerError(RuntimeError):
    """Scenario could not be run (composition or configuration problem)."""


def default_library_path() -> str:
    return str(importlib.resources.files("mictsim") / "fixtures" / "library.xml")


@dataclass(frozen=True)
class RunRequest:
    scenario: object              # path or ScenarioDoc
    outdir: str
    snapshot_every: float | None = None
    deterministic: bool = True
    progress: object | None = None   # callable(fraction in [0, 1])

    def __post_init__(self):
        if self.snapshot_every is not None and self.snapshot_every <= 0:
            raise ValueError("snapshot cadence must be > 0")


@dataclass
class RunResult:
    outdir: str
    lesion_mask: LabelMask
    lesion_surface: TriangleMesh
    lesion_volume_ml: float
    final_fields: dict
    events: list
    simulated_s: float
    wall_clock_s: float
    diagnostics: dict


@dataclass
class _Setup:
    doc: scen.ScenarioDoc
    grid: GridSpec
    mask: LabelMask
    materials: MaterialFields
    composition: cdm.Composition
    probes: dict
    equipment: dict
    protocol_steps: tuple
    dt: float
    boundary: str
    boundary_T: float
    body_T: float
    impedance_trace: tuple | None


def _tissue_from_params(name: str, get) -> TissueProperties:
    """Build TissueProperties from a parameter lookup callable."""
    required = ("density", "heat_capacity", "thermal_conductivity")
    values = {}
    for p in required:
        v = get(p)
        if v is None:
            raise RunnerError(f"tissue {name!r} lacks parameter {p!r}")
        values[p] = float(v)
    kwargs = dict(rho=values["density"], c=values["heat_capacity"],
                  k=values["thermal_conductivity"])
    kwargs["perfusion"] = float(get("perfusion_coefficient") or 0.0)
    kwargs["sigma_e"] = float(get("electrical_conductivity") or 0.0)
    kwargs["latent_heat"] = float(get("latent_heat") or 0.0)
    sol = get("solidus_temperature")
    liq = get("liquidus_temperature")
    if sol is not None:
        kwargs["t_solidus"] = float(sol)
    if liq is not None:
        kwargs["t_liquidus"] = float(liq)
    cf = get("frozen_heat_capacity")
    kf = get("frozen_thermal_conductivity")
    rf = get("frozen_density")
    if cf is not None:
        kwargs["c_frozen"] = float(cf)
    if kf is not None:
        kwargs["k_frozen"] = float(kf)
    if rf is not None:
        kwargs["rho_frozen"] = float(rf)
    return TissueProperties(**kwargs)


def _prepare(doc: scen.ScenarioDoc, scenario_dir: str) -> _Setup:
    library_path = doc.library_path or default_library_path()
    if not os.path.isabs(library_path) and doc.library_path:
        library_path = os.path.join(scenario_dir, library_path)
    library = cdm.load_library(library_path)

    model = library.get(doc.model_id, "numerical-model")
    organ = library.get(doc.organ_id, "organ")
    equipment_ids = {p.equipment_id for p in doc.probes if p.equipment_id}
    if not equipment_ids:
        raise RunnerError("probes must reference equipment definitions")
    equipment = {eid: library.get(eid, "equipment") for eid in equipment_ids}
    primary_equipment = equipment[doc.probes[0].equipment_id]

    if doc.protocol_steps is not None:
        protocol_comp = cdm.ComponentDef(
            id="inline-protocol", kind="protocol", tags=(doc.modality,),
            steps=doc.protocol_steps)
    else:
        protocol_comp = library.get(doc.protocol_id, "protocol")

    overrides = {name: pv.value for name, pv in doc.overrides.items()}
    overrides.update({name: pv.value for name, pv in doc.numerics.items()})
    composition = cdm.compose(model, primary_equipment, organ, protocol_comp,
                              overrides, rules=library.rules)
    if composition.demands:
        raise RunnerError(
            "unresolved prompted parameters: " + ", ".join(composition.demands))

    # grid and regions
    grid = doc.grid
    if doc.mask_path:
        mask_path = doc.mask_path
        if not os.path.isabs(mask_path):
            mask_path = os.path.join(scenario_dir, mask_path)
        mgrid, labels = read_volume(mask_path)
        if mgrid.dims != grid.dims:
            raise RunnerError(
                f"mask dims {mgrid.dims} do not match scenario grid {grid.dims}")
        legend = {rb.id: rb.name for rb in doc.regions}
        present = set(int(v) for v in np.unique(labels)) - {0}
        unbound = present - set(legend)
        if unbound:
            raise RunnerError(f"mask labels {sorted(unbound)} have no region binding")
        mask = LabelMask(grid, labels, legend)
    else:
        labels = np.ones(grid.dims, dtype=np.uint8)
        name = doc.regions[0].name if doc.regions else "organ"
        mask = LabelMask(grid, labels, {1: name})

    # tissue table: organ parameters are the base for inheriting tissues
    def organ_get(pname):
        rp = composition.values.get(pname)
        return None if rp is None else rp.value

    tissues_by_label: dict[int, TissueProperties] = {}
    tace_ids = []
    bindings = {rb.id: rb for rb in doc.regions} or {
        1: scen.RegionBinding(1, "organ", "", False)}
    for label, rb in bindings.items():
        spec = doc.tissues.get(rb.tissue)

        def tissue_get(pname, _spec=spec):
            if _spec is not None and pname in _spec.params:
                return _spec.params[pname].value
            if _spec is None or _spec.inherit == "organ":
                return organ_get(pname)
            return None

        tissues_by_label[label] = _tissue_from_params(rb.tissue or "organ",
                                                      tissue_get)
        if rb.tace:
            tace_ids.append(label)
    # voxels outside every region (label 0) behave as organ parenchyma
    tissues_by_label.setdefault(0, _tissue_from_params("organ", organ_get))

    materials = MaterialFields.from_mask(mask, tissues_by_label,
                                         tace_ids=tace_ids)

    # protocol setpoints may reference composition parameters
    steps = []
    for s in protocol_comp.steps:
        if s.setpoint_param:
            value = composition.get(s.setpoint_param)
            if value is None:
                raise RunnerError(
                    f"protocol step references unresolved parameter "
                    f"{s.setpoint_param!r}")
            steps.append(replace(s, setpoint=float(value), setpoint_param=None))
        else:
            steps.append(s)

    probes = {str(i): p for i, p in enumerate(doc.probes)}
    return _Setup(
        doc=doc, grid=grid, mask=mask, materials=materials,
        composition=composition, probes=probes, equipment=equipment,
        protocol_steps=tuple(steps),
        dt=float(composition.get("time_step", 0.5)),
        boundary=str(composition.get("boundary_condition", "dirichlet")),
        boundary_T=float(composition.get("boundary_temperature", 310.0)),
        body_T=float(composition.get("body_temperature", 310.0)),
        impedance_trace=doc.impedance_trace,
    )


def _probe_adjacent_mask(setup: _Setup, margin_mm: float = 2.0) -> np.ndarray:
    """Voxels within (probe radius + margin) of any probe surface."""
    mask = np.zeros(setup.grid.dims, dtype=bool)
    for p in setup.probes.values():
        eq = setup.equipment.get(p.equipment_id)
        radius = 1.0
        length = 20.0
        if eq is not None:
            pm = eq.param_map()
            for rname in ("probe_radius", "electrode_radius"):
                if rname in pm and pm[rname].value is not None:
                    radius = float(pm[rname].value)
            if "active_length" in pm and pm["active_length"].value is not None:
                length = float(pm["active_length"].value)
        mask |= rasterize_probe_cylinder(
            setup.grid, p.tip, p.direction, radius + margin_mm, length)
    return mask


def _protocol_time_estimate(steps) -> float | None:
    total = sum(s.max_duration for s in steps
                if s.max_duration < float("inf"))
    return total if total > 0 else None


class _SnapshotSchedule:
    def __init__(self, doc: scen.ScenarioDoc, override: float | None):
        self.entries = []
        for fieldname, every in doc.outputs.snapshots:
            self.entries.append((fieldname, override or every))
        self.written: dict[str, float] = {f: 0.0 for f, _ in self.entries}

    def due(self, sim_t: float):
        for fieldname, every in self.entries:
            if sim_t + 1e-9 >= self.written[fieldname] + every:
                self.written[fieldname] += every
                yield fieldname


def run(req: RunRequest) -> RunResult:
    """Execute a complete simulation; writes the run directory and returns
    the in-memory result. Solver failures abort with the partial event log
    preserved on disk."""
    if req.deterministic:
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:
            threadpool_limits = None
        if threadpool_limits is not None:
            with threadpool_limits(limits=1):
                return _run_inner(req)
    return _run_inner(req)


def _run_inner(req: RunRequest) -> RunResult:
    t_wall = time.time()
    if isinstance(req.scenario, scen.ScenarioDoc):
        doc = req.scenario
        scenario_dir = os.getcwd()
    else:
        with open(req.scenario, "rb") as fh:
            doc = scen.parse_scenario(fh.read())
        scenario_dir = os.path.dirname(os.path.abspath(req.scenario))

    setup = _prepare(doc, scenario_dir)
    writer = RunWriter(req.outdir)

    # provenance echo: scenario with every resolved parameter inlined
    resolved = {
        name: scen.ParamValue(rp.value, rp.unit)
        for name, rp in setup.composition.values.items() if rp.value is not None}
    echo = replace(doc, overrides=resolved, protocol_steps=setup.protocol_steps,
                   protocol_id=None)
    writer.write_scenario_echo(scen.scenario_to_xml(echo))

    try:
        if doc.modality in ("RFA", "MWA"):
            result = _run_thermal(req, setup, writer)
        elif doc.modality == "CRYO":
            result = _run_cryo(req, setup, writer)
        else:
            result = _run_ire(req, setup, writer)
    except SolverError as exc:
        writer.log_event(-1.0, "solver-error", message=str(exc))
        writer.finalize({"status": "failed", "error": str(exc)})
        raise

    result.wall_clock_s = time.time() - t_wall
    summary = {
        "status": "done",
        "modality": doc.modality,
        "simulated_s": result.simulated_s,
        "wall_clock_s": result.wall_clock_s,
        "lesion_volume_ml": result.lesion_volume_ml,
        "diagnostics": result.diagnostics,
    }
    writer.finalize(summary)
    return result


def _log_protocol_events(writer: RunWriter, sim_t: float,
                         state: cdm.ProtocolState) -> None:
    for ev in state.events:
        writer.log_event(sim_t, "protocol", detail=list(map(str, ev)))


def _write_requested_finals(setup: _Setup, writer: RunWriter, fields: dict):
    for name in setup.doc.outputs.finals:
        if name in fields:
            writer.write_field(name, setup.grid, fields[name].values)


_FIELD_SOURCES = {
    "temperature": "T",
    "dead_fraction": "D",
    "max_field": "E",
    "min_temperature": "minT",
}


def _run_thermal(req: RunRequest, setup: _Setup, writer: RunWriter) -> RunResult:
    grid = setup.grid
    comp = setup.composition
    dt = setup.dt
    theta = float(comp.get("lesion_threshold", 0.8))
    death_params = celldeath.DeathModelParams(
        forward_rate_scale=float(comp.get("forward_rate_scale",
                                          celldeath.DEFAULT_FORWARD_RATE_SCALE)),
        backward_rate=float(comp.get("backward_rate",
                                     celldeath.DEFAULT_BACKWARD_RATE)),
        temperature_scale=float(comp.get("rate_temperature_scale",
                                         celldeath.DEFAULT_RATE_TEMPERATURE_SCALE)),
        lesion_threshold=theta)
    perfusion_off_in_dead = bool(comp.get("perfusion_stops_in_dead_tissue", True))

    solver = BioheatSolver(setup.materials, dt, setup.boundary,
                           setup.boundary_T, setup.body_T)
    T = np.full(grid.dims, float(comp.get("initial_temperature", setup.body_T)))
    cells = celldeath.CellStateField.initial(grid)
    near_probe = _probe_adjacent_mask(setup)

    probe0 = setup.probes["0"]
    equipment0 = setup.equipment[probe0.equipment_id]
    if setup.doc.modality == "RFA":
        sigma_mm = float(comp.get("gaussian_width", 2.0))
        offsets = equipment0.data.get("tine_offsets", ((0.0, 0.0, 0.0),))
        pts = np.concatenate([
            sources.tine_points(p, offsets) for p in setup.probes.values()])
        unit_spec = sources.RfaSourceSpec(points=pts, sigma_mm=sigma_mm,
                                          power_w=1.0)
        unit_q = sources.rfa_source(unit_spec, grid).values
        mwa_state = None
    else:
        em_table = equipment0.data.get("em_params", ((310.0, 43.0, 1.69),))
        pm = equipment0.param_map()

        def eqp(name, default):
            p = pm.get(name)
            return default if p is None or p.value is None else float(p.value)

        antenna = sources.MwaAntennaSpec(
            frequency_hz=eqp("frequency", 2.45e9),
            input_power_w=1.0,
            probe_radius_mm=eqp("probe_radius", 0.9),
            slot_offset_mm=eqp("slot_offset", 5.0),
            slot_width_mm=eqp("slot_width", 1.5),
            dr_mm=eqp("rz_resolution", 0.5),
            r_max_mm=eqp("rz_radial_extent", 40.0),
            z_margin_mm=eqp("rz_axial_margin", 25.0),
            em_table=em_table)
        mwa_state = {
            "antenna": antenna,
            "resolve_dT": float(comp.get("em_resolve_delta_t", 5.0)),
            "T_at_solve": None,
            "unit_q": None,
            "solves": 0,
        }
        unit_q = None

    def mwa_refresh(T_now):
        """Re-run the antenna solve when the near-probe field drifted."""
        probe_T = T_now[near_probe]
        if (mwa_state["T_at_solve"] is not None
                and np.max(np.abs(probe_T - mwa_state["T_at_solve"]))
                < mwa_state["resolve_dT"]):
            return
        rz_T = _sample_rz_temperature(mwa_state["antenna"], grid, T_now, probe0)
        sol = sources.mwa_sar(mwa_state["antenna"], rz_T)
        mwa_state["unit_q"] = sources.revolve_sar(sol, grid, probe0).values
        mwa_state["T_at_solve"] = probe_T.copy()
        mwa_state["solves"] += 1

    pstate = cdm.initial_protocol_state(setup.protocol_steps)
    schedule = _SnapshotSchedule(setup.doc, req.snapshot_every)
    total_est = _protocol_time_estimate(setup.protocol_steps)
    sim_t = 0.0
    steps = 0
    while not pstate.terminal:
        setpoint = max(0.0, pstate.setpoint)
        if setup.doc.modality == "MWA":
            mwa_refresh(T)
            q = mwa_state["unit_q"] * setpoint
        else:
            q = unit_q * setpoint
        perf = None
        if perfusion_off_in_dead:
            perf = setup.materials.perfusion * (cells.dead < theta)
        T = solver.step(T, q=q, perfusion=perf)
        T_field = ScalarField(grid, T, unit="K")
        cells = celldeath.step_death(cells, T_field, death_params, dt)
        sim_t += dt
        steps += 1
        signals = _signals(sim_t, T, near_probe, setup, None)
        pstate = cdm.protocol_next(pstate, signals, dt)
        _log_protocol_events(writer, sim_t, pstate)
        if req.progress is not None and total_est:
            req.progress(sim_t / total_est)
        print(f"t={sim_t:g} step={steps} maxT={T.max():.2f}",
              file=sys.stderr, flush=True)
        for fieldname in schedule.due(sim_t):
            values = T if fieldname == "temperature" else cells.dead
            writer.write_snapshot(fieldname, sim_t, grid, values)

    lesion = celldeath.extract_lesion(cells, theta)
    final_fields = {
        "temperature": ScalarField(grid, T, unit="K"),
        "dead_fraction": cells.dead_field(),
    }
    _finish_lesion_outputs(writer, setup, lesion.mask, lesion.surface,
                           final_fields)
    diagnostics = {"thermal_steps": steps}
    if setup.doc.modality == "MWA":
        diagnostics["em_solves"] = mwa_state["solves"]
    return RunResult(
        outdir=req.outdir, lesion_mask=lesion.mask,
        lesion_surface=lesion.surface, lesion_volume_ml=lesion.volume_mask_ml,
        final_fields=final_fields, events=list(writer.events),
        simulated_s=sim_t, wall_clock_s=0.0, diagnostics=diagnostics)


def _sample_rz_temperature(antenna, grid: GridSpec, T: np.ndarray,
                           probe: Probe) -> np.ndarray:
    """Axisymmetric temperature slice for the antenna solve, trilinearly
    sampled along one radial direction (fields are near-axisymmetric close
    to the probe)."""
    from .grid import trilinear_sample
    r, z = antenna.rz_axes()
    d = np.asarray(probe.direction)
    ref = np.array([0.0, 0.0, 1.0])
    if abs(d @ ref) > 0.9:
        ref = np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, ref)
    e1 /= np.linalg.norm(e1)
    R, Z = np.meshgrid(r, z, indexing="ij")
    pts = (np.asarray(probe.tip) + Z.ravel()[:, None] * 1e3 * d
           + R.ravel()[:, None] * 1e3 * e1)
    inside = grid.contains(pts)
    out = np.full(pts.shape[0], 310.0)
    if inside.any():
        out[inside] = trilinear_sample(ScalarField(grid, T, unit="K"),
                                       pts[inside])
    return out.reshape(R.shape)


def _run_cryo(req: RunRequest, setup: _Setup, writer: RunWriter) -> RunResult:
    grid = setup.grid
    comp = setup.composition
    dt = setup.dt
    coolant_T = float(comp.get("coolant_temperature", 113.0))
    lethal_T = float(comp.get("lethal_temperature", 233.0))
    cycles_required = int(comp.get("freeze_cycles_required", 1))

    probe_mask = np.zeros(grid.dims, dtype=bool)
    for p in setup.probes.values():
        eq = setup.equipment[p.equipment_id]
        pm = eq.param_map()
        radius = float(pm["probe_radius"].value) if "probe_radius" in pm else 0.85
        length = float(pm["active_length"].value) if "active_length" in pm else 20.0
        probe_mask |= rasterize_probe_cylinder(grid, p.tip, p.direction,
                                               radius, length)

    state = ThermalState(ScalarField.full(
        grid, float(comp.get("initial_temperature", setup.body_T)), unit="K"))
    near_probe = _probe_adjacent_mask(setup)
    pstate = cdm.initial_protocol_state(setup.protocol_steps)
    schedule = _SnapshotSchedule(setup.doc, req.snapshot_every)
    total_est = _protocol_time_estimate(setup.protocol_steps)

    cycle_mins: list[np.ndarray] = []
    min_T = state.T.values.copy()
    coolant_was_on = False
    sim_t = 0.0
    steps = 0
    picard_total = 0
    while not pstate.terminal:
        coolant_on = pstate.setpoint > 0.5 and \
            (pstate.current_step is None
             or pstate.current_step.setpoint_kind == "coolant")
        if coolant_on and not coolant_was_on:
            cycle_mins.append(np.full(grid.dims, np.inf))
        res = step_cryo(state, setup.materials, dt, probe_mask, coolant_on,
                        coolant_T=coolant_T, boundary=setup.boundary,
                        boundary_T=setup.boundary_T, body_T=setup.body_T)
        state = res.state
        picard_total += res.picard_iterations
        if coolant_on:
            np.minimum(cycle_mins[-1], state.T.values, out=cycle_mins[-1])
        np.minimum(min_T, state.T.values, out=min_T)
        coolant_was_on = coolant_on
        sim_t += dt
        steps += 1
        signals = _signals(sim_t, state.T.values, near_probe, setup, None)
        pstate = cdm.protocol_next(pstate, signals, dt)
        _log_protocol_events(writer, sim_t, pstate)
        if req.progress is not None and total_est:
            req.progress(sim_t / total_est)
        print(f"t={sim_t:g} step={steps} maxT={state.T.values.max():.2f}",
              file=sys.stderr, flush=True)
        for fieldname in schedule.due(sim_t):
            values = (state.T.values if fieldname == "temperature" else min_T)
            writer.write_snapshot(fieldname, sim_t, grid, values)

    if not cycle_mins:
        cycle_mins = [min_T]
    lesion_mask = celldeath.cryo_lethal_mask(cycle_mins, grid, lethal_T,
                                             cycles_required)
    count = np.zeros(grid.dims)
    for cm in cycle_mins:
        count += cm <= lethal_T
    lethal_field = ScalarField(grid, count)
    from .surfaces import extract_isosurface
    surface = extract_isosurface(lethal_field, float(cycles_required) - 0.5)

    final_fields = {
        "temperature": state.T,
        "min_temperature": ScalarField(grid, min_T, unit="K"),
    }
    _finish_lesion_outputs(writer, setup, lesion_mask, surface, final_fields)
    return RunResult(
        outdir=req.outdir, lesion_mask=lesion_mask, lesion_surface=surface,
        lesion_volume_ml=lesion_mask.volume_ml(),
        final_fields=final_fields, events=list(writer.events),
        simulated_s=sim_t, wall_clock_s=0.0,
        diagnostics={"thermal_steps": steps,
                     "picard_iterations": picard_total,
                     "freeze_cycles": len(cycle_mins)})


def _run_ire(req: RunRequest, setup: _Setup, writer: RunWriter) -> RunResult:
    grid = setup.grid
    comp = setup.composition
    dt = setup.dt
    threshold = float(comp.get("field_threshold",
                               electro.DEFAULT_FIELD_THRESHOLD))
    functional = str(comp.get("field_functional", "e_mag"))
    sigma = ScalarField(grid, setup.materials.sigma, unit="S/m")
    if sigma.values.min() <= 0:
        raise RunnerError("IRE needs positive electrical conductivity everywhere")

    equipment0 = setup.equipment[setup.probes["0"].equipment_id]
    pm = equipment0.param_map()
    radius = float(pm["electrode_radius"].value) if "electrode_radius" in pm \
        else 0.5
    length = float(pm["active_length"].value) if "active_length" in pm else 20.0

    acc = electro.FieldAccumulator.empty(grid, functional)
    pstate = cdm.initial_protocol_state(setup.protocol_steps)
    total_est = _protocol_time_estimate(setup.protocol_steps)
    near_probe = _probe_adjacent_mask(setup)
    solve_cache: dict = {}
    sim_t = 0.0
    steps = 0
    impedance = None
    while not pstate.terminal:
        step = pstate.current_step
        if step is None:
            break
        if step.electrodes is None:
            raise RunnerError("IRE protocol steps need an electrode pair")
        key = (pstate.step_index, pstate.repeats_used,
               round(pstate.setpoint, 9))
        if key not in solve_cache:
            pair = electro.ElectrodePair(step.electrodes[0], step.electrodes[1],
                                         max(pstate.setpoint, 1e-9),
                                         active_length_mm=length,
                                         radius_mm=radius)
            a_mask, c_mask = electro.electrode_masks(grid, setup.probes, pair)
            phi = electro.solve_potential(sigma, a_mask, c_mask, pair.voltage)
            z = electro.impedance_proxy(phi, sigma, a_mask, pair.voltage)
            solve_cache[key] = (phi, z)
            acc = electro.accumulate_field(acc, phi, sigma)
        phi, impedance = solve_cache[key]
        sim_t += dt
        steps += 1
        signals = _signals(sim_t, None, near_probe, setup, impedance)
        pstate = cdm.protocol_next(pstate, signals, dt)
        _log_protocol_events(writer, sim_t, pstate)
        if req.progress is not None and total_est:
            req.progress(sim_t / total_est)
        print(f"t={sim_t:g} step={steps} maxT=310.00",
              file=sys.stderr, flush=True)

    lesion = electro.ire_lesion(acc, threshold)
    final_fields = {"max_field": acc.field()}
    _finish_lesion_outputs(writer, setup, lesion.mask, lesion.surface,
                           final_fields)
    return RunResult(
        outdir=req.outdir, lesion_mask=lesion.mask,
        lesion_surface=lesion.surface, lesion_volume_ml=lesion.volume_ml,
        final_fields=final_fields, events=list(writer.events),
        simulated_s=sim_t, wall_clock_s=0.0,
        diagnostics={"protocol_steps": steps,
                     "potential_solves": len(solve_cache),
                     "last_impedance_ohm": impedance})


def _signals(sim_t: float, T: np.ndarray | None, near_probe: np.ndarray,
             setup: _Setup, impedance: float | None) -> dict:
    signals = {}
    if T is not None:
        signals["max_probe_temperature"] = float(T[near_probe].max())
    if impedance is not None:
        signals["impedance"] = float(impedance)
    elif setup.impedance_trace:
        trace = np.asarray(setup.impedance_trace)
        signals["impedance"] = float(
            np.interp(sim_t, trace[:, 0], trace[:, 1]))
    return signals


def _finish_lesion_outputs(writer: RunWriter, setup: _Setup,
                           mask: LabelMask, surface: TriangleMesh,
                           final_fields: dict) -> None:
    writer.write_field("lesion", setup.grid, mask.labels,
                       element_type="MET_UCHAR")
    writer.write_surface("lesion", surface)
    _write_requested_finals(setup, writer, final_fields)


def signals_from_state(sim_t: float, T: np.ndarray | None,
                       near_probe_mask: np.ndarray,
                       impedance: float | None = None) -> dict:
    """Protocol signal values from solver state: elapsed time is tracked by
    the protocol machine itself; temperature is the maximum within the
    probe-adjacent shell; impedance comes from the active potential solve
    or a synthetic trace."""
    out = {}
    if T is not None:
        out["max_probe_temperature"] = float(T[near_probe_mask].max())
    if impedance is not None:
        out["impedance"] = float(impedance)
    return out
