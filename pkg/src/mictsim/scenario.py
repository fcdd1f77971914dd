"""Scenario definition files: parse, validate, serialize.

A scenario is an XML document fully describing one simulation: grid, tissue
table, region-to-tissue bindings, probes, modality, protocol reference (or
inline steps), numerical parameters and output requests. Parsing is total:
any byte string yields either a ScenarioDoc or a ScenarioValidationError
carrying *all* failures, never a crash.

Physical quantities carry explicit unit strings; internal representation is
SI (K, m, s, W, V) with mm permitted in geometry only. Unit checking is
strict string equality against the expected unit of each known parameter.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import cdm
from .grid import GridSpec, Probe

MODALITIES = ("RFA", "MWA", "CRYO", "IRE")
_PROBE_KIND_FOR_MODALITY = {
    "RFA": "RFA", "MWA": "MWA", "CRYO": "CRYO", "IRE": "IRE-electrode"}

OUTPUT_FIELDS = ("temperature", "dead_fraction", "max_field", "min_temperature")

# Expected unit per known parameter name; unknown names pass through
# unchecked (their contracts live in the component library).
EXPECTED_UNITS = {
    "density": "kg/m^3",
    "heat_capacity": "J/kg/K",
    "thermal_conductivity": "W/m/K",
    "perfusion_coefficient": "W/m^3/K",
    "electrical_conductivity": "S/m",
    "latent_heat": "J/kg",
    "solidus_temperature": "K",
    "liquidus_temperature": "K",
    "frozen_heat_capacity": "J/kg/K",
    "frozen_thermal_conductivity": "W/m/K",
    "frozen_density": "kg/m^3",
    "applied_power": "W",
    "input_power": "W",
    "potential_difference": "V",
    "body_temperature": "K",
    "boundary_temperature": "K",
    "coolant_temperature": "K",
    "initial_temperature": "K",
    "lethal_temperature": "K",
    "em_resolve_delta_t": "K",
    "rate_temperature_scale": "K",
    "forward_rate_scale": "1/s",
    "backward_rate": "1/s",
    "time_step": "s",
    "gaussian_width": "mm",
    "probe_radius": "mm",
    "active_length": "mm",
    "electrode_radius": "mm",
    "slot_offset": "mm",
    "slot_width": "mm",
    "rz_resolution": "mm",
    "rz_radial_extent": "mm",
    "rz_axial_margin": "mm",
    "field_threshold": "V/m",
    "frequency": "Hz",
    "lesion_threshold": "",
}

_THERMAL_TISSUE_PARAMS = ("density", "heat_capacity", "thermal_conductivity",
                          "perfusion_coefficient")
_CRYO_EXTRA = ("latent_heat", "solidus_temperature", "liquidus_temperature",
               "frozen_heat_capacity", "frozen_thermal_conductivity")
REQUIRED_TISSUE_PARAMS = {
    "RFA": _THERMAL_TISSUE_PARAMS,
    "MWA": _THERMAL_TISSUE_PARAMS,
    "CRYO": _THERMAL_TISSUE_PARAMS + _CRYO_EXTRA,
    "IRE": ("electrical_conductivity",),
}


@dataclass(frozen=True)
class ValidationFailure:
    code: str       # e.g. 'xml', 'missing-parameter', 'unit-mismatch'
    message: str
    subject: str = ""

    def __str__(self):
        loc = f" [{self.subject}]" if self.subject else ""
        return f"{self.code}{loc}: {self.message}"


class ScenarioValidationError(Exception):
    def __init__(self, failures):
        self.failures = list(failures)
        super().__init__("; ".join(str(f) for f in self.failures))


@dataclass(frozen=True)
class ParamValue:
    value: object
    unit: str = ""


@dataclass(frozen=True)
class RegionBinding:
    id: int
    name: str
    tissue: str
    tace: bool = False


@dataclass(frozen=True)
class TissueSpec:
    name: str
    params: Mapping[str, ParamValue] = field(default_factory=dict)
    inherit: str | None = None  # 'organ' pulls missing params from the organ

    def get(self, name: str, default=None):
        pv = self.params.get(name)
        return default if pv is None else pv.value


@dataclass(frozen=True)
class OutputRequests:
    snapshots: tuple = ()   # (field, every_s) pairs
    finals: tuple = ()      # field names


@dataclass(frozen=True)
class ScenarioDoc:
    schema_version: str
    modality: str
    grid: GridSpec
    model_id: str
    organ_id: str
    protocol_id: str | None
    library_path: str | None
    mask_path: str | None
    regions: tuple
    tissues: Mapping[str, TissueSpec]
    probes: tuple
    protocol_steps: tuple | None
    overrides: Mapping[str, ParamValue]
    numerics: Mapping[str, ParamValue]
    outputs: OutputRequests
    impedance_trace: tuple | None = None


def _check_units(params: dict[str, ParamValue], failures: list, where: str):
    for name, pv in params.items():
        expected = EXPECTED_UNITS.get(name)
        if expected is not None and pv.unit != expected:
            failures.append(ValidationFailure(
                "unit-mismatch",
                f"{where}: parameter {name!r} declared in "
                f"{pv.unit or 'no unit'!r}, expected {expected!r}",
                subject=name))


def _parse_params(el, failures, where) -> dict[str, ParamValue]:
    out: dict[str, ParamValue] = {}
    if el is None:
        return out
    for p in el.findall("param"):
        name = p.get("name")
        if not name:
            failures.append(ValidationFailure(
                "malformed", f"{where}: <param> without a name"))
            continue
        raw = p.get("value")
        kind = p.get("kind", "real")
        try:
            value = cdm._coerce(kind, raw)
        except (ValueError, TypeError):
            failures.append(ValidationFailure(
                "malformed", f"{where}: parameter {name!r} has non-{kind} "
                f"value {raw!r}", subject=name))
            continue
        out[name] = ParamValue(value, p.get("unit", ""))
    _check_units(out, failures, where)
    return out


def _parse_triple(text, name, failures):
    try:
        v = tuple(float(x) for x in (text or "").replace(",", " ").split())
        if len(v) != 3:
            raise ValueError
        return v
    except ValueError:
        failures.append(ValidationFailure(
            "malformed", f"{name} must be three numbers, got {text!r}",
            subject=name))
        return None


def parse_scenario(text) -> ScenarioDoc:
    """Parse + fully validate scenario XML; raises ScenarioValidationError
    listing every failure found (not just the first)."""
    failures: list[ValidationFailure] = []
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError:
            raise ScenarioValidationError([ValidationFailure(
                "xml", "document is not valid UTF-8")])
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise ScenarioValidationError([ValidationFailure(
            "xml", f"not well-formed XML: {exc}")])
    if root.tag != "scenario":
        raise ScenarioValidationError([ValidationFailure(
            "xml", f"root element is <{root.tag}>, expected <scenario>")])

    schema_version = root.get("schema_version", "")
    if schema_version != "1":
        failures.append(ValidationFailure(
            "schema-version", f"unsupported schema_version {schema_version!r}"))

    # grid
    grid = None
    gel = root.find("grid")
    if gel is None:
        failures.append(ValidationFailure("missing-section", "no <grid>"))
    else:
        spacing = _parse_triple(gel.get("spacing", "1 1 1"), "grid spacing", failures)
        origin = _parse_triple(gel.get("origin", "0 0 0"), "grid origin", failures)
        try:
            dims = tuple(int(gel.get(a, "0")) for a in ("nx", "ny", "nz"))
            if spacing and origin:
                grid = GridSpec(dims, spacing, origin)
        except ValueError as exc:
            failures.append(ValidationFailure("malformed", f"grid: {exc}"))

    # modality
    modality = (root.findtext("modality") or "").strip()
    if modality not in MODALITIES:
        failures.append(ValidationFailure(
            "unknown-modality",
            f"modality {modality!r} is not one of {', '.join(MODALITIES)}"))

    # composition references
    cel = root.find("composition")
    model_id = organ_id = ""
    protocol_id = library_path = None
    if cel is None:
        failures.append(ValidationFailure("missing-section", "no <composition>"))
    else:
        model_id = cel.get("model", "")
        organ_id = cel.get("organ", "")
        protocol_id = cel.get("protocol")
        library_path = cel.get("library")
        for attr, val in (("model", model_id), ("organ", organ_id)):
            if not val:
                failures.append(ValidationFailure(
                    "missing-parameter", f"composition lacks {attr!r} reference",
                    subject=attr))

    # regions
    regions = []
    mask_path = None
    rel = root.find("regions")
    if rel is not None:
        mask_path = rel.get("mask")
        seen = set()
        for r in rel.findall("region"):
            try:
                rid = int(r.get("id", ""))
            except ValueError:
                failures.append(ValidationFailure(
                    "malformed", f"region id {r.get('id')!r} is not an integer"))
                continue
            if rid <= 0 or rid > 255:
                failures.append(ValidationFailure(
                    "malformed", f"region id {rid} must be in 1..255 "
                    "(0 is reserved background)"))
                continue
            if rid in seen:
                failures.append(ValidationFailure(
                    "malformed", f"duplicate region id {rid}"))
                continue
            seen.add(rid)
            regions.append(RegionBinding(
                rid, r.get("name", f"region-{rid}"), r.get("tissue", ""),
                r.get("tace", "false").lower() == "true"))

    # tissues
    tissues: dict[str, TissueSpec] = {}
    tel = root.find("tissues")
    if tel is not None:
        for t in tel.findall("tissue"):
            name = t.get("name", "")
            if not name:
                failures.append(ValidationFailure(
                    "malformed", "<tissue> without a name"))
                continue
            params = _parse_params(t, failures, f"tissue {name!r}")
            tissues[name] = TissueSpec(name, params, t.get("inherit"))

    required = REQUIRED_TISSUE_PARAMS.get(modality, ())
    for name, spec in tissues.items():
        if spec.inherit:
            continue  # completed from the organ component at composition
        for p in required:
            if p not in spec.params:
                failures.append(ValidationFailure(
                    "missing-parameter",
                    f"tissue {name!r} lacks required parameter {p!r}",
                    subject=p))

    for rb in regions:
        if rb.tissue not in tissues:
            failures.append(ValidationFailure(
                "unknown-region",
                f"region {rb.id} binds unknown tissue {rb.tissue!r}",
                subject=rb.name))

    # probes
    probes = []
    pel = root.find("probes")
    want_kind = _PROBE_KIND_FOR_MODALITY.get(modality)
    if pel is not None:
        for p in pel.findall("probe"):
            tip = _parse_triple(p.get("tip"), "probe tip", failures)
            direction = _parse_triple(p.get("direction"), "probe direction", failures)
            if tip is None or direction is None:
                continue
            d = np.asarray(direction, dtype=float)
            n = np.linalg.norm(d)
            if n < 1e-12:
                failures.append(ValidationFailure(
                    "malformed", "probe direction has zero length"))
                continue
            kind = p.get("kind", want_kind or "RFA")
            try:
                probes.append(Probe(tip, tuple(d / n), kind,
                                    p.get("equipment", "")))
            except ValueError as exc:
                failures.append(ValidationFailure("malformed", f"probe: {exc}"))
    if not probes:
        failures.append(ValidationFailure("missing-section", "no probes defined"))
    for pr in probes:
        if want_kind and pr.kind != want_kind:
            failures.append(ValidationFailure(
                "malformed",
                f"{modality} scenario holds a {pr.kind} probe; expected {want_kind}"))
    if modality == "IRE" and len(probes) < 2:
        failures.append(ValidationFailure(
            "malformed", "IRE needs at least two electrodes"))

    # inline protocol
    protocol_steps = None
    prel = root.find("protocol")
    if prel is not None:
        steps = []
        for s in prel.findall("step"):
            try:
                steps.append(cdm.parse_protocol_step(s))
            except (cdm.CdmError, ValueError) as exc:
                failures.append(ValidationFailure("malformed", f"protocol step: {exc}"))
        protocol_steps = tuple(steps)
    if protocol_steps is None and not protocol_id:
        failures.append(ValidationFailure(
            "missing-section",
            "no protocol: give composition/@protocol or an inline <protocol>"))

    overrides = _parse_params(root.find("parameters"), failures, "parameters")
    numerics = _parse_params(root.find("numerics"), failures, "numerics")

    # outputs
    snapshots = []
    finals = []
    oel = root.find("output")
    if oel is not None:
        for s in oel.findall("snapshot"):
            fieldname = s.get("field", "temperature")
            try:
                every = float(s.get("every", "30"))
            except ValueError:
                every = -1.0
            if every <= 0:
                failures.append(ValidationFailure(
                    "malformed", "snapshot cadence must be > 0", subject=fieldname))
                continue
            if fieldname not in OUTPUT_FIELDS:
                failures.append(ValidationFailure(
                    "malformed", f"unknown output field {fieldname!r}"))
                continue
            snapshots.append((fieldname, every))
        for f in oel.findall("final"):
            fieldname = f.get("field", "temperature")
            if fieldname not in OUTPUT_FIELDS:
                failures.append(ValidationFailure(
                    "malformed", f"unknown output field {fieldname!r}"))
                continue
            finals.append(fieldname)

    # synthetic impedance trace (optional, for thermal-modality guards)
    trace = None
    trel = root.find("impedance_trace")
    if trel is not None:
        try:
            trace = cdm._parse_rows(trel.text or "")
            for row in trace:
                if len(row) != 2:
                    raise ValueError("rows must be (time, ohm)")
        except ValueError as exc:
            failures.append(ValidationFailure(
                "malformed", f"impedance_trace: {exc}"))
            trace = None

    if failures:
        raise ScenarioValidationError(failures)

    return ScenarioDoc(
        schema_version=schema_version,
        modality=modality,
        grid=grid,
        model_id=model_id,
        organ_id=organ_id,
        protocol_id=protocol_id,
        library_path=library_path,
        mask_path=mask_path,
        regions=tuple(regions),
        tissues=tissues,
        probes=tuple(probes),
        protocol_steps=protocol_steps,
        overrides=overrides,
        numerics=numerics,
        outputs=OutputRequests(tuple(snapshots), tuple(finals)),
        impedance_trace=trace,
    )


def validate_scenario(text):
    """Non-raising variant: returns (doc | None, failures)."""
    try:
        return parse_scenario(text), []
    except ScenarioValidationError as exc:
        return None, exc.failures


def _param_el(parent, name, pv: ParamValue):
    attrs = {"name": name, "unit": pv.unit}
    if isinstance(pv.value, bool):
        attrs["kind"] = "boolean"
        attrs["value"] = "true" if pv.value else "false"
    elif isinstance(pv.value, int):
        attrs["kind"] = "integer"
        attrs["value"] = str(pv.value)
    elif isinstance(pv.value, float):
        attrs["value"] = repr(pv.value)
    else:
        attrs["kind"] = "enum"
        attrs["value"] = str(pv.value)
    ET.SubElement(parent, "param", attrs)


def scenario_to_xml(doc: ScenarioDoc) -> str:
    """Canonical serialization; parse(scenario_to_xml(d)) == d."""
    root = ET.Element("scenario", {"schema_version": doc.schema_version})
    nx, ny, nz = doc.grid.dims
    ET.SubElement(root, "grid", {
        "nx": str(nx), "ny": str(ny), "nz": str(nz),
        "spacing": " ".join(repr(s) for s in doc.grid.spacing),
        "origin": " ".join(repr(o) for o in doc.grid.origin)})
    ET.SubElement(root, "modality").text = doc.modality
    cattrs = {"model": doc.model_id, "organ": doc.organ_id}
    if doc.protocol_id:
        cattrs["protocol"] = doc.protocol_id
    if doc.library_path:
        cattrs["library"] = doc.library_path
    ET.SubElement(root, "composition", cattrs)

    rattrs = {}
    if doc.mask_path:
        rattrs["mask"] = doc.mask_path
    rel = ET.SubElement(root, "regions", rattrs)
    for rb in doc.regions:
        a = {"id": str(rb.id), "name": rb.name, "tissue": rb.tissue}
        if rb.tace:
            a["tace"] = "true"
        ET.SubElement(rel, "region", a)

    tel = ET.SubElement(root, "tissues")
    for name in sorted(doc.tissues):
        spec = doc.tissues[name]
        a = {"name": name}
        if spec.inherit:
            a["inherit"] = spec.inherit
        t = ET.SubElement(tel, "tissue", a)
        for pname in sorted(spec.params):
            _param_el(t, pname, spec.params[pname])

    pel = ET.SubElement(root, "probes")
    for pr in doc.probes:
        ET.SubElement(pel, "probe", {
            "kind": pr.kind,
            "equipment": pr.equipment_id,
            "tip": " ".join(repr(v) for v in pr.tip),
            "direction": " ".join(repr(v) for v in pr.direction)})

    if doc.protocol_steps is not None:
        prel = ET.SubElement(root, "protocol")
        for s in doc.protocol_steps:
            a = {"setpoint": s.setpoint_kind, "value": repr(s.setpoint)}
            if s.max_duration < float("inf"):
                a["max_duration"] = repr(s.max_duration)
            if s.setpoint_param:
                a["param"] = s.setpoint_param
            if s.electrodes:
                a["anode"], a["cathode"] = s.electrodes
            sel = ET.SubElement(prel, "step", a)
            for g in s.guards:
                ga = {"signal": g.signal, "op": g.op,
                      "threshold": repr(g.threshold), "action": g.action}
                if g.value is not None:
                    ga["value"] = repr(g.value)
                ET.SubElement(sel, "guard", ga)

    ovel = ET.SubElement(root, "parameters")
    for name in sorted(doc.overrides):
        _param_el(ovel, name, doc.overrides[name])
    nel = ET.SubElement(root, "numerics")
    for name in sorted(doc.numerics):
        _param_el(nel, name, doc.numerics[name])

    oel = ET.SubElement(root, "output")
    for fieldname, every in doc.outputs.snapshots:
        ET.SubElement(oel, "snapshot", {"field": fieldname, "every": repr(every)})
    for fieldname in doc.outputs.finals:
        ET.SubElement(oel, "final", {"field": fieldname})

    if doc.impedance_trace:
        trel = ET.SubElement(root, "impedance_trace")
        trel.text = "\n" + "\n".join(
            f"{t!r} {z!r}" for t, z in doc.impedance_trace) + "\n"

    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"
