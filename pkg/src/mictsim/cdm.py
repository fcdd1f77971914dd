"""Clinical domain model: composable numerical-model / equipment / organ /
protocol definitions with parameter precedence, prompted parameters, and a
guarded protocol step machine.

Component libraries are editable XML files (same schema family as
scenarios). The impedance guard signal is a proxy supplied by the active
solver: electroporation runs derive it from the potential solve's total
current, thermal-only runs use a scenario-supplied synthetic trace.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

VALUE_KINDS = ("real", "integer", "boolean", "enum")
COMPONENT_KINDS = ("numerical-model", "equipment", "organ", "protocol")
GUARD_SIGNALS = ("elapsed_time", "max_probe_temperature", "impedance")
GUARD_OPS = (">=", "<=", ">", "<")
GUARD_ACTIONS = ("advance", "repeat", "terminate", "set_power")
SETPOINT_KINDS = ("power", "potential_difference", "coolant")

DEFAULT_REPEAT_CAP = 10


class CdmError(Exception):
    """Invalid component definitions or composition problems."""


class CompositionError(CdmError):
    """The requested component combination is not allowed."""


class AmbiguityError(CdmError):
    """Contradictory same-precedence definitions or overlapping rules."""


def _coerce(kind: str, raw):
    if raw is None:
        return None
    if kind == "real":
        return float(raw)
    if kind == "integer":
        return int(raw)
    if kind == "boolean":
        if isinstance(raw, bool):
            return raw
        return str(raw).strip().lower() in ("true", "1", "yes", "on")
    return str(raw)


@dataclass(frozen=True)
class Parameter:
    """One named parameter of a component.

    A prompted parameter must be supplied per case by a human; it may carry
    a default only when explicitly marked overridable.
    """

    name: str
    kind: str = "real"
    unit: str = ""
    value: object = None
    prompt: bool = False
    overridable: bool = False

    def __post_init__(self):
        if self.kind not in VALUE_KINDS:
            raise CdmError(f"unknown parameter kind {self.kind!r}")
        if self.prompt and self.value is not None and not self.overridable:
            raise CdmError(
                f"prompted parameter {self.name!r} carries a default value "
                "without being marked overridable")
        object.__setattr__(self, "value", _coerce(self.kind, self.value))


@dataclass(frozen=True)
class Guard:
    """A (signal, comparator, threshold, action) rule on a protocol step."""

    signal: str
    op: str
    threshold: float
    action: str
    value: float | None = None

    def __post_init__(self):
        if self.signal not in GUARD_SIGNALS:
            raise CdmError(f"unknown guard signal {self.signal!r}")
        if self.op not in GUARD_OPS:
            raise CdmError(f"unknown comparator {self.op!r}")
        if self.action not in GUARD_ACTIONS:
            raise CdmError(f"unknown guard action {self.action!r}")
        if self.action == "set_power" and self.value is None:
            raise CdmError("set_power guard needs a value")

    def satisfied(self, signals: Mapping[str, float]) -> bool:
        v = signals.get(self.signal)
        if v is None:
            return False
        if self.op == ">=":
            return v >= self.threshold
        if self.op == "<=":
            return v <= self.threshold
        if self.op == ">":
            return v > self.threshold
        return v < self.threshold


@dataclass(frozen=True)
class ProtocolStep:
    """One guarded heating/cooling/pulse step.

    The setpoint may reference a composition parameter by name (resolved by
    the runner) instead of carrying a literal value.
    """

    setpoint_kind: str
    setpoint: float = 0.0
    max_duration: float = float("inf")
    guards: tuple[Guard, ...] = ()
    electrodes: tuple[str, str] | None = None
    setpoint_param: str | None = None

    def __post_init__(self):
        if self.setpoint_kind not in SETPOINT_KINDS:
            raise CdmError(f"unknown setpoint kind {self.setpoint_kind!r}")
        if self.max_duration <= 0:
            raise CdmError("step max duration must be > 0")
        if not self.guards and not self.max_duration < float("inf"):
            raise CdmError(
                "step needs at least one guard or a finite max duration")
        if self.electrodes is not None:
            a, c = self.electrodes
            if a == c:
                raise CdmError("IRE step anode and cathode must differ")
        object.__setattr__(self, "guards", tuple(self.guards))


@dataclass(frozen=True)
class ComponentDef:
    """A library component: id, kind, parameters, compatibility tags.

    `data` carries numeric tables (tine layouts, temperature-dependent EM
    parameter tables) as tuples of rows; `steps` is populated for protocol
    components.
    """

    id: str
    kind: str
    parameters: tuple[Parameter, ...] = ()
    tags: tuple[str, ...] = ()
    data: Mapping[str, tuple] = field(default_factory=dict)
    steps: tuple[ProtocolStep, ...] = ()

    def __post_init__(self):
        if self.kind not in COMPONENT_KINDS:
            raise CdmError(f"unknown component kind {self.kind!r}")
        if not self.tags:
            raise CdmError(f"component {self.id!r} has no compatibility tags")
        object.__setattr__(self, "parameters", tuple(self.parameters))
        object.__setattr__(self, "tags", tuple(self.tags))
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "data",
                           {k: tuple(map(tuple, v)) for k, v in dict(self.data).items()})

    def param_map(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters:
            if p.name in out:
                raise AmbiguityError(
                    f"component {self.id!r} defines {p.name!r} twice")
            out[p.name] = p
        return out


@dataclass(frozen=True)
class CombinationRule:
    """(model tag, equipment tag, organ tag, protocol tag) -> allowed.

    '*' matches any component; a literal matches when it is one of the
    component's tags. The most specific matching rule wins; contradictory
    equally-specific matches are an ambiguity error.
    """

    model: str = "*"
    equipment: str = "*"
    organ: str = "*"
    protocol: str = "*"
    allowed: bool = True

    @property
    def specificity(self) -> int:
        return sum(s != "*" for s in
                   (self.model, self.equipment, self.organ, self.protocol))

    def matches(self, model: ComponentDef, equipment: ComponentDef,
                organ: ComponentDef, protocol: ComponentDef) -> bool:
        for slot, comp in ((self.model, model), (self.equipment, equipment),
                           (self.organ, organ), (self.protocol, protocol)):
            if slot != "*" and slot not in comp.tags:
                return False
        return True


def combination_allowed(rules: Sequence[CombinationRule],
                        model: ComponentDef, equipment: ComponentDef,
                        organ: ComponentDef, protocol: ComponentDef) -> bool:
    matching = [r for r in rules if r.matches(model, equipment, organ, protocol)]
    if not matching:
        return False
    best = max(r.specificity for r in matching)
    top = [r for r in matching if r.specificity == best]
    answers = {r.allowed for r in top}
    if len(answers) > 1:
        raise AmbiguityError(
            f"contradictory combination rules for ({model.id}, {equipment.id},"
            f" {organ.id}, {protocol.id})")
    return answers.pop()


@dataclass(frozen=True)
class ResolvedParam:
    name: str
    value: object
    unit: str
    kind: str
    source: str  # which precedence level supplied the value


@dataclass(frozen=True)
class Composition:
    """Outcome of composing four components plus case overrides."""

    values: Mapping[str, ResolvedParam]
    demands: tuple[str, ...]
    component_ids: Mapping[str, str]

    def __getitem__(self, name: str):
        return self.values[name].value

    def get(self, name: str, default=None):
        rp = self.values.get(name)
        return default if rp is None or rp.value is None else rp.value


# precedence, lowest first; case overrides applied on top
_LEVELS = ("numerical-model", "organ", "equipment", "protocol")


def compose(model: ComponentDef, equipment: ComponentDef, organ: ComponentDef,
            protocol: ComponentDef, case_overrides: Mapping[str, object] | None = None,
            rules: Sequence[CombinationRule] = ()) -> Composition:
    """Resolve every parameter to exactly one value.

    Precedence (highest wins): case overrides > protocol > equipment >
    organ > model default. Prompted parameters that end up with no value
    are returned as a demand list rather than an error.
    """
    by_level = {"numerical-model": model, "organ": organ,
                "equipment": equipment, "protocol": protocol}
    for level, comp in by_level.items():
        if comp.kind != level:
            raise CdmError(
                f"component {comp.id!r} has kind {comp.kind}, expected {level}")
    if rules and not combination_allowed(rules, model, equipment, organ, protocol):
        raise CompositionError(
            f"combination ({model.id}, {equipment.id}, {organ.id}, "
            f"{protocol.id}) is not allowed")

    resolved: dict[str, ResolvedParam] = {}
    prompted: set[str] = set()
    for level in _LEVELS:
        comp = by_level[level]
        for name, p in comp.param_map().items():
            if p.prompt:
                prompted.add(name)
            if p.value is None:
                resolved.setdefault(
                    name, ResolvedParam(name, None, p.unit, p.kind, level))
                continue
            prev = resolved.get(name)
            unit = p.unit or (prev.unit if prev else "")
            resolved[name] = ResolvedParam(name, p.value, unit, p.kind, level)

    for name, raw in (case_overrides or {}).items():
        prev = resolved.get(name)
        kind = prev.kind if prev else "real"
        unit = prev.unit if prev else ""
        resolved[name] = ResolvedParam(name, _coerce(kind, raw), unit, kind, "case")

    demands = tuple(sorted(
        n for n in prompted if resolved[n].value is None))
    ids = {level: by_level[level].id for level in _LEVELS}
    return Composition(resolved, demands, ids)


@dataclass(frozen=True)
class ProtocolState:
    """Runtime state of the protocol executor; a pure value.

    `events` describes what happened in the transition that produced this
    state (guard firings, step changes); replaying a signal log reproduces
    the identical state sequence.
    """

    steps: tuple[ProtocolStep, ...]
    step_index: int = 0
    elapsed_in_step: float = 0.0
    total_elapsed: float = 0.0
    setpoint: float = 0.0
    repeats_used: int = 0
    repeat_cap: int = DEFAULT_REPEAT_CAP
    terminal: bool = False
    events: tuple = ()

    @property
    def current_step(self) -> ProtocolStep | None:
        if self.terminal or self.step_index >= len(self.steps):
            return None
        return self.steps[self.step_index]


def initial_protocol_state(steps: Sequence[ProtocolStep],
                           repeat_cap: int = DEFAULT_REPEAT_CAP,
                           setpoints: Sequence[float] | None = None) -> ProtocolState:
    steps = tuple(steps)
    if setpoints is not None:
        steps = tuple(replace(s, setpoint=v, setpoint_param=None)
                      for s, v in zip(steps, setpoints))
    if not steps:
        return ProtocolState((), terminal=True,
                             events=(("terminate", "empty protocol"),))
    return ProtocolState(steps, setpoint=steps[0].setpoint,
                         repeat_cap=repeat_cap)


def _enter(state: ProtocolState, index: int, events: tuple,
           elapsed: float, total: float) -> ProtocolState:
    if index >= len(state.steps):
        return replace(state, step_index=index, elapsed_in_step=0.0,
                       total_elapsed=total, terminal=True,
                       events=events + (("terminate", "protocol complete"),),
                       repeats_used=0)
    return replace(state, step_index=index, elapsed_in_step=0.0,
                   total_elapsed=total, setpoint=state.steps[index].setpoint,
                   repeats_used=0, events=events)


def protocol_next(state: ProtocolState, signals: Mapping[str, float],
                  dt: float) -> ProtocolState:
    """Advance the protocol machine by dt with the current signal values.

    The first guard (declaration order) whose comparator is satisfied
    fires; otherwise the step ends when its max duration is reached.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if state.terminal:
        return replace(state, events=())
    step = state.steps[state.step_index]
    elapsed = state.elapsed_in_step + dt
    total = state.total_elapsed + dt
    sig = dict(signals)
    sig.setdefault("elapsed_time", elapsed)

    for g in step.guards:
        if not g.satisfied(sig):
            continue
        ev = ("guard", state.step_index, g.signal, g.op, g.threshold, g.action)
        if g.action == "advance":
            return _enter(state, state.step_index + 1, (ev,), elapsed, total)
        if g.action == "terminate":
            return replace(state, elapsed_in_step=elapsed, total_elapsed=total,
                           terminal=True,
                           events=(ev, ("terminate", "guard")))
        if g.action == "repeat":
            if state.repeats_used + 1 > state.repeat_cap:
                return _enter(state, state.step_index + 1,
                              (ev, ("repeat-cap", state.step_index)),
                              elapsed, total)
            scale = 1.0 if g.value is None else float(g.value)
            return replace(state, elapsed_in_step=0.0, total_elapsed=total,
                           setpoint=state.setpoint * scale,
                           repeats_used=state.repeats_used + 1, events=(ev,))
        # set_power: adjust the live setpoint, stay in the step
        return replace(state, elapsed_in_step=elapsed, total_elapsed=total,
                       setpoint=float(g.value), events=(ev,))

    if elapsed >= step.max_duration - 1e-12:
        return _enter(state, state.step_index + 1,
                      (("step-complete", state.step_index),), elapsed, total)
    return replace(state, elapsed_in_step=elapsed, total_elapsed=total,
                   events=())


# ---------------------------------------------------------------------------
# XML library loading

def _parse_param(el: ET.Element) -> Parameter:
    return Parameter(
        name=el.get("name", ""),
        kind=el.get("kind", "real"),
        unit=el.get("unit", ""),
        value=el.get("value"),
        prompt=el.get("prompt", "false").lower() == "true",
        overridable=el.get("overridable", "false").lower() == "true",
    )


def _parse_guard(el: ET.Element) -> Guard:
    value = el.get("value")
    return Guard(
        signal=el.get("signal", ""),
        op=el.get("op", ">="),
        threshold=float(el.get("threshold", "0")),
        action=el.get("action", "advance"),
        value=None if value is None else float(value),
    )


def parse_protocol_step(el: ET.Element) -> ProtocolStep:
    electrodes = None
    if el.get("anode") or el.get("cathode"):
        electrodes = (el.get("anode", ""), el.get("cathode", ""))
    max_duration = el.get("max_duration")
    return ProtocolStep(
        setpoint_kind=el.get("setpoint", "power"),
        setpoint=float(el.get("value", "0")),
        max_duration=float("inf") if max_duration is None else float(max_duration),
        guards=tuple(_parse_guard(g) for g in el.findall("guard")),
        electrodes=electrodes,
        setpoint_param=el.get("param"),
    )


def _parse_rows(text: str) -> tuple:
    rows = []
    for line in (text or "").strip().splitlines():
        line = line.strip()
        if line:
            rows.append(tuple(float(x) for x in line.split()))
    return tuple(rows)


def _parse_component(el: ET.Element) -> ComponentDef:
    data = {}
    for tbl in el.findall("table") + el.findall("points"):
        data[tbl.get("name", "")] = _parse_rows(tbl.text or "")
    return ComponentDef(
        id=el.get("id", ""),
        kind=el.get("kind", ""),
        parameters=tuple(_parse_param(p) for p in el.findall("param")),
        tags=tuple((el.get("tags") or "").split()),
        data=data,
        steps=tuple(parse_protocol_step(s) for s in el.findall("step")),
    )


@dataclass(frozen=True)
class ComponentLibrary:
    components: Mapping[str, ComponentDef]
    rules: tuple[CombinationRule, ...]

    def get(self, component_id: str, kind: str | None = None) -> ComponentDef:
        comp = self.components.get(component_id)
        if comp is None:
            raise CdmError(f"no component with id {component_id!r}")
        if kind is not None and comp.kind != kind:
            raise CdmError(
                f"component {component_id!r} is a {comp.kind}, wanted {kind}")
        return comp

    def by_kind(self, kind: str) -> list[ComponentDef]:
        return [c for c in self.components.values() if c.kind == kind]

    def validate(self) -> list[str]:
        """Exhaustive composition check; returns human-readable problems."""
        problems = []
        models = self.by_kind("numerical-model")
        equipment = self.by_kind("equipment")
        organs = self.by_kind("organ")
        protocols = self.by_kind("protocol")
        for m in models:
            for e in equipment:
                for o in organs:
                    for p in protocols:
                        try:
                            combination_allowed(self.rules, m, e, o, p)
                        except AmbiguityError as exc:
                            problems.append(str(exc))
        for comp in self.components.values():
            try:
                comp.param_map()
            except AmbiguityError as exc:
                problems.append(str(exc))
        return problems


def parse_library(text: str) -> ComponentLibrary:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise CdmError(f"library is not well-formed XML: {exc}") from exc
    if root.tag != "component_library":
        raise CdmError(f"expected <component_library>, got <{root.tag}>")
    components: dict[str, ComponentDef] = {}
    for el in root.findall("component"):
        comp = _parse_component(el)
        if comp.id in components:
            raise CdmError(f"duplicate component id {comp.id!r}")
        components[comp.id] = comp
    rules = tuple(
        CombinationRule(
            model=el.get("model", "*"),
            equipment=el.get("equipment", "*"),
            organ=el.get("organ", "*"),
            protocol=el.get("protocol", "*"),
            allowed=el.get("allowed", "true").lower() == "true",
        )
        for el in root.findall("rule"))
    return ComponentLibrary(components, rules)


def load_library(path: str) -> ComponentLibrary:
    with open(path) as fh:
        return parse_library(fh.read())
