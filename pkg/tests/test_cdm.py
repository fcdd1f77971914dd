import importlib.resources

import pytest

from mictsim.cdm import (
    AmbiguityError,
    CdmError,
    CombinationRule,
    ComponentDef,
    CompositionError,
    Guard,
    Parameter,
    ProtocolState,
    ProtocolStep,
    compose,
    initial_protocol_state,
    load_library,
    parse_library,
    protocol_next,
)


def fixture_library_path():
    return str(importlib.resources.files("mictsim") / "fixtures" / "library.xml")


@pytest.fixture(scope="module")
def library():
    return load_library(fixture_library_path())


def comp(id, kind, params=(), tags=("x",), **kw):
    return ComponentDef(id, kind, tuple(params), tuple(tags), **kw)


def quartet(**param_sets):
    """Build a minimal allowed (model, equipment, organ, protocol) tuple."""
    return (
        comp("m", "numerical-model", param_sets.get("model", ())),
        comp("e", "equipment", param_sets.get("equipment", ())),
        comp("o", "organ", param_sets.get("organ", ())),
        comp("p", "protocol", param_sets.get("protocol", ()),
             steps=(ProtocolStep("power", 10.0, max_duration=60.0),)),
    )


class TestParameter:
    def test_prompted_with_default_needs_overridable(self):
        with pytest.raises(CdmError):
            Parameter("p", value=1.0, prompt=True)
        Parameter("p", value=1.0, prompt=True, overridable=True)
        Parameter("p", prompt=True)

    def test_kind_coercion(self):
        assert Parameter("a", kind="integer", value="3").value == 3
        assert Parameter("b", kind="boolean", value="true").value is True
        assert Parameter("c", kind="enum", value="abc").value == "abc"


class TestCompose:
    def test_case_override_beats_organ(self):
        m, e, o, p = quartet(
            organ=[Parameter("thermal_conductivity", unit="W/m/K", value=0.512)])
        res = compose(m, e, o, p, {"thermal_conductivity": 0.6})
        assert res["thermal_conductivity"] == 0.6
        assert res.values["thermal_conductivity"].source == "case"

    def test_precedence_chain(self):
        m, e, o, p = quartet(
            model=[Parameter("x", value=1.0)],
            organ=[Parameter("x", value=2.0)],
            equipment=[Parameter("x", value=3.0)],
            protocol=[Parameter("x", value=4.0)])
        assert compose(m, e, o, p)["x"] == 4.0
        m2, e2, o2, p2 = quartet(
            model=[Parameter("x", value=1.0)],
            organ=[Parameter("x", value=2.0)],
            equipment=[Parameter("x", value=3.0)])
        assert compose(m2, e2, o2, p2)["x"] == 3.0

    def test_unresolved_prompt_becomes_demand(self):
        m, e, o, p = quartet(model=[Parameter("applied_power", unit="W",
                                              prompt=True)])
        res = compose(m, e, o, p)
        assert res.demands == ("applied_power",)
        res2 = compose(m, e, o, p, {"applied_power": 25.0})
        assert res2.demands == ()
        assert res2["applied_power"] == 25.0

    def test_disallowed_combination(self):
        m = comp("mwa-m", "numerical-model", tags=("MWA",))
        e = comp("cryo-e", "equipment", tags=("CRYO",))
        o = comp("o", "organ", tags=("liver",))
        p = comp("p", "protocol", tags=("MWA",),
                 steps=(ProtocolStep("power", 1.0, max_duration=1.0),))
        rules = (CombinationRule(model="MWA", equipment="MWA", allowed=True),
                 CombinationRule(model="MWA", equipment="CRYO", allowed=False))
        with pytest.raises(CompositionError):
            compose(m, e, o, p, rules=rules)

    def test_same_precedence_duplicate_is_ambiguous(self):
        m, e, o, p = quartet(organ=[Parameter("k", value=1.0),
                                    Parameter("k", value=2.0)])
        with pytest.raises(AmbiguityError):
            compose(m, e, o, p)

    def test_order_independence(self):
        params = [Parameter("a", value=1.0), Parameter("b", value=2.0)]
        m1, e1, o1, p1 = quartet(organ=params)
        m2, e2, o2, p2 = quartet(organ=list(reversed(params)))
        r1 = compose(m1, e1, o1, p1)
        r2 = compose(m2, e2, o2, p2)
        assert {n: rp.value for n, rp in r1.values.items()} == \
               {n: rp.value for n, rp in r2.values.items()}


class TestCombinationRules:
    def test_most_specific_wins(self):
        m = comp("m", "numerical-model", tags=("RFA",))
        e = comp("e", "equipment", tags=("RFA",))
        o = comp("o", "organ", tags=("liver",))
        p = comp("p", "protocol", tags=("RFA",),
                 steps=(ProtocolStep("power", 1.0, max_duration=1.0),))
        rules = (CombinationRule(allowed=False),  # wildcard deny
                 CombinationRule(model="RFA", equipment="RFA", allowed=True))
        assert compose(m, e, o, p, rules=rules)  # no exception

    def test_conflicting_equal_specificity(self):
        m = comp("m", "numerical-model", tags=("RFA",))
        e = comp("e", "equipment", tags=("RFA",))
        o = comp("o", "organ", tags=("liver",))
        p = comp("p", "protocol", tags=("RFA",),
                 steps=(ProtocolStep("power", 1.0, max_duration=1.0),))
        rules = (CombinationRule(model="RFA", allowed=True),
                 CombinationRule(equipment="RFA", allowed=False))
        with pytest.raises(AmbiguityError):
            compose(m, e, o, p, rules=rules)

    def test_no_rule_means_disallowed(self):
        m, e, o, p = quartet()
        with pytest.raises(CompositionError):
            compose(m, e, o, p, rules=(CombinationRule(model="ZZZ"),))


class TestProtocolStepInvariants:
    def test_needs_guard_or_finite_duration(self):
        with pytest.raises(CdmError):
            ProtocolStep("power", 1.0)
        ProtocolStep("power", 1.0, max_duration=10.0)
        ProtocolStep("power", 1.0, guards=(
            Guard("elapsed_time", ">=", 5.0, "advance"),))

    def test_ire_electrodes_must_differ(self):
        with pytest.raises(CdmError):
            ProtocolStep("potential_difference", 1500.0, max_duration=1.0,
                         electrodes=("0", "0"))

    def test_nonpositive_duration_rejected(self):
        with pytest.raises(CdmError):
            ProtocolStep("power", 1.0, max_duration=0.0)


class TestProtocolMachine:
    def test_single_step_terminates_at_max_duration(self):
        steps = (ProtocolStep("power", 20.0, max_duration=60.0),)
        st = initial_protocol_state(steps)
        t = 0.0
        while not st.terminal:
            st = protocol_next(st, {}, 1.0)
            t += 1.0
            assert t < 1000
        assert st.total_elapsed == pytest.approx(60.0)

    def test_temperature_guard_crossing_time(self):
        # T(t) = 310 + 2t crosses 373 at t = 31.5; must advance within one dt
        steps = (ProtocolStep("power", 20.0, max_duration=600.0, guards=(
            Guard("max_probe_temperature", ">=", 373.0, "advance"),)),)
        dt = 0.5
        st = initial_protocol_state(steps)
        t = 0.0
        while not st.terminal:
            t += dt
            st = protocol_next(st, {"max_probe_temperature": 310.0 + 2.0 * t}, dt)
        assert abs(st.total_elapsed - 31.5) <= dt + 1e-12

    def test_impedance_repeat_halves_power_and_resets(self):
        steps = (ProtocolStep("power", 40.0, max_duration=60.0, guards=(
            Guard("impedance", ">=", 300.0, "repeat", value=0.5),)),)
        st = initial_protocol_state(steps)
        # synthetic impedance trace crossing 300 at t = 10 s
        t = 0.0
        dt = 1.0
        while t < 9.5:
            t += dt
            st = protocol_next(st, {"impedance": 100.0 + 10.0 * t}, dt)
            assert st.setpoint == 40.0
        t += dt
        st = protocol_next(st, {"impedance": 100.0 + 20.0 * t}, dt)
        assert st.setpoint == pytest.approx(20.0)
        assert st.elapsed_in_step == 0.0
        assert not st.terminal

    def test_set_power_keeps_step_running(self):
        steps = (ProtocolStep("power", 40.0, max_duration=30.0, guards=(
            Guard("max_probe_temperature", ">=", 360.0, "set_power", value=10.0),)),)
        st = initial_protocol_state(steps)
        st = protocol_next(st, {"max_probe_temperature": 365.0}, 1.0)
        assert st.setpoint == 10.0
        assert st.elapsed_in_step == pytest.approx(1.0)

    def test_terminate_action(self):
        steps = (ProtocolStep("power", 40.0, max_duration=9e9, guards=(
            Guard("impedance", ">=", 500.0, "terminate"),)),)
        st = initial_protocol_state(steps)
        st = protocol_next(st, {"impedance": 600.0}, 1.0)
        assert st.terminal

    def test_repeat_cap_guarantees_termination(self):
        steps = (ProtocolStep("power", 40.0, max_duration=5.0, guards=(
            Guard("impedance", ">=", 0.0, "repeat"),)),)  # always fires
        st = initial_protocol_state(steps, repeat_cap=10)
        n = 0
        while not st.terminal:
            st = protocol_next(st, {"impedance": 1.0}, 1.0)
            n += 1
            assert n < 100
        assert n == 11  # 10 repeats + advance on the capped attempt

    def test_markovian_replay(self):
        import numpy as np
        rng = np.random.default_rng(8)
        steps = (
            ProtocolStep("power", 30.0, max_duration=20.0, guards=(
                Guard("max_probe_temperature", ">=", 350.0, "advance"),)),
            ProtocolStep("power", 15.0, max_duration=15.0, guards=(
                Guard("impedance", ">=", 250.0, "repeat", value=0.5),)),
        )
        log = [{"max_probe_temperature": float(310 + 60 * rng.random()),
                "impedance": float(100 + 200 * rng.random())}
               for _ in range(60)]

        def run():
            st = initial_protocol_state(steps)
            seq = [st]
            for sig in log:
                if st.terminal:
                    break
                st = protocol_next(st, sig, 0.7)
                seq.append(st)
            return seq

        s1, s2 = run(), run()
        assert s1 == s2

    def test_total_time_bounded(self):
        steps = (ProtocolStep("power", 40.0, max_duration=5.0, guards=(
            Guard("impedance", ">=", 0.0, "repeat"),)),
            ProtocolStep("power", 20.0, max_duration=7.0),)
        st = initial_protocol_state(steps)
        while not st.terminal:
            st = protocol_next(st, {"impedance": 1.0}, 1.0)
        bound = sum(s.max_duration for s in steps) * (1 + st.repeat_cap)
        assert st.total_elapsed <= bound

    def test_empty_protocol_is_terminal(self):
        st = initial_protocol_state(())
        assert st.terminal

    def test_nonpositive_dt_rejected(self):
        st = initial_protocol_state((ProtocolStep("power", 1.0, max_duration=1.0),))
        with pytest.raises(ValueError):
            protocol_next(st, {}, 0.0)


class TestLibrary:
    def test_fixture_library_loads_and_validates(self, library):
        assert library.validate() == []
        assert library.get("rfa-gaussian").kind == "numerical-model"
        assert len(library.by_kind("organ")) >= 2

    def test_fixture_composition_demands_power(self, library):
        res = compose(library.get("rfa-gaussian"),
                      library.get("rfa-umbrella-9"),
                      library.get("liver"),
                      library.get("rfa-300s"),
                      rules=library.rules)
        assert "applied_power" in res.demands

    def test_cryo_equipment_with_mwa_model_disallowed(self, library):
        with pytest.raises(CompositionError):
            compose(library.get("mwa-axisymmetric"),
                    library.get("cryo-17g"),
                    library.get("liver"),
                    library.get("mwa-300s"),
                    rules=library.rules)

    def test_equipment_tables_present(self, library):
        eq = library.get("mwa-2450")
        rows = eq.data["em_params"]
        assert len(rows) >= 3
        temps = [r[0] for r in rows]
        assert temps == sorted(temps)
        tines = library.get("rfa-umbrella-9").data["tine_offsets"]
        assert len(tines) == 9

    def test_duplicate_component_id_rejected(self):
        xml = """<component_library schema_version="1">
          <component id="a" kind="organ" tags="x"/>
          <component id="a" kind="organ" tags="x"/>
        </component_library>"""
        with pytest.raises(CdmError):
            parse_library(xml)
