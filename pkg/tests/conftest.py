import numpy as np
import pytest

from mictsim.grid import GridSpec
from mictsim.volio import write_volume

RFA_SCENARIO = """<scenario schema_version="1">
  <grid nx="{n}" ny="{n}" nz="{n}" spacing="{sp} {sp} {sp}" origin="0 0 0"/>
  <modality>RFA</modality>
  <composition model="rfa-gaussian" organ="liver" protocol="rfa-300s"/>
  <regions>
    <region id="1" name="liver" tissue="liver"/>
  </regions>
  <tissues>
    <tissue name="liver" inherit="organ"/>
  </tissues>
  <probes>
    <probe kind="RFA" equipment="{equipment}" tip="{tip} {tip} {tip}"
           direction="0 0 1"/>
  </probes>
  <parameters>
    <param name="applied_power" unit="W" value="{power}"/>
  </parameters>
  <numerics>
    <param name="time_step" unit="s" value="{dt}"/>
  </numerics>
  <protocol>
    <step setpoint="power" param="applied_power" max_duration="{duration}"/>
  </protocol>
  <output>
    <final field="temperature"/>
    <final field="dead_fraction"/>
  </output>
</scenario>
"""


def rfa_scenario_text(n=32, spacing=1.5, power=20.0, duration=120.0, dt=1.0,
                      equipment="rfa-umbrella-9"):
    tip = (n - 1) * spacing / 2.0
    return RFA_SCENARIO.format(n=n, sp=spacing, tip=tip, power=power,
                               duration=duration, dt=dt, equipment=equipment)


@pytest.fixture
def rfa_scenario_path(tmp_path):
    p = tmp_path / "rfa.xml"
    p.write_text(rfa_scenario_text())
    return str(p)


MWA_SCENARIO = """<scenario schema_version="1">
  <grid nx="40" ny="40" nz="40" spacing="1.5 1.5 1.5" origin="0 0 0"/>
  <modality>MWA</modality>
  <composition model="mwa-axisymmetric" organ="liver"/>
  <regions>
    <region id="1" name="liver" tissue="liver"/>
  </regions>
  <tissues>
    <tissue name="liver" inherit="organ"/>
  </tissues>
  <probes>
    <probe kind="MWA" equipment="mwa-2450" tip="29.25 29.25 37.5"
           direction="0 0 1"/>
  </probes>
  <protocol>
    <step setpoint="power" param="input_power" max_duration="12"/>
  </protocol>
  <parameters>
    <param name="input_power" unit="W" value="60"/>
  </parameters>
  <numerics>
    <param name="time_step" unit="s" value="2.0"/>
  </numerics>
  <output>
    <final field="temperature"/>
  </output>
</scenario>
"""


@pytest.fixture
def mwa_scenario_path(tmp_path):
    p = tmp_path / "mwa.xml"
    p.write_text(MWA_SCENARIO)
    return str(p)


CRYO_SCENARIO = """<scenario schema_version="1">
  <grid nx="24" ny="24" nz="24" spacing="1.5 1.5 1.5" origin="0 0 0"/>
  <modality>CRYO</modality>
  <composition model="cryo-enthalpy" organ="liver"/>
  <regions>
    <region id="1" name="liver" tissue="liver"/>
  </regions>
  <tissues>
    <tissue name="liver" inherit="organ"/>
  </tissues>
  <probes>
    <probe kind="CRYO" equipment="cryo-17g" tip="17.25 17.25 17.25"
           direction="0 0 1"/>
  </probes>
  <protocol>
    <step setpoint="coolant" value="1" max_duration="30"/>
    <step setpoint="coolant" value="0" max_duration="10"/>
    <step setpoint="coolant" value="1" max_duration="30"/>
  </protocol>
  <numerics>
    <param name="time_step" unit="s" value="2.0"/>
  </numerics>
  <output>
    <final field="min_temperature"/>
  </output>
</scenario>
"""

IRE_SCENARIO = """<scenario schema_version="1">
  <grid nx="30" ny="30" nz="30" spacing="1.5 1.5 1.5" origin="0 0 0"/>
  <modality>IRE</modality>
  <composition model="ire-potential" organ="liver"/>
  <regions>
    <region id="1" name="liver" tissue="liver"/>
  </regions>
  <tissues>
    <tissue name="liver" inherit="organ"/>
  </tissues>
  <probes>
    <probe kind="IRE-electrode" equipment="ire-monopolar" tip="16.5 22.5 32"
           direction="0 0 1"/>
    <probe kind="IRE-electrode" equipment="ire-monopolar" tip="28.5 22.5 32"
           direction="0 0 1"/>
  </probes>
  <protocol>
    <step setpoint="potential_difference" value="2000" anode="0" cathode="1"
          max_duration="2"/>
    <step setpoint="potential_difference" value="2000" anode="1" cathode="0"
          max_duration="2"/>
  </protocol>
  <numerics>
    <param name="time_step" unit="s" value="1.0"/>
  </numerics>
  <output>
    <final field="max_field"/>
  </output>
</scenario>
"""


@pytest.fixture
def cryo_scenario_path(tmp_path):
    p = tmp_path / "cryo.xml"
    p.write_text(CRYO_SCENARIO)
    return str(p)


@pytest.fixture
def ire_scenario_path(tmp_path):
    p = tmp_path / "ire.xml"
    p.write_text(IRE_SCENARIO)
    return str(p)


def write_ball_mask_volume(path, grid: GridSpec, center, radius, label=1):
    c = grid.voxel_centers()
    inside = np.linalg.norm(c - np.asarray(center), axis=1) <= radius
    labels = np.where(inside, np.uint8(label), np.uint8(0)).reshape(grid.dims)
    write_volume(path, grid, labels)
    return labels
