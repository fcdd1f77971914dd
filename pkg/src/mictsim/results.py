"""Run result persistence: one directory per run.

Layout (all writes atomic via temp-name + rename):

    <outdir>/
      scenario_resolved.xml    resolved scenario echoed for provenance
      events.jsonl             protocol event log, one JSON object per line
      result.json              run summary (durations, diagnostics)
      lesion.mhd / lesion.raw  predicted lesion mask
      lesion.obj               extracted lesion surface (mm)
      <field>.mhd/.raw         requested final fields
      snapshots/<field>_tNNNNN.mhd/.raw
"""

from __future__ import annotations

import json
import os

import numpy as np

from .grid import GridSpec
from .surfaces import TriangleMesh, write_obj
from .volio import write_volume


def _atomic_write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


class RunWriter:
    """Collects events and writes run artifacts into one directory."""

    def __init__(self, outdir: str):
        self.outdir = outdir
        os.makedirs(outdir, exist_ok=True)
        os.makedirs(os.path.join(outdir, "snapshots"), exist_ok=True)
        self.events: list[dict] = []

    def log_event(self, sim_t: float, kind: str, **detail) -> None:
        self.events.append({"t": round(float(sim_t), 9), "kind": kind, **detail})

    def write_snapshot(self, name: str, sim_t: float, grid: GridSpec,
                       values: np.ndarray) -> str:
        fname = f"{name}_t{sim_t:09.2f}.mhd"
        path = os.path.join(self.outdir, "snapshots", fname)
        write_volume(path, grid, values)
        return path

    def write_field(self, name: str, grid: GridSpec, values: np.ndarray,
                    element_type: str | None = None) -> str:
        path = os.path.join(self.outdir, f"{name}.mhd")
        write_volume(path, grid, values, element_type)
        return path

    def write_surface(self, name: str, mesh: TriangleMesh) -> str:
        path = os.path.join(self.outdir, f"{name}.obj")
        write_obj(path, mesh)
        return path

    def write_scenario_echo(self, xml_text: str) -> str:
        path = os.path.join(self.outdir, "scenario_resolved.xml")
        _atomic_write_text(path, xml_text)
        return path

    def finalize(self, summary: dict) -> None:
        lines = "".join(json.dumps(e) + "\n" for e in self.events)
        _atomic_write_text(os.path.join(self.outdir, "events.jsonl"), lines)
        _atomic_write_text(os.path.join(self.outdir, "result.json"),
                           json.dumps(summary, indent=2) + "\n")


def read_events(outdir: str) -> list[dict]:
    path = os.path.join(outdir, "events.jsonl")
    if not os.path.exists(path):
        return []
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_summary(outdir: str) -> dict:
    with open(os.path.join(outdir, "result.json")) as fh:
        return json.load(fh)
