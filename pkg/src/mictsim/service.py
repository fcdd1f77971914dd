"""HTTP planning service: case management, volume upload, probe placement,
asynchronous simulation jobs, slice rendering and validation.

The case store is a directory tree under the data root; runs execute on a
bounded thread pool (default 2 workers) and are polled via /jobs/{id}.
Volumes travel as single-buffer MetaImage (text header with
``ElementDataFile = LOCAL`` followed by the little-endian payload); on disk
the two-file .mhd/.raw layout is kept. Slices are rendered server-side to
PNG with client-chosen window centre/width; lesion contours are also
available as polyline JSON for thin clients.
"""

from __future__ import annotations

import io
import json
import os
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from PIL import Image

from . import cdm, scenario as scen
from .grid import GridSpec, LabelMask, Probe, ScalarField
from .runner import RunnerError, RunRequest, default_library_path, run
from .surfaces import extract_isosurface
from .validation import ValidationError, minimize_alpha, report_to_dict
from .volio import (VolumeError, read_volume, volume_from_bytes,
                    volume_to_bytes, write_volume)

VOLUME_ROLES = ("image", "organ", "tumor", "vessels", "tace",
                "segmented-lesion")
PLANES = ("axial", "sagittal", "coronal")

JOB_STATES = ("queued", "running", "done", "failed")


@dataclass
class Job:
    id: str
    case_id: str
    state: str = "queued"
    progress: float = 0.0
    error: str | None = None
    run_dir: str | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)

    def to_dict(self) -> dict:
        return {"id": self.id, "case_id": self.case_id, "state": self.state,
                "progress": round(self.progress, 6), "error": self.error,
                "run_id": self.id if self.run_dir else None}

    def transition(self, new_state: str) -> None:
        legal = {"queued": ("running",), "running": ("done", "failed")}
        with self.lock:
            if new_state not in legal.get(self.state, ()):
                raise HTTPException(
                    409, f"illegal job transition {self.state} -> {new_state}")
            self.state = new_state

    def bump_progress(self, fraction: float) -> None:
        with self.lock:
            self.progress = max(self.progress, min(1.0, fraction))


class CaseStore:
    """Directory-tree case persistence with per-case locks."""

    def __init__(self, root: str):
        self.root = root
        os.makedirs(os.path.join(root, "cases"), exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def lock(self, case_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(case_id, threading.Lock())

    def case_dir(self, case_id: str) -> str:
        return os.path.join(self.root, "cases", case_id)

    def exists(self, case_id: str) -> bool:
        return os.path.isfile(os.path.join(self.case_dir(case_id), "case.json"))

    def create(self, label: str) -> dict:
        case_id = uuid.uuid4().hex[:12]
        d = self.case_dir(case_id)
        os.makedirs(os.path.join(d, "volumes"))
        os.makedirs(os.path.join(d, "runs"))
        doc = {"id": case_id, "label": label, "probes": [], "volumes": {},
               "runs": []}
        self._write(case_id, doc)
        return doc

    def list_ids(self) -> list:
        base = os.path.join(self.root, "cases")
        return sorted(d for d in os.listdir(base)
                      if os.path.isfile(os.path.join(base, d, "case.json")))

    def read(self, case_id: str) -> dict:
        if not self.exists(case_id):
            raise HTTPException(404, f"unknown case {case_id}")
        with open(os.path.join(self.case_dir(case_id), "case.json")) as fh:
            return json.load(fh)

    def _write(self, case_id: str, doc: dict) -> None:
        path = os.path.join(self.case_dir(case_id), "case.json")
        tmp = f"{path}.tmp{os.getpid()}"
        with open(tmp, "w") as fh:
            json.dump(doc, fh, indent=2)
        os.replace(tmp, path)

    def update(self, case_id: str, mutate) -> dict:
        with self.lock(case_id):
            doc = self.read(case_id)
            mutate(doc)
            self._write(case_id, doc)
            return doc

    def volume_path(self, case_id: str, role: str) -> str:
        return os.path.join(self.case_dir(case_id), "volumes", f"{role}.mhd")

    def run_dir(self, case_id: str, run_id: str) -> str:
        d = os.path.join(self.case_dir(case_id), "runs", run_id)
        if not os.path.isdir(d):
            raise HTTPException(404, f"unknown run {run_id}")
        return d


def _component_payload(comp: cdm.ComponentDef) -> dict:
    return {
        "id": comp.id,
        "kind": comp.kind,
        "tags": list(comp.tags),
        "parameters": [{
            "name": p.name, "kind": p.kind, "unit": p.unit,
            "value": p.value, "prompt": p.prompt,
        } for p in comp.parameters],
        "prompted": [p.name for p in comp.parameters
                     if p.prompt and p.value is None],
        "tables": {name: [list(row) for row in rows]
                   for name, rows in comp.data.items()},
        "steps": [{
            "setpoint": s.setpoint_kind, "value": s.setpoint,
            "param": s.setpoint_param, "max_duration": s.max_duration,
            "electrodes": list(s.electrodes) if s.electrodes else None,
        } for s in comp.steps],
    }


_MODALITY_FOR_PROBE = {"RFA": "RFA", "MWA": "MWA", "CRYO": "CRYO",
                       "IRE-electrode": "IRE"}
_ROLE_LABELS = {"organ": 1, "tumor": 2, "vessels": 3, "tace": 4}


def create_app(data_root: str, workers: int = 2,
               library_path: str | None = None) -> FastAPI:
    app = FastAPI(title="mictsim planning service")
    store = CaseStore(data_root)
    library = cdm.load_library(library_path or default_library_path())
    jobs: dict[str, Job] = {}
    pool = ThreadPoolExecutor(max_workers=workers)

    # ------------------------------------------------------------- cases

    @app.post("/cases", status_code=201)
    async def create_case(request: Request):
        body = {}
        raw = await request.body()
        if raw:
            try:
                body = json.loads(raw)
            except json.JSONDecodeError:
                raise HTTPException(422, "body must be JSON")
        return store.create(str(body.get("label", "unnamed")))

    @app.get("/cases")
    def list_cases():
        return [store.read(cid) for cid in store.list_ids()]

    @app.get("/cases/{case_id}")
    def get_case(case_id: str):
        return store.read(case_id)

    # ----------------------------------------------------------- volumes

    @app.put("/cases/{case_id}/volumes/{role}")
    async def put_volume(case_id: str, role: str, request: Request):
        if role not in VOLUME_ROLES:
            raise HTTPException(404, f"unknown volume role {role}")
        store.read(case_id)
        payload = await request.body()
        try:
            grid, values = volume_from_bytes(payload)
        except VolumeError as exc:
            raise HTTPException(422, f"invalid volume: {exc}")
        write_volume(store.volume_path(case_id, role), grid, values)

        def mutate(doc):
            doc["volumes"][role] = {
                "dims": list(grid.dims), "spacing": list(grid.spacing),
                "origin": list(grid.origin)}
        store.update(case_id, mutate)
        return {"role": role, "dims": list(grid.dims),
                "spacing": list(grid.spacing), "origin": list(grid.origin)}

    @app.get("/cases/{case_id}/volumes/{role}")
    def get_volume(case_id: str, role: str):
        doc = store.read(case_id)
        if role not in doc["volumes"]:
            raise HTTPException(404, f"case has no {role} volume")
        grid, values = read_volume(store.volume_path(case_id, role))
        return Response(volume_to_bytes(grid, values),
                        media_type="application/octet-stream")

    # ------------------------------------------------------------ probes

    @app.put("/cases/{case_id}/probes")
    async def put_probes(case_id: str, request: Request):
        store.read(case_id)
        try:
            body = json.loads(await request.body())
        except json.JSONDecodeError:
            raise HTTPException(422, "body must be JSON")
        if not isinstance(body, list):
            raise HTTPException(422, "expected a JSON list of probes")
        probes = []
        for i, p in enumerate(body):
            try:
                d = np.asarray(p["direction"], dtype=float)
                d = d / np.linalg.norm(d)
                probes.append({
                    "tip": [float(x) for x in p["tip"]],
                    "direction": [float(x) for x in d],
                    "kind": str(p["kind"]),
                    "equipment_id": str(p.get("equipment_id", "")),
                })
                Probe(tuple(probes[-1]["tip"]), tuple(probes[-1]["direction"]),
                      probes[-1]["kind"], probes[-1]["equipment_id"])
            except (KeyError, ValueError, TypeError) as exc:
                raise HTTPException(422, f"probe {i}: {exc}")

        def mutate(doc):
            doc["probes"] = probes
        doc = store.update(case_id, mutate)
        return {"probes": doc["probes"]}

    # --------------------------------------------------------------- cdm

    @app.get("/cdm/{kind}")
    def list_components(kind: str):
        kind_map = {"models": "numerical-model", "equipment": "equipment",
                    "organs": "organ", "protocols": "protocol"}
        if kind not in kind_map:
            raise HTTPException(404, f"unknown component family {kind}")
        return [_component_payload(c) for c in library.by_kind(kind_map[kind])]

    # --------------------------------------------------------------- runs

    def _build_scenario(case_id: str, doc: dict, body: dict) -> scen.ScenarioDoc:
        if not doc["probes"]:
            raise HTTPException(422, "case has no probes")
        probe_kind = doc["probes"][0]["kind"]
        modality = body.get("modality") or _MODALITY_FOR_PROBE.get(probe_kind)
        if modality not in scen.MODALITIES:
            raise HTTPException(422, f"unknown modality {modality}")

        grid = None
        mask_path = None
        regions = []
        labels = None
        for role in ("organ", "image"):
            if role in doc["volumes"]:
                meta = doc["volumes"][role]
                grid = GridSpec(tuple(meta["dims"]), tuple(meta["spacing"]),
                                tuple(meta["origin"]))
                break
        if grid is None:
            raise HTTPException(422, "upload an image or organ volume first")

        # compose a region mask from whatever segmentations exist
        mask_labels = np.zeros(grid.dims, dtype=np.uint8)
        for role, label in _ROLE_LABELS.items():
            if role not in doc["volumes"]:
                continue
            g2, values = read_volume(store.volume_path(case_id, role))
            if g2.dims != grid.dims:
                raise HTTPException(
                    422, f"{role} volume dims {g2.dims} do not match {grid.dims}")
            mask_labels[values > 0] = label
            regions.append(scen.RegionBinding(
                label, role, "organ-tissue", tace=(role == "tace")))
        if not regions:
            mask_labels[:] = 1
            regions = [scen.RegionBinding(1, "organ", "organ-tissue", False)]

        run_id = body.get("_run_id") or uuid.uuid4().hex[:12]
        run_dir = os.path.join(store.case_dir(case_id), "runs", run_id)
        os.makedirs(run_dir, exist_ok=True)
        mask_path = os.path.join(run_dir, "regions.mhd")
        write_volume(mask_path, grid, mask_labels)

        probes = tuple(
            Probe(tuple(p["tip"]), tuple(p["direction"]), p["kind"],
                  p.get("equipment_id", ""))
            for p in doc["probes"])

        overrides = {
            str(k): scen.ParamValue(v, scen.EXPECTED_UNITS.get(str(k), ""))
            for k, v in (body.get("parameters") or {}).items()}
        numerics = {
            str(k): scen.ParamValue(v, scen.EXPECTED_UNITS.get(str(k), ""))
            for k, v in (body.get("numerics") or {}).items()}

        defaults = {"RFA": ("rfa-gaussian", "rfa-300s"),
                    "MWA": ("mwa-axisymmetric", "mwa-300s"),
                    "CRYO": ("cryo-enthalpy", "cryo-double-freeze"),
                    "IRE": ("ire-potential", "ire-crossfire")}
        model_id = body.get("model") or defaults[modality][0]
        protocol_id = body.get("protocol") or defaults[modality][1]
        organ_id = body.get("organ") or "liver"

        protocol_steps = None
        if body.get("protocol_steps"):
            steps = []
            for i, s in enumerate(body["protocol_steps"]):
                try:
                    electrodes = None
                    if s.get("anode") is not None or s.get("cathode") is not None:
                        electrodes = (str(s.get("anode")), str(s.get("cathode")))
                    guards = tuple(
                        cdm.Guard(g["signal"], g.get("op", ">="),
                                  float(g["threshold"]), g.get("action", "advance"),
                                  None if g.get("value") is None
                                  else float(g["value"]))
                        for g in s.get("guards", ()))
                    steps.append(cdm.ProtocolStep(
                        setpoint_kind=s.get("setpoint", "power"),
                        setpoint=float(s.get("value", 0.0)),
                        max_duration=float(s.get("max_duration", np.inf)),
                        guards=guards, electrodes=electrodes,
                        setpoint_param=s.get("param")))
                except (KeyError, ValueError, TypeError, cdm.CdmError) as exc:
                    raise HTTPException(422, f"protocol step {i}: {exc}")
            protocol_steps = tuple(steps)
            protocol_id = None

        return scen.ScenarioDoc(
            schema_version="1", modality=modality, grid=grid,
            model_id=model_id, organ_id=organ_id, protocol_id=protocol_id,
            library_path=None, mask_path=mask_path, regions=tuple(regions),
            tissues={"organ-tissue": scen.TissueSpec("organ-tissue", {},
                                                     inherit="organ")},
            probes=probes, protocol_steps=protocol_steps, overrides=overrides,
            numerics=numerics,
            outputs=scen.OutputRequests(
                snapshots=(), finals=("temperature", "dead_fraction")
                if modality in ("RFA", "MWA")
                else (("min_temperature",) if modality == "CRYO"
                      else ("max_field",))),
            impedance_trace=None)

    @app.post("/cases/{case_id}/runs", status_code=202)
    async def start_run(case_id: str, request: Request):
        doc = store.read(case_id)
        raw = await request.body()
        body = {}
        if raw:
            try:
                body = json.loads(raw)
            except json.JSONDecodeError:
                raise HTTPException(422, "body must be JSON")
        job_id = uuid.uuid4().hex[:12]
        body["_run_id"] = job_id
        sdoc = _build_scenario(case_id, doc, body)

        # dry composition check so validation errors surface synchronously
        from .runner import _prepare
        try:
            _prepare(sdoc, store.case_dir(case_id))
        except (RunnerError, cdm.CdmError) as exc:
            raise HTTPException(422, str(exc))
        except scen.ScenarioValidationError as exc:
            raise HTTPException(
                422, json.dumps([str(f) for f in exc.failures]))

        run_dir = os.path.join(store.case_dir(case_id), "runs", job_id)
        job = Job(id=job_id, case_id=case_id, run_dir=run_dir)
        jobs[job_id] = job

        def execute():
            job.transition("running")
            try:
                result = run(RunRequest(
                    scenario=sdoc, outdir=run_dir,
                    progress=job.bump_progress))
                job.bump_progress(1.0)
                job.transition("done")

                def mutate(d):
                    if job_id not in d["runs"]:
                        d["runs"].append(job_id)
                store.update(case_id, mutate)
                del result
            except Exception as exc:  # noqa: BLE001 - job boundary
                job.error = str(exc)
                job.transition("failed")

        pool.submit(execute)
        return {"job_id": job_id, "run_id": job_id}

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        job = jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id}")
        return job.to_dict()

    @app.get("/cases/{case_id}/runs/{run_id}")
    def get_run(case_id: str, run_id: str):
        store.read(case_id)
        run_dir = store.run_dir(case_id, run_id)
        summary_path = os.path.join(run_dir, "result.json")
        if not os.path.isfile(summary_path):
            raise HTTPException(404, "run has no result yet")
        with open(summary_path) as fh:
            return json.load(fh)

    @app.get("/cases/{case_id}/runs/{run_id}/surface")
    def get_surface(case_id: str, run_id: str):
        run_dir = store.run_dir(case_id, run_id)
        path = os.path.join(run_dir, "lesion.obj")
        if not os.path.isfile(path):
            raise HTTPException(404, "no lesion surface")
        with open(path) as fh:
            return Response(fh.read(), media_type="text/plain")

    @app.get("/cases/{case_id}/runs/{run_id}/lesion-mask")
    def get_lesion_mask(case_id: str, run_id: str):
        run_dir = store.run_dir(case_id, run_id)
        path = os.path.join(run_dir, "lesion.mhd")
        if not os.path.isfile(path):
            raise HTTPException(404, "no lesion mask")
        grid, values = read_volume(path)
        return Response(volume_to_bytes(grid, values),
                        media_type="application/octet-stream")

    # -------------------------------------------------------------- slices

    def _load_slice(case_id: str, run_id: str, plane: str, index: int,
                    fieldname: str):
        run_dir = store.run_dir(case_id, run_id)
        path = os.path.join(run_dir, f"{fieldname}.mhd")
        if not os.path.isfile(path):
            raise HTTPException(404, f"run has no {fieldname} field")
        grid, values = read_volume(path)
        return grid, _plane_slice(values, plane, index)

    def _plane_slice(values: np.ndarray, plane: str, index: int) -> np.ndarray:
        if plane == "axial":
            if not 0 <= index < values.shape[2]:
                raise HTTPException(404, "slice index out of range")
            return values[:, :, index]
        if plane == "sagittal":
            if not 0 <= index < values.shape[0]:
                raise HTTPException(404, "slice index out of range")
            return values[index, :, :]
        if plane == "coronal":
            if not 0 <= index < values.shape[1]:
                raise HTTPException(404, "slice index out of range")
            return values[:, index, :]
        raise HTTPException(404, f"unknown plane {plane}")

    @app.get("/cases/{case_id}/runs/{run_id}/slice")
    def get_slice(case_id: str, run_id: str, plane: str = "axial",
                  index: int = 0, window: str = "310,40",
                  overlay: str | None = None, base: str = "temperature"):
        if plane not in PLANES:
            raise HTTPException(404, f"unknown plane {plane}")
        doc = store.read(case_id)
        run_dir = store.run_dir(case_id, run_id)
        # base image: case image volume if present, else a run field
        if "image" in doc["volumes"]:
            grid, values = read_volume(store.volume_path(case_id, "image"))
            sl = _plane_slice(values.astype(float), plane, index)
        else:
            grid, sl = _load_slice(case_id, run_id, plane, index, base)
            sl = sl.astype(float)
        try:
            center, width = (float(x) for x in window.split(","))
        except ValueError:
            raise HTTPException(422, "window must be 'center,width'")
        if width <= 0:
            raise HTTPException(422, "window width must be > 0")
        lo = center - width / 2.0
        gray = np.clip((sl - lo) / width * 255.0, 0.0, 255.0).astype(np.uint8)
        rgb = np.stack([gray] * 3, axis=-1)

        if overlay == "lesion":
            path = os.path.join(run_dir, "lesion.mhd")
            if os.path.isfile(path):
                _, lesion = read_volume(path)
                lsl = _plane_slice(lesion, plane, index) > 0
                from scipy.ndimage import binary_erosion
                edge = lsl & ~binary_erosion(lsl, border_value=0)
                rgb[edge] = (255, 48, 48)
        elif overlay == "temp":
            _, tsl = _load_slice(case_id, run_id, plane, index, "temperature")
            hot = np.clip((tsl - 315.0) / 60.0, 0.0, 1.0)
            rgb = rgb.astype(float)
            rgb[..., 0] = rgb[..., 0] * (1 - hot) + 255.0 * hot
            rgb[..., 2] = rgb[..., 2] * (1 - hot)
            rgb = rgb.astype(np.uint8)
        elif overlay is not None:
            raise HTTPException(422, f"unknown overlay {overlay}")

        # image rows are the second in-plane axis
        img = Image.fromarray(np.transpose(rgb, (1, 0, 2)))
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return Response(buf.getvalue(), media_type="image/png")

    @app.get("/cases/{case_id}/runs/{run_id}/contours")
    def get_contours(case_id: str, run_id: str, plane: str = "axial",
                     index: int = 0, which: str = "lesion"):
        if plane not in PLANES:
            raise HTTPException(404, f"unknown plane {plane}")
        run_dir = store.run_dir(case_id, run_id)
        if which == "lesion":
            path = os.path.join(run_dir, "lesion.mhd")
            if not os.path.isfile(path):
                raise HTTPException(404, "no lesion mask")
            grid, values = read_volume(path)
        elif which == "segmented-lesion":
            doc = store.read(case_id)
            if "segmented-lesion" not in doc["volumes"]:
                raise HTTPException(404, "case has no segmented lesion")
            grid, values = read_volume(
                store.volume_path(case_id, "segmented-lesion"))
        else:
            raise HTTPException(404, f"unknown contour source {which}")
        sl = _plane_slice((values > 0).astype(float), plane, index)
        from skimage.measure import find_contours
        polylines = []
        axes = {"axial": (0, 1), "sagittal": (1, 2), "coronal": (0, 2)}[plane]
        for contour in find_contours(sl, 0.5):
            pts = []
            for u, v in contour:
                mm_u = grid.origin[axes[0]] + u * grid.spacing[axes[0]]
                mm_v = grid.origin[axes[1]] + v * grid.spacing[axes[1]]
                pts.append([round(float(mm_u), 4), round(float(mm_v), 4)])
            polylines.append(pts)
        return {"plane": plane, "index": index, "which": which,
                "polylines": polylines}

    # ---------------------------------------------------------- validation

    @app.post("/cases/{case_id}/runs/{run_id}/validate")
    def validate_run(case_id: str, run_id: str):
        doc = store.read(case_id)
        run_dir = store.run_dir(case_id, run_id)
        if "segmented-lesion" not in doc["volumes"]:
            raise HTTPException(422, "upload a segmented-lesion volume first")
        lesion_path = os.path.join(run_dir, "lesion.mhd")
        if not os.path.isfile(lesion_path):
            raise HTTPException(404, "run has no lesion mask")
        sim_grid, sim_values = read_volume(lesion_path)
        seg_grid, seg_values = read_volume(
            store.volume_path(case_id, "segmented-lesion"))
        if seg_grid.dims != sim_grid.dims:
            raise HTTPException(422, "segmented lesion grid differs from run grid")
        sim_mask = LabelMask(sim_grid, (sim_values > 0).astype(np.uint8),
                             {1: "lesion"})
        seg_mask = LabelMask(sim_grid, (seg_values > 0).astype(np.uint8),
                             {1: "lesion"})
        sim_surface = extract_isosurface(
            ScalarField(sim_grid, (sim_values > 0).astype(float)), 0.5)
        seg_surface = extract_isosurface(
            ScalarField(sim_grid, (seg_values > 0).astype(float)), 0.5)
        try:
            report = minimize_alpha(seg_surface, sim_surface,
                                    segmented_mask=seg_mask,
                                    simulated_mask=sim_mask)
        except ValidationError as exc:
            raise HTTPException(422, str(exc))
        payload = report_to_dict(report)
        payload["simulated_volume_ml"] = sim_mask.volume_ml()
        payload["segmented_volume_ml"] = seg_mask.volume_ml()
        out = os.path.join(run_dir, "validation.json")
        with open(out, "w") as fh:
            json.dump(payload, fh, indent=2)
        return payload

    return app
