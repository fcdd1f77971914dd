import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from mictsim.grid import GridSpec
from mictsim.service import create_app
from mictsim.volio import volume_from_bytes, volume_to_bytes


@pytest.fixture
def client(tmp_path):
    app = create_app(str(tmp_path / "data"), workers=2)
    with TestClient(app) as c:
        yield c


def small_grid():
    return GridSpec((20, 20, 20), (2.0, 2.0, 2.0))


def upload_uniform_organ(client, case_id, grid=None):
    grid = grid or small_grid()
    organ = np.ones(grid.dims, dtype=np.uint8)
    r = client.put(f"/cases/{case_id}/volumes/organ",
                   content=volume_to_bytes(grid, organ))
    assert r.status_code == 200
    return grid


def place_single_rfa_probe(client, case_id, tip=(19.0, 19.0, 19.0)):
    r = client.put(f"/cases/{case_id}/probes", json=[{
        "tip": list(tip), "direction": [0, 0, 1], "kind": "RFA",
        "equipment_id": "rfa-single-tine"}])
    assert r.status_code == 200
    return r.json()["probes"]


def wait_for_job(client, job_id, timeout=120.0):
    t0 = time.time()
    last = None
    progresses = []
    while time.time() - t0 < timeout:
        r = client.get(f"/jobs/{job_id}")
        assert r.status_code == 200
        last = r.json()
        progresses.append(last["progress"])
        if last["state"] in ("done", "failed"):
            return last, progresses
        time.sleep(0.2)
    raise AssertionError(f"job stuck: {last}")


def short_rfa_body(power=10.0, duration=20.0, dt=2.0):
    return {
        "parameters": {"applied_power": power},
        "numerics": {"time_step": dt},
        "protocol_steps": [{"setpoint": "power", "param": "applied_power",
                            "max_duration": duration}],
    }


class TestCases:
    def test_create_and_get_roundtrip(self, client):
        r = client.post("/cases", json={"label": "patient-7"})
        assert r.status_code == 201
        cid = r.json()["id"]
        got = client.get(f"/cases/{cid}").json()
        assert got["label"] == "patient-7"
        assert got["probes"] == []
        assert got["runs"] == []

    def test_unknown_case_404(self, client):
        assert client.get("/cases/nope").status_code == 404

    def test_volume_upload_validates_header(self, client):
        cid = client.post("/cases", json={}).json()["id"]
        r = client.put(f"/cases/{cid}/volumes/organ", content=b"garbage")
        assert r.status_code == 422

    def test_volume_roundtrip(self, client):
        cid = client.post("/cases", json={}).json()["id"]
        grid = small_grid()
        rng = np.random.default_rng(1)
        values = rng.random(grid.dims).astype(np.float32)
        client.put(f"/cases/{cid}/volumes/image",
                   content=volume_to_bytes(grid, values))
        back = client.get(f"/cases/{cid}/volumes/image")
        g2, v2 = volume_from_bytes(back.content)
        assert g2 == grid
        assert np.array_equal(v2, values)

    def test_unknown_volume_role_404(self, client):
        cid = client.post("/cases", json={}).json()["id"]
        r = client.put(f"/cases/{cid}/volumes/brain", content=b"x")
        assert r.status_code == 404

    def test_probes_roundtrip(self, client):
        cid = client.post("/cases", json={}).json()["id"]
        placed = place_single_rfa_probe(client, cid)
        got = client.get(f"/cases/{cid}").json()["probes"]
        assert got == placed
        assert got[0]["kind"] == "RFA"

    def test_invalid_probe_422(self, client):
        cid = client.post("/cases", json={}).json()["id"]
        r = client.put(f"/cases/{cid}/probes", json=[{"tip": [0, 0]}])
        assert r.status_code == 422


class TestCdmEndpoints:
    def test_component_families(self, client):
        models = client.get("/cdm/models").json()
        assert any(m["id"] == "rfa-gaussian" for m in models)
        rfa = next(m for m in models if m["id"] == "rfa-gaussian")
        assert "applied_power" in rfa["prompted"]
        equipment = client.get("/cdm/equipment").json()
        assert any("tine_offsets" in e["tables"] for e in equipment)
        assert client.get("/cdm/protocols").status_code == 200
        assert client.get("/cdm/organs").status_code == 200
        assert client.get("/cdm/lasers").status_code == 404


class TestRunLifecycle:
    def test_full_cycle_over_http(self, client):
        cid = client.post("/cases", json={"label": "fixture"}).json()["id"]
        grid = upload_uniform_organ(client, cid)
        place_single_rfa_probe(client, cid)

        r = client.post(f"/cases/{cid}/runs",
                        json=short_rfa_body(power=30.0, duration=40.0))
        assert r.status_code == 202, r.text
        job_id = r.json()["job_id"]

        state, progresses = wait_for_job(client, job_id)
        assert state["state"] == "done", state
        # progress is non-decreasing and reaches 1
        assert progresses == sorted(progresses)
        assert state["progress"] == 1.0

        # lesion surface downloadable
        surf = client.get(f"/cases/{cid}/runs/{job_id}/surface")
        assert surf.status_code == 200
        assert surf.text.startswith("#") or surf.text.startswith("v")

        # run summary exposed
        summary = client.get(f"/cases/{cid}/runs/{job_id}").json()
        assert summary["status"] == "done"
        assert summary["lesion_volume_ml"] > 0

        # case lists the run
        assert job_id in client.get(f"/cases/{cid}").json()["runs"]

    def test_missing_power_gives_422(self, client):
        cid = client.post("/cases", json={}).json()["id"]
        upload_uniform_organ(client, cid)
        place_single_rfa_probe(client, cid)
        r = client.post(f"/cases/{cid}/runs", json={})
        assert r.status_code == 422
        assert "applied_power" in r.text

    def test_run_without_volume_422(self, client):
        cid = client.post("/cases", json={}).json()["id"]
        place_single_rfa_probe(client, cid)
        r = client.post(f"/cases/{cid}/runs", json={
            "parameters": {"applied_power": 20.0}})
        assert r.status_code == 422

    def test_unknown_job_404(self, client):
        assert client.get("/jobs/zzz").status_code == 404


@pytest.fixture
def completed_run(client):
    cid = client.post("/cases", json={"label": "slices"}).json()["id"]
    grid = upload_uniform_organ(client, cid)
    place_single_rfa_probe(client, cid)
    r = client.post(f"/cases/{cid}/runs",
                    json=short_rfa_body(power=30.0, duration=30.0))
    job_id = r.json()["job_id"]
    state, _ = wait_for_job(client, job_id)
    assert state["state"] == "done"
    return client, cid, job_id, grid


class TestSlices:
    def test_png_rendering_and_purity(self, completed_run):
        client, cid, rid, grid = completed_run
        url = (f"/cases/{cid}/runs/{rid}/slice?plane=axial&index=9"
               f"&window=330,60&overlay=lesion")
        r1 = client.get(url)
        assert r1.status_code == 200
        assert r1.headers["content-type"] == "image/png"
        r2 = client.get(url)
        assert r1.content == r2.content  # byte-identical repeats

    def test_windowing_changes_image_only(self, completed_run):
        client, cid, rid, grid = completed_run
        a = client.get(f"/cases/{cid}/runs/{rid}/slice?plane=axial&index=9"
                       f"&window=330,60").content
        b = client.get(f"/cases/{cid}/runs/{rid}/slice?plane=axial&index=9"
                       f"&window=315,10").content
        assert a != b

    def test_all_planes_and_bounds(self, completed_run):
        client, cid, rid, grid = completed_run
        for plane in ("axial", "sagittal", "coronal"):
            ok = client.get(
                f"/cases/{cid}/runs/{rid}/slice?plane={plane}&index=5")
            assert ok.status_code == 200
        assert client.get(
            f"/cases/{cid}/runs/{rid}/slice?plane=axial&index=999"
        ).status_code == 404

    def test_contours_polylines(self, completed_run):
        client, cid, rid, grid = completed_run
        # lesion sits near the probe tip (19,19,19) -> slice index 9 ~ z=18
        r = client.get(f"/cases/{cid}/runs/{rid}/contours?plane=axial&index=9")
        assert r.status_code == 200
        data = r.json()
        assert data["polylines"], "expected a lesion contour on this slice"
        # polyline points are [u, v] mm pairs inside the grid extent
        for poly in data["polylines"]:
            arr = np.asarray(poly)
            assert arr.shape[1] == 2
            assert arr.min() >= -0.1
            assert arr.max() <= 40.1


class TestValidateEndpoint:
    def test_validate_against_uploaded_segmentation(self, completed_run):
        client, cid, rid, grid = completed_run
        r = client.get(f"/cases/{cid}/runs/{rid}/lesion-mask")
        assert r.status_code == 200
        g, lesion = volume_from_bytes(r.content)
        assert lesion.sum() > 0
        up = client.put(f"/cases/{cid}/volumes/segmented-lesion",
                        content=volume_to_bytes(g, lesion))
        assert up.status_code == 200
        rep = client.post(f"/cases/{cid}/runs/{rid}/validate")
        assert rep.status_code == 200, rep.text
        payload = rep.json()
        assert payload["phi"] == 1.0
        assert payload["alpha_mm"] < 0.2
        assert payload["alpha_before_mm"] >= payload["alpha_mm"]

    def test_validate_without_segmentation_422(self, completed_run):
        client, cid, rid, grid = completed_run
        r = client.post(f"/cases/{cid}/runs/{rid}/validate")
        assert r.status_code == 422


class TestIsolation:
    def test_concurrent_runs_isolated_directories(self, client):
        ids = []
        for _ in range(2):
            cid = client.post("/cases", json={}).json()["id"]
            upload_uniform_organ(client, cid)
            place_single_rfa_probe(client, cid)
            r = client.post(f"/cases/{cid}/runs", json=short_rfa_body())
            ids.append((cid, r.json()["job_id"]))
        results = []
        for cid, jid in ids:
            state, _ = wait_for_job(client, jid)
            assert state["state"] == "done"
            results.append(client.get(f"/cases/{cid}/runs/{jid}").json())
        assert all(r["status"] == "done" for r in results)
        # distinct run ids, never interleaved outputs
        assert ids[0][1] != ids[1][1]
