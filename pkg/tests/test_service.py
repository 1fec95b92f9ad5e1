import base64
import hashlib
import io
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient

from voxstudio.config import TINY
from voxstudio.model import StudioModel
from voxstudio.proxy import part_mask
from voxstudio.service import ServiceConfig, create_app


def proxy_doc():
    return {
        "version": 1,
        "primitives": [
            {"kind": "sphere", "center": [0, -0.25, 0], "half_extents": [0.45, 0.45, 0.45],
             "rotation": [1, 0, 0, 0], "part_id": 0},
            {"kind": "sphere", "center": [0, 0.4, 0], "half_extents": [0.3, 0.3, 0.3],
             "rotation": [1, 0, 0, 0], "part_id": 1},
        ],
    }


def bad_proxy_doc():
    doc = proxy_doc()
    doc["primitives"][0]["half_extents"] = [-0.4, 0.4, 0.4]
    return doc


def wait_state(client, sid, targets, timeout=60.0):
    t0 = time.time()
    while time.time() - t0 < timeout:
        state = client.get(f"/sessions/{sid}").json()["state"]
        if state in targets:
            return state
        if state == "failed":
            info = client.get(f"/sessions/{sid}").json()
            raise AssertionError(f"session failed: {info['error']}")
        time.sleep(0.05)
    raise TimeoutError(f"session {sid} never reached {targets}")


def dir_hash(path):
    h = hashlib.sha256()
    for p in sorted(Path(path).rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def service(tmp_path_factory):
    torch.manual_seed(0)
    model = StudioModel(TINY)
    model.trained = True  # stand-in weights; state machine under test
    data_dir = tmp_path_factory.mktemp("studio_data")
    app = create_app(model, ServiceConfig(data_dir=str(data_dir), workers=2))
    client = TestClient(app)
    return client, model, data_dir, app


def make_session(client, seed=0):
    r = client.post("/sessions", json={"proxy": proxy_doc(), "prompt_tag": "figure", "seed": seed})
    assert r.status_code == 201, r.text
    return r.json()["id"]


def generate(client, sid, steps=None, token=None):
    body = {"n_candidates": 1}
    if steps:
        body["steps"] = steps
    if token:
        body["request_token"] = token
    r = client.post(f"/sessions/{sid}/generate", json=body)
    assert r.status_code == 202, r.text
    wait_state(client, sid, ("previewable",))
    return r.json()["job_id"]


class TestSessionLifecycle:
    def test_create_valid(self, service):
        client, *_ = service
        r = client.post("/sessions", json={"proxy": proxy_doc(), "seed": 5})
        assert r.status_code == 201
        body = r.json()
        assert body["state"] == "idle"
        assert body["part_ids"] == [0, 1]
        assert not body["has_cache"]

    def test_create_invalid_names_field(self, service):
        client, *_ = service
        r = client.post("/sessions", json={"proxy": bad_proxy_doc()})
        assert r.status_code == 422
        assert r.json()["field"] == "primitives[0].half_extents"

    def test_distinct_ids(self, service):
        client, *_ = service
        a = make_session(client)
        b = make_session(client)
        assert a != b

    def test_unknown_session_404(self, service):
        client, *_ = service
        assert client.get("/sessions/nope").status_code == 404

    def test_preview_before_generate_conflict(self, service):
        client, *_ = service
        sid = make_session(client)
        r = client.get(f"/sessions/{sid}/preview", params={"az": 0, "el": -30})
        assert r.status_code == 409

    def test_edit_before_generate_conflict(self, service):
        client, *_ = service
        sid = make_session(client)
        r = client.post(f"/sessions/{sid}/edit", json={"parts": [1]})
        assert r.status_code == 409


class TestGeneration:
    def test_happy_path_artifacts(self, service):
        client, model, data_dir, _ = service
        sid = make_session(client, seed=3)
        generate(client, sid)
        info = client.get(f"/sessions/{sid}").json()
        assert info["has_cache"]
        names = info["artifacts"]
        for v in range(TINY.n_views):
            assert f"views/view_{v:02d}.png" in names
        assert "cache/cache_manifest.json" in names
        assert "candidate.png" in names
        png = client.get(f"/sessions/{sid}/artifacts/views/view_00.png")
        assert png.status_code == 200 and png.content[:8] == b"\x89PNG\r\n\x1a\n"

    def test_stream_counts_progress_events(self, service):
        client, model, _, app = service
        sid = make_session(client, seed=4)
        session = app.state.store.get(sid)
        q = session.subscribe()
        generate(client, sid)
        events = []
        while not q.empty():
            events.append(q.get_nowait())
        progress = [e for e in events if e.get("type") == "progress"]
        assert len(progress) == TINY.sample_steps
        assert progress[-1]["step"] == TINY.sample_steps
        assert all("thumbnails" in e for e in progress)
        session.unsubscribe(q)

    def test_sse_endpoint_replays_state(self, service):
        client, *_ = service
        sid = make_session(client, seed=5)
        generate(client, sid)
        with client.stream("GET", f"/sessions/{sid}/stream", params={"max_events": 0}) as r:
            first = next(r.iter_lines())
        assert json.loads(first.removeprefix("data: "))["state"] == "previewable"

    def test_request_token_exactly_once(self, service):
        client, _, _, app = service
        sid = make_session(client, seed=6)
        job1 = generate(client, sid, token="tok-1")
        r2 = client.post(f"/sessions/{sid}/generate", json={"request_token": "tok-1"})
        assert r2.status_code == 202
        assert r2.json()["job_id"] == job1

    def test_untrained_model_503(self, tmp_path):
        torch.manual_seed(1)
        model = StudioModel(TINY)  # trained = False
        app = create_app(model, ServiceConfig(data_dir=str(tmp_path), workers=1))
        client = TestClient(app)
        sid = make_session(client)
        r = client.post(f"/sessions/{sid}/generate", json={})
        assert r.status_code == 503

    def test_pass_through_candidate(self, service):
        client, *_ = service
        sid = make_session(client, seed=7)
        rng = np.random.default_rng(0)
        from PIL import Image

        arr = (rng.uniform(0, 1, (16, 16, 3)) * 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="PNG")
        b64 = base64.b64encode(buf.getvalue()).decode()
        r = client.post(f"/sessions/{sid}/generate", json={"candidate_image_b64": b64})
        assert r.status_code == 202
        wait_state(client, sid, ("previewable",))
        stored = client.get(f"/sessions/{sid}/artifacts/candidate.png").content
        back = np.asarray(Image.open(io.BytesIO(stored)))
        assert np.array_equal(back, arr)


class TestPreview:
    def test_ring_pose_matches_stored_view(self, service):
        client, *_ = service
        sid = make_session(client, seed=8)
        generate(client, sid)
        ring = TINY.view_ring()
        r = client.get(
            f"/sessions/{sid}/preview",
            params={"az": ring[0].azimuth, "el": ring[0].elevation, "steps": 10**6},
        )
        assert r.status_code == 200
        stored = client.get(f"/sessions/{sid}/artifacts/views/view_00.png").content
        assert r.content == stored

    def test_arbitrary_pose_and_concurrent_reads(self, service):
        client, _, _, app = service
        sid = make_session(client, seed=9)
        generate(client, sid)
        store = app.state.store
        before = store.get(sid).cache.content_hash()
        import concurrent.futures as cf

        def hit(az):
            return client.get(f"/sessions/{sid}/preview", params={"az": az, "el": -30}).status_code

        with cf.ThreadPoolExecutor(4) as pool:
            codes = list(pool.map(hit, [15, 45, 90, 200]))
        assert codes == [200] * 4
        assert store.get(sid).cache.content_hash() == before


class TestEditUndo:
    def test_edit_locality_and_undo(self, service):
        client, model, data_dir, app = service
        sid = make_session(client, seed=10)
        generate(client, sid)
        store = app.state.store
        session = store.get(sid)
        pre_hash = dir_hash(session.root / "cache")

        edit_seed = 77
        r = client.post(
            f"/sessions/{sid}/edit",
            json={"parts": [1], "radius": 1, "seed": edit_seed},
        )
        assert r.status_code == 202
        wait_state(client, sid, ("previewable",))
        info = client.get(f"/sessions/{sid}").json()
        assert info["can_undo"]

        # server-side locality: reload both caches from disk and compare
        from voxstudio.cache import VolumeCache

        cache_new = VolumeCache.load_dir(session.root / "cache")
        cache_old = VolumeCache.load_dir(session.root / "cache_prev")
        mask = part_mask(session.proxy, {1}, model.config.volume_resolution, 1, seed=edit_seed)
        outside = mask.values == 0
        changed = False
        for t in cache_new.timesteps():
            a = cache_new.load(t).values
            b = cache_old.load(t).values
            assert float((a[:, outside] - b[:, outside]).abs().max()) == 0.0
            changed = changed or bool((a != b).any())
        assert changed

        r = client.post(f"/sessions/{sid}/undo")
        assert r.status_code == 200
        assert dir_hash(session.root / "cache") == pre_hash
        assert not client.get(f"/sessions/{sid}").json()["can_undo"]

    def test_edit_invalid_parts_422(self, service):
        client, *_ = service
        sid = make_session(client, seed=11)
        generate(client, sid)
        assert client.post(f"/sessions/{sid}/edit", json={"parts": [99]}).status_code == 422
        assert client.post(f"/sessions/{sid}/edit", json={"parts": []}).status_code == 422

    def test_undo_without_edit_conflict(self, service):
        client, *_ = service
        sid = make_session(client, seed=12)
        generate(client, sid)
        assert client.post(f"/sessions/{sid}/undo").status_code == 409


class TestReconstruction:
    def test_versioned_outputs(self, service):
        client, *_ = service
        sid = make_session(client, seed=13)
        generate(client, sid)
        body = {"iterations": 6, "rays_per_batch": 64, "use_volume_guidance": False, "mesh_resolution": 24}
        r = client.post(f"/sessions/{sid}/reconstruct", json=body)
        assert r.status_code == 202
        wait_state(client, sid, ("done",), timeout=120)
        names = client.get(f"/sessions/{sid}").json()["artifacts"]
        assert "mesh_v000.glb" in names and "metrics_v000.jsonl" in names
        glb = client.get(f"/sessions/{sid}/artifacts/mesh_v000.glb")
        assert glb.content[:4] == b"glTF"

        r = client.post(f"/sessions/{sid}/reconstruct", json=body)
        assert r.status_code == 202
        wait_state(client, sid, ("done",), timeout=120)
        names = client.get(f"/sessions/{sid}").json()["artifacts"]
        assert "mesh_v000.glb" in names and "mesh_v001.glb" in names


class TestCrashRecovery:
    def test_restart_reloads_identical_state(self, service):
        client, model, data_dir, app = service
        sid = make_session(client, seed=14)
        generate(client, sid)
        info_before = client.get(f"/sessions/{sid}").json()
        cache_hash = app.state.store.get(sid).cache.content_hash()

        app2 = create_app(model, ServiceConfig(data_dir=str(data_dir), workers=1))
        client2 = TestClient(app2)
        info_after = client2.get(f"/sessions/{sid}").json()
        assert info_after["state"] == info_before["state"]
        assert info_after["artifacts"] == info_before["artifacts"]
        assert app2.state.store.get(sid).cache.content_hash() == cache_hash
        # a reloaded session still serves previews
        r = client2.get(f"/sessions/{sid}/preview", params={"az": 30, "el": -30, "steps": 2})
        assert r.status_code == 200


class TestBusy:
    def test_concurrent_job_conflict(self, service):
        client, _, _, app = service
        sid = make_session(client, seed=15)
        store = app.state.store
        session = store.get(sid)
        import threading

        gate = threading.Event()
        original = store.model.sample

        def slow_sample(*a, **k):
            gate.wait(timeout=10)
            return original(*a, **k)

        store.model.sample = slow_sample
        try:
            r1 = client.post(f"/sessions/{sid}/generate", json={})
            assert r1.status_code == 202
            deadline = time.time() + 5
            while session.state != "generating" and time.time() < deadline:
                time.sleep(0.01)
            r2 = client.post(f"/sessions/{sid}/generate", json={})
            assert r2.status_code == 409
            r3 = client.post(f"/sessions/{sid}/edit", json={"parts": [1]})
            assert r3.status_code == 409
        finally:
            gate.set()
            store.model.sample = original
        wait_state(client, sid, ("previewable",))


class TestFrontendMount:
    def test_static_mount_serves_studio_page(self, tmp_path):
        frontend = Path(__file__).resolve().parent.parent / "frontend"
        if not (frontend / "dist" / "main.js").exists():
            pytest.skip("frontend not built (run npm run build in frontend/)")
        torch.manual_seed(0)
        model = StudioModel(TINY)
        model.trained = True
        app = create_app(model, ServiceConfig(data_dir=str(tmp_path), workers=1, frontend_dir=str(frontend)))
        client = TestClient(app)
        page = client.get("/app/")
        assert page.status_code == 200
        assert b"voxstudio" in page.content
        js = client.get("/app/dist/main.js")
        assert js.status_code == 200


def test_publish_drops_oldest_never_blocks(tmp_path):
    from voxstudio.config import ControlStrength
    from voxstudio.service.sessions import Session

    s = Session("s", tmp_path, proxy_doc(), "generic", ControlStrength(), 0)
    q = s.subscribe()
    for i in range(200):  # far beyond the queue bound; must not stall
        s.publish({"type": "progress", "step": i})
    events = []
    while not q.empty():
        events.append(q.get_nowait())
    assert len(events) == 64  # bounded
    assert events[-1]["step"] == 199  # newest retained
    assert events[0]["step"] == 200 - 64  # oldest dropped
