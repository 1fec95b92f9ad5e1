"""Session objects, their on-disk layout, and the job runner.

One directory per session holds the manifest, proxy, candidates, generated
views, the volume cache (plus the pre-edit cache for undo), and versioned
reconstruction outputs. Every state transition is persisted, so a restarted
service reloads sessions byte-identically. Jobs run on a small worker pool;
each session accepts one writer at a time while previews read concurrently.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import queue
import shutil
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from ..cache import VolumeCache, preview, transfer_viewpoint
from ..config import ControlStrength
from ..diffusion import CandidateImage, generate_candidates
from ..editing import EditRequest, edit_part
from ..errors import BusyError, CacheMissError, NotReadyError, VoxError
from ..proxy import proxy_from_dict, render_silhouette
from .. import recon as recon_mod

log = logging.getLogger(__name__)

STATES = ("idle", "generating", "previewable", "editing", "reconstructing", "done", "failed")
ACTIVE_STATES = ("generating", "editing", "reconstructing")
PREVIEWABLE = ("previewable", "editing", "reconstructing", "done")


def _png_bytes(img_chw: np.ndarray) -> bytes:
    arr = np.round(np.clip(img_chw, 0.0, 1.0).transpose(1, 2, 0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _png_to_chw(data: bytes) -> np.ndarray:
    img = np.asarray(Image.open(io.BytesIO(data)).convert("RGB"), dtype=np.float32) / 255.0
    return img.transpose(2, 0, 1)


class Session:
    def __init__(self, session_id: str, root: Path, proxy_doc: dict, prompt_tag: str,
                 strength: ControlStrength, seed: int):
        self.id = session_id
        self.root = root
        self.proxy_doc = proxy_doc
        self.proxy = proxy_from_dict(proxy_doc)
        self.prompt_tag = prompt_tag
        self.strength = strength
        self.seed = seed
        self.state = "idle"
        self.error: str | None = None
        self.cache: VolumeCache | None = None
        self.prev_cache_available = False
        self.request_tokens: dict[str, str] = {}
        self.mesh_versions = 0
        self.lock = threading.Lock()
        self.subscribers: list[queue.Queue] = []
        self.current_job: str | None = None

    # -- streaming -----------------------------------------------------------

    def subscribe(self) -> queue.Queue:
        q = queue.Queue(maxsize=64)
        with self.lock:
            self.subscribers.append(q)
        return q

    def unsubscribe(self, q) -> None:
        with self.lock:
            if q in self.subscribers:
                self.subscribers.remove(q)

    def publish(self, event: dict) -> None:
        """Drop-oldest fanout; a slow consumer never stalls the job."""
        with self.lock:
            subs = list(self.subscribers)
        for q in subs:
            while True:
                try:
                    q.put_nowait(event)
                    break
                except queue.Full:
                    try:
                        q.get_nowait()
                    except queue.Empty:
                        break

    # -- state ---------------------------------------------------------------

    def begin_job(self, kind: str, allowed_states: tuple, next_state: str) -> str:
        with self.lock:
            if self.state in ACTIVE_STATES:
                raise BusyError(f"session {self.id} is {self.state}")
            if self.state not in allowed_states:
                raise NotReadyError(
                    f"session {self.id} is {self.state}; expected one of {allowed_states}"
                )
            self.state = next_state
            self.current_job = uuid.uuid4().hex[:12]
            return self.current_job

    def finish_job(self, final_state: str, error: str | None = None) -> None:
        with self.lock:
            self.state = final_state
            self.error = error
            self.current_job = None
        self.persist_manifest()
        self.publish({"type": "state", "state": final_state, **({"error": error} if error else {})})

    # -- persistence -----------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "id": self.id,
            "state": self.state if self.state not in ACTIVE_STATES else "previewable",
            "proxy": self.proxy_doc,
            "prompt_tag": self.prompt_tag,
            "strength": {
                "lambda": self.strength.lam,
                "s_end": self.strength.s_end,
                "n_samples": self.strength.n_samples,
            },
            "seed": self.seed,
            "error": self.error,
            "request_tokens": self.request_tokens,
            "mesh_versions": self.mesh_versions,
            "prev_cache_available": self.prev_cache_available,
        }

    def persist_manifest(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "manifest.json").write_text(json.dumps(self.manifest(), indent=2))

    @staticmethod
    def load_dir(root: Path) -> "Session":
        doc = json.loads((root / "manifest.json").read_text())
        strength = ControlStrength(
            lam=doc["strength"]["lambda"],
            s_end=doc["strength"]["s_end"],
            n_samples=doc["strength"]["n_samples"],
        )
        s = Session(doc["id"], root, doc["proxy"], doc["prompt_tag"], strength, doc["seed"])
        s.state = doc["state"]
        s.error = doc.get("error")
        s.request_tokens = doc.get("request_tokens", {})
        s.mesh_versions = doc.get("mesh_versions", 0)
        s.prev_cache_available = doc.get("prev_cache_available", False)
        cache_dir = root / "cache"
        if cache_dir.exists():
            s.cache = VolumeCache.load_dir(cache_dir)
        return s

    def artifact_names(self) -> list:
        if not self.root.exists():
            return []
        names = []
        for p in sorted(self.root.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                names.append(str(p.relative_to(self.root)))
        return names

    # -- stored tensors --------------------------------------------------------

    def save_views(self, images: np.ndarray, subdir: str = "views") -> None:
        d = self.root / subdir
        d.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(images):
            (d / f"view_{i:02d}.png").write_bytes(_png_bytes(img))

    def load_view(self, index: int) -> np.ndarray:
        return _png_to_chw((self.root / "views" / f"view_{index:02d}.png").read_bytes())

    def save_candidate(self, candidate: CandidateImage) -> None:
        (self.root / "candidate.png").write_bytes(_png_bytes(candidate.pixels))
        (self.root / "candidate_meta.json").write_text(
            json.dumps({"anchor_azimuth": candidate.anchor_azimuth})
        )

    def load_candidate(self) -> CandidateImage:
        path = self.root / "candidate.png"
        if not path.exists():
            raise NotReadyError(f"session {self.id} has no candidate yet")
        meta = json.loads((self.root / "candidate_meta.json").read_text())
        return CandidateImage(_png_to_chw(path.read_bytes()), anchor_azimuth=meta["anchor_azimuth"])


class SessionStore:
    """All sessions plus the worker pool and the shared model."""

    def __init__(self, model, data_dir, workers: int = 2):
        self.model = model
        self.data_dir = Path(data_dir)
        self.sessions_dir = self.data_dir / "sessions"
        self.sessions_dir.mkdir(parents=True, exist_ok=True)
        self.sessions: dict[str, Session] = {}
        self.pool = ThreadPoolExecutor(max_workers=workers)
        self._load_existing()

    def _load_existing(self) -> None:
        for d in sorted(self.sessions_dir.iterdir()) if self.sessions_dir.exists() else []:
            if (d / "manifest.json").exists():
                try:
                    s = Session.load_dir(d)
                    self.sessions[s.id] = s
                except (VoxError, KeyError, json.JSONDecodeError) as exc:
                    log.warning("skipping unreadable session %s: %s", d.name, exc)

    def create(self, proxy_doc: dict, prompt_tag: str, strength: ControlStrength, seed: int) -> Session:
        proxy_from_dict(proxy_doc)  # validation with field paths
        sid = uuid.uuid4().hex[:12]
        s = Session(sid, self.sessions_dir / sid, proxy_doc, prompt_tag, strength, seed)
        s.persist_manifest()
        self.sessions[sid] = s
        return s

    def get(self, session_id: str) -> Session:
        if session_id not in self.sessions:
            raise KeyError(session_id)
        return self.sessions[session_id]

    def ring(self):
        return self.model.config.view_ring()

    # -- jobs ------------------------------------------------------------------

    def start_generation(self, s: Session, body) -> str:
        if body.request_token and body.request_token in s.request_tokens:
            return s.request_tokens[body.request_token]
        job = s.begin_job("generation", ("idle", "previewable", "done"), "generating")
        if body.request_token:
            s.request_tokens[body.request_token] = job
        s.persist_manifest()

        supplied = None
        if body.candidate_image_b64:
            pixels = _png_to_chw(base64.b64decode(body.candidate_image_b64))
            supplied = CandidateImage(pixels, anchor_azimuth=0.0)

        def run():
            try:
                ring = self.ring()
                size = self.model.config.image_size
                sil = render_silhouette(s.proxy, ring[0], size, size)
                cands = generate_candidates(
                    sil.pixels,
                    s.prompt_tag,
                    body.n_candidates,
                    s.seed,
                    generator_model=self.model.candidate_generator if supplied is None else None,
                    schedule=self.model.schedule,
                    supplied=supplied,
                    prompt_vocab=_prompt_vocab(),
                    anchor_azimuth=ring[0].azimuth,
                )
                cand_dir = s.root / "candidates"
                cand_dir.mkdir(parents=True, exist_ok=True)
                for i, c in enumerate(cands):
                    (cand_dir / f"cand_{i:02d}.png").write_bytes(_png_bytes(c.pixels))
                chosen = cands[min(body.candidate_index, len(cands) - 1)]
                s.save_candidate(chosen)

                def on_step(k, total, images):
                    s.publish(
                        {
                            "type": "progress",
                            "phase": "generation",
                            "step": k + 1,
                            "total": total,
                            "thumbnails": [
                                base64.b64encode(_png_bytes(im)).decode() for im in images
                            ],
                        }
                    )

                result = self.model.sample(
                    s.proxy, chosen, s.strength, ring, seed=s.seed,
                    steps=body.steps, on_step=on_step,
                )
                s.cache = VolumeCache.from_trace(
                    f"{s.id}-gen-{job}", result.volume_trace, result.step_plan,
                    half_precision=self.model.config.cache_half_precision,
                )
                s.save_views(result.images)
                s.cache.persist(s.root / "cache")
                s.finish_job("previewable")
            except Exception as exc:  # job boundary: surface via state machine
                log.exception("generation failed for %s", s.id)
                s.finish_job("failed", error=str(exc))

        self.pool.submit(run)
        return job

    def start_edit(self, s: Session, body) -> str:
        if body.request_token and body.request_token in s.request_tokens:
            return s.request_tokens[body.request_token]
        if s.cache is None or len(s.cache) == 0:
            raise NotReadyError(f"session {s.id} has no completed generation to edit")
        if not body.parts:
            from ..errors import InvalidPartError

            raise InvalidPartError("part id selection is empty")
        s.proxy.parts(body.parts)  # raises InvalidPartError before job start
        job = s.begin_job("edit", ("previewable", "done"), "editing")
        if body.request_token:
            s.request_tokens[body.request_token] = job
        s.persist_manifest()

        def run():
            try:
                ring = self.ring()
                candidate = s.load_candidate()
                edit_view = None
                if body.view is not None:
                    edit_view = transfer_viewpoint(
                        {
                            "azimuth": body.view.azimuth,
                            "elevation": body.view.elevation,
                            "distance": ring[0].radius,
                        },
                        ring[0].intrinsics,
                    )
                new_candidate = None
                if body.candidate_image_b64:
                    new_candidate = CandidateImage(
                        _png_to_chw(base64.b64decode(body.candidate_image_b64)),
                        anchor_azimuth=edit_view.azimuth if edit_view else candidate.anchor_azimuth,
                    )
                req = EditRequest(
                    part_ids=set(body.parts),
                    seed=body.seed if body.seed is not None else s.seed + 1,
                    dilation_radius=body.radius,
                    edit_view=edit_view,
                    new_candidate=new_candidate,
                    prompt_tag=body.prompt_tag or s.prompt_tag,
                    session_id=s.id,
                )

                def on_step(k, total, images):
                    s.publish({"type": "progress", "phase": "edit", "step": k + 1, "total": total})

                result = edit_part(
                    self.model, s.proxy, req, s.cache, candidate, s.strength, ring,
                    on_step=on_step,
                )
                # retain the pre-edit cache and views for a depth-1 undo
                _swap_to_prev(s.root, "cache")
                _swap_to_prev(s.root, "views")
                new_cache = VolumeCache.from_trace(
                    f"{s.id}-edit-{job}", result.volume_trace, result.step_plan,
                    half_precision=self.model.config.cache_half_precision,
                )
                s.cache = new_cache
                s.save_views(result.images)
                new_cache.persist(s.root / "cache")
                if result.edited_candidate is not None:
                    s.save_candidate(result.edited_candidate)
                s.prev_cache_available = True
                s.finish_job("previewable")
            except Exception as exc:
                log.exception("edit failed for %s", s.id)
                s.finish_job("failed", error=str(exc))

        self.pool.submit(run)
        return job

    def undo(self, s: Session) -> None:
        with s.lock:
            if s.state in ACTIVE_STATES:
                raise BusyError(f"session {s.id} is {s.state}")
            if not s.prev_cache_available:
                raise NotReadyError(f"session {s.id} has nothing to undo")
            _swap_dirs(s.root / "cache", s.root / "cache_prev")
            _swap_dirs(s.root / "views", s.root / "views_prev")
            s.cache = VolumeCache.load_dir(s.root / "cache")
            s.prev_cache_available = False
            s.state = "previewable"
        s.persist_manifest()
        s.publish({"type": "state", "state": "previewable"})

    def start_reconstruction(self, s: Session, body) -> str:
        if body.request_token and body.request_token in s.request_tokens:
            return s.request_tokens[body.request_token]
        if s.cache is None or len(s.cache) == 0:
            raise CacheMissError([], f"session {s.id} has no volume cache")
        job = s.begin_job("reconstruction", ("previewable", "done"), "reconstructing")
        if body.request_token:
            s.request_tokens[body.request_token] = job
        s.persist_manifest()

        def run():
            try:
                ring = self.ring()
                size = self.model.config.image_size
                images = np.stack([s.load_view(i) for i in range(len(ring))])
                masks = np.stack(
                    [render_silhouette(s.proxy, p, size, size).pixels for p in ring]
                ).astype(np.float32)
                candidate = s.load_candidate()
                cfg = recon_mod.ReconConfig(
                    iterations=body.iterations or self.model.config.recon_iterations,
                    w_sds=0.2 if body.use_volume_guidance else 0.0,
                    seed=s.seed,
                )
                if body.rays_per_batch:
                    cfg.rays_per_batch = body.rays_per_batch
                version = s.mesh_versions
                metrics_path = s.root / f"metrics_v{version:03d}.jsonl"
                s.publish({"type": "progress", "phase": "reconstruction", "step": 0, "total": cfg.iterations})
                field, report = recon_mod.fit_field(
                    images, masks, ring,
                    cache=s.cache if body.use_volume_guidance else None,
                    config=cfg,
                    model=self.model if body.use_volume_guidance else None,
                    candidate_embedding=candidate.embed(self.model.encoder),
                    metrics_path=metrics_path,
                )
                mesh = recon_mod.extract_mesh(field, resolution=body.mesh_resolution or cfg.mesh_resolution)
                recon_mod.export_mesh(mesh, s.root / f"mesh_v{version:03d}.glb")
                recon_mod.export_mesh(mesh, s.root / f"mesh_v{version:03d}.obj")
                report_doc = {
                    "version": version,
                    "iterations": cfg.iterations,
                    "wall_seconds": report.wall_seconds,
                    "final": report.metrics[-1] if report.metrics else {},
                    "vertices": len(mesh.vertices),
                    "faces": len(mesh.faces),
                }
                (s.root / f"recon_report_v{version:03d}.json").write_text(json.dumps(report_doc, indent=2))
                s.mesh_versions = version + 1
                s.finish_job("done")
            except Exception as exc:
                log.exception("reconstruction failed for %s", s.id)
                s.finish_job("failed", error=str(exc))

        self.pool.submit(run)
        return job

    def render_preview(self, s: Session, azimuth: float, elevation: float, steps: int | None):
        if s.state not in PREVIEWABLE or s.cache is None:
            raise NotReadyError(f"session {s.id} is {s.state}; no preview available")
        ring = self.ring()
        pose = transfer_viewpoint(
            {"azimuth": azimuth, "elevation": elevation, "distance": ring[0].radius},
            ring[0].intrinsics,
        )
        candidate = s.load_candidate()
        steps = steps if steps is not None else self.model.config.preview_steps
        img = preview(s.cache, pose, self.model, candidate, s.seed, preview_steps=steps, ring=ring)
        return _png_bytes(img)


def _prompt_vocab():
    from ..model import PROMPT_VOCAB

    return PROMPT_VOCAB


def _swap_to_prev(root: Path, name: str) -> None:
    cur, prev = root / name, root / f"{name}_prev"
    if prev.exists():
        shutil.rmtree(prev)
    if cur.exists():
        cur.rename(prev)


def _swap_dirs(a: Path, b: Path) -> None:
    if not b.exists():
        raise NotReadyError(f"{b.name} missing; nothing to restore")
    tmp = a.with_name(a.name + ".swap")
    if a.exists():
        a.rename(tmp)
    b.rename(a)
    if tmp.exists():
        tmp.rename(b)
