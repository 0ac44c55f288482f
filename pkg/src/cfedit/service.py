"""HTTP job service: sessions, abduction jobs, edit requests.

Polling contract: clients create work with POSTs and poll GET /jobs/{id};
progress carries the smoothed loss so a client can plot descent live. Images
are addressed by content hash and immutable. Job state is persisted per
session (jobs.json), so a restarted server recovers from disk.
"""

from __future__ import annotations

import io
import json
import threading
import time
import uuid
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from PIL import Image

from cfedit.abduction import run_abduction
from cfedit.backend import ToyBackend
from cfedit.corpus import ToyCorpusSpec
from cfedit.editor import EditRequest, predict_edit
from cfedit.errors import ConfigError
from cfedit.evalharness import image_alignment, text_alignment
from cfedit.session import AbductionConfig, EditSession


@dataclass
class ServiceSettings:
    session_root: str = "sessions"
    backend_path: str = "models/toy/toy.npz"
    max_abduct_workers: int = 1
    max_edit_workers: int = 2
    max_image_bytes: int = 8 * 1024 * 1024
    static_dir: str | None = None


@dataclass
class Job:
    id: str
    kind: str  # abduct | edit | sweep
    session_id: str
    status: str = "queued"  # queued -> running -> done | failed
    progress: dict = field(default_factory=lambda: {"iteration": 0, "total": 0,
                                                    "loss": None, "smoothed_loss": None})
    result: dict = field(default_factory=dict)
    error: str | None = None
    created: float = field(default_factory=time.time)
    started: float | None = None
    finished: float | None = None


class JobStore:
    def __init__(self, root: Path):
        self.root = root
        self.jobs: dict[str, Job] = {}
        self.lock = threading.Lock()
        self._recover()

    def _jobs_file(self, session_id: str) -> Path:
        return self.root / session_id / "jobs.json"

    def _recover(self) -> None:
        if not self.root.exists():
            return
        for path in self.root.glob("*/jobs.json"):
            try:
                for record in json.loads(path.read_text()):
                    job = Job(**record)
                    if job.status in ("queued", "running"):
                        job.status = "failed"
                        job.error = "interrupted by server restart"
                    self.jobs[job.id] = job
            except (json.JSONDecodeError, TypeError):
                continue

    def add(self, job: Job) -> None:
        with self.lock:
            self.jobs[job.id] = job
            self._persist(job.session_id)

    def update(self, job: Job, persist: bool = False) -> None:
        if persist:
            with self.lock:
                self._persist(job.session_id)

    def _persist(self, session_id: str) -> None:
        records = [asdict(j) for j in self.jobs.values() if j.session_id == session_id]
        path = self._jobs_file(session_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(records))
        tmp.replace(path)

    def get(self, job_id: str) -> Job | None:
        return self.jobs.get(job_id)


def _decode_upload(data: bytes, resolution: int) -> torch.Tensor:
    img = Image.open(io.BytesIO(data)).convert("RGB")
    if img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1))


def create_app(settings: ServiceSettings) -> FastAPI:
    backend = ToyBackend.load(settings.backend_path)
    spec = ToyCorpusSpec(resolution=backend.config.resolution)
    root = Path(settings.session_root)
    root.mkdir(parents=True, exist_ok=True)
    store = JobStore(root)
    abduct_pool = ThreadPoolExecutor(settings.max_abduct_workers)
    edit_pool = ThreadPoolExecutor(settings.max_edit_workers)

    app = FastAPI(title="cfedit job service", openapi_url="/spec")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])

    def run_abduct_job(job: Job, with_t_aux: bool) -> None:
        job.status = "running"
        job.started = time.time()
        store.update(job, persist=True)
        recent: deque[float] = deque(maxlen=100)

        def progress(it: int, total: int, loss: float) -> None:
            recent.append(loss)
            job.progress = {"iteration": it, "total": total, "loss": loss,
                            "smoothed_loss": sum(recent) / len(recent)}

        try:
            session = EditSession.load(root, job.session_id)
            run_abduction(session, backend, with_t_aux=with_t_aux, progress=progress)
            job.status = "done"
            job.result = {"final_loss": job.progress.get("loss")}
        except Exception as exc:
            job.status = "failed"
            job.error = str(exc)
        job.finished = time.time()
        store.update(job, persist=True)

    def run_edit_job(job: Job, requests: list[EditRequest]) -> None:
        job.status = "running"
        job.started = time.time()
        job.progress = {"iteration": 0, "total": len(requests), "loss": None,
                        "smoothed_loss": None}
        store.update(job, persist=True)
        try:
            session = EditSession.load(root, job.session_id)
            source = session.source_image()
            hashes = []
            for i, request in enumerate(requests):
                result = predict_edit(session, backend, request)
                scores = {
                    "image_alignment": image_alignment(source, result.image,
                                                       backend=backend),
                    "text_alignment": _safe_text_alignment(result.image,
                                                           session.p_prime),
                    "metric_id": "toy_pixel_feature/toy_probe",
                }
                record = {"request": result.request, "hash": result.content_hash,
                          "scores": scores}
                (session.edits_dir() / f"{result.content_hash}.json").write_text(
                    json.dumps(record, indent=2, sort_keys=True))
                hashes.append(result.content_hash)
                job.progress["iteration"] = i + 1
            job.status = "done"
            job.result = {"hashes": hashes}
        except Exception as exc:
            job.status = "failed"
            job.error = str(exc)
        job.finished = time.time()
        store.update(job, persist=True)

    def _safe_text_alignment(image: torch.Tensor, prompt: str) -> float | None:
        try:
            return text_alignment(image, prompt, spec=spec)
        except ValueError:
            return None

    @app.post("/sessions", status_code=201)
    async def create_session(image: UploadFile = File(...), p: str = Form(...),
                             p_prime: str = Form(...), config: str = Form("{}")):
        if not p.strip() or not p_prime.strip():
            raise HTTPException(400, "both prompts must be nonempty")
        data = await image.read()
        if len(data) > settings.max_image_bytes:
            raise HTTPException(413, "image too large")
        try:
            img = _decode_upload(data, backend.config.resolution)
        except Exception:
            raise HTTPException(400, "image does not decode")
        try:
            overrides = json.loads(config)
            if not isinstance(overrides, dict):
                raise TypeError("config must be a JSON object")
            with_t_aux = bool(overrides.pop("with_t_aux", False))
            defaults = asdict(AbductionConfig())
            merged = {**defaults, **overrides}
            merged["checkpoint_iters"] = tuple(merged["checkpoint_iters"])
            cfg = AbductionConfig(**merged)
        except (json.JSONDecodeError, TypeError, ConfigError) as exc:
            raise HTTPException(400, f"bad config: {exc}")
        try:
            session = EditSession.create(root, img, p, p_prime, cfg)
        except ConfigError as exc:
            raise HTTPException(400, str(exc))
        job = Job(id=uuid.uuid4().hex[:12], kind="abduct", session_id=session.id)
        job.progress["total"] = cfg.iterations
        store.add(job)
        abduct_pool.submit(run_abduct_job, job, with_t_aux)
        return {"session_id": session.id, "job_id": job.id}

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        job = store.get(job_id)
        if job is None:
            raise HTTPException(404, "unknown job")
        return asdict(job)

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        try:
            session = EditSession.load(root, session_id)
        except Exception:
            raise HTTPException(404, "unknown session")
        return session.manifest

    @app.get("/sessions/{session_id}/edits")
    def list_edits(session_id: str):
        try:
            session = EditSession.load(root, session_id)
        except Exception:
            raise HTTPException(404, "unknown session")
        edits = []
        if session.edits_dir().exists():
            for path in sorted(session.edits_dir().glob("*.json")):
                edits.append(json.loads(path.read_text()))
        return edits

    @app.post("/sessions/{session_id}/edits")
    def create_edit(session_id: str, body: dict):
        try:
            session = EditSession.load(root, session_id)
        except Exception:
            raise HTTPException(404, "unknown session")
        if session.status != "done":
            raise HTTPException(409, f"session status is {session.status!r}")
        beta = float(body.get("beta", 1.0))
        if not -1.0 <= beta <= 1.0:
            raise HTTPException(422, "beta out of [-1, 1]")
        seed = int(body.get("seed", 0))
        steps = int(body.get("steps", 30))
        use_t_aux = bool(body.get("use_t_aux", False))
        if body.get("sweep_betas"):
            betas = sorted(float(b) for b in body["sweep_betas"])
            if any(not -1.0 <= b <= 1.0 for b in betas):
                raise HTTPException(422, "beta out of [-1, 1]")
            requests = [EditRequest(session_id=session_id, beta=b, seed=seed,
                                    steps=steps, use_t_aux=use_t_aux) for b in betas]
            kind = "sweep"
        elif body.get("n_seeds"):
            requests = [EditRequest(session_id=session_id, beta=beta, seed=seed + i,
                                    steps=steps, use_t_aux=use_t_aux)
                        for i in range(int(body["n_seeds"]))]
            kind = "sweep"
        else:
            requests = [EditRequest(session_id=session_id, beta=beta, seed=seed,
                                    steps=steps, use_t_aux=use_t_aux)]
            kind = "edit"

        cached = _find_cached(session, requests)
        job = Job(id=uuid.uuid4().hex[:12], kind=kind, session_id=session_id)
        if cached is not None:
            job.status = "done"
            job.finished = time.time()
            job.result = {"hashes": cached, "cached": True}
            store.add(job)
            return {"job_id": job.id}
        store.add(job)
        edit_pool.submit(run_edit_job, job, requests)
        return {"job_id": job.id}

    def _find_cached(session: EditSession, requests: list[EditRequest]) -> list[str] | None:
        edits_dir = session.edits_dir()
        if not edits_dir.exists():
            return None
        by_echo = {}
        for path in edits_dir.glob("*.json"):
            record = json.loads(path.read_text())
            by_echo[json.dumps(record["request"], sort_keys=True)] = record["hash"]
        hashes = []
        for request in requests:
            key = json.dumps(request.echo(), sort_keys=True)
            if key not in by_echo:
                return None
            hashes.append(by_echo[key])
        return hashes

    @app.get("/images/{content_hash}")
    def get_image(content_hash: str):
        for path in root.glob(f"*/edits/{content_hash}.png"):
            return Response(path.read_bytes(), media_type="image/png")
        raise HTTPException(404, "unknown image")

    @app.get("/images/{content_hash}/record")
    def get_image_record(content_hash: str):
        for path in root.glob(f"*/edits/{content_hash}.json"):
            return Response(path.read_bytes(), media_type="application/json")
        raise HTTPException(404, "unknown image")

    if settings.static_dir:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=settings.static_dir, html=True),
                  name="studio")

    return app
