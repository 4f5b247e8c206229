"""HTTP service over a loaded checkpoint: render, animate, fit-as-a-job.

Render and animate are synchronous and stateless; responses depend only on the
request payload and the checkpoint loaded at startup. Fitting runs on a single
background worker with a bounded queue; job records only ever move forward
(queued -> running -> done | failed) and the result archive is built exactly
once, so repeated polls return byte-identical content.

Error mapping: 400 malformed payloads, 404 unknown job ids or unready results,
422 dimension/value mismatches, 503 full job queue.
"""

from __future__ import annotations

import json
import queue
import threading
from pathlib import Path

from fastapi import FastAPI, File, Form, Request, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, PlainTextResponse, Response

from . import api
from .checkpoint import load_checkpoint
from .errors import (DimensionError, FittingError, GeometryError, HeaddError,
                     ParseError)
from .fitting import FitConfig, fit_single_image, render_fitted, save_fitted
from .imageops import decode_png, png_bytes


def _error_response(exc: Exception) -> JSONResponse:
    if isinstance(exc, (ParseError, GeometryError, json.JSONDecodeError)):
        return JSONResponse({"detail": str(exc)}, status_code=400)
    if isinstance(exc, (DimensionError, FittingError, KeyError, ValueError)):
        detail = exc.args[0] if exc.args else str(exc)
        return JSONResponse({"detail": str(detail)}, status_code=422)
    raise exc


class JobStore:
    """Bounded fit queue plus the immutable history of every job."""

    def __init__(self, ckpt, work_dir: Path, queue_size: int = 4):
        self.ckpt = ckpt
        self.work_dir = Path(work_dir)
        self.records: dict[str, api.JobRecord] = {}
        self.results: dict[str, bytes] = {}
        self.lock = threading.Lock()
        self.queue: queue.Queue = queue.Queue(maxsize=max(1, queue_size))
        self.worker = threading.Thread(target=self._loop, daemon=True)
        self.worker.start()

    def submit(self, inputs) -> api.JobRecord | None:
        """Queue a fit; None means the queue is full."""
        record = api.JobRecord(job_id=api.new_job_id(), kind="fit")
        try:
            self.queue.put_nowait((record.job_id, inputs))
        except queue.Full:
            return None
        with self.lock:
            self.records[record.job_id] = record
        return record

    def get(self, job_id: str) -> api.JobRecord | None:
        with self.lock:
            return self.records.get(job_id)

    def _update(self, job_id: str, **changes):
        with self.lock:
            rec = self.records[job_id]
            for key, val in changes.items():
                setattr(rec, key, val)

    def _loop(self):
        while True:
            job_id, inputs = self.queue.get()
            self._update(job_id, state="running", progress=0.1)
            try:
                blob, out_dir = self._run_fit(job_id, inputs)
                with self.lock:
                    self.results[job_id] = blob
                self._update(job_id, state="done", progress=1.0,
                             result_path=str(out_dir))
            except Exception as exc:
                self._update(job_id, state="failed", error=str(exc))

    def _run_fit(self, job_id: str, inputs):
        image, mask, pairs, camera, cfg_dict = inputs
        cfg = FitConfig.from_dict(cfg_dict)
        fitted = fit_single_image(self.ckpt, image, mask, pairs, camera, cfg)
        self._update(job_id, progress=0.9)
        out_dir = self.work_dir / job_id
        save_fitted(out_dir, fitted)
        preview = png_bytes(render_fitted(self.ckpt, fitted, camera))
        (out_dir / "preview.png").write_bytes(preview)
        blob = api.deterministic_zip([
            ("fitted.json", (out_dir / "fitted.json").read_bytes()),
            ("texture.bin", (out_dir / "texture.bin").read_bytes()),
            ("preview.png", preview),
        ])
        return blob, out_dir


def create_app(checkpoint_dir, max_size: int = api.DEFAULT_MAX_SIZE,
               queue_size: int = 4, work_dir=None) -> FastAPI:
    """Build the service around one immutable checkpoint snapshot."""
    ckpt = load_checkpoint(checkpoint_dir)
    work_dir = Path(work_dir) if work_dir else Path(checkpoint_dir) / "jobs"
    work_dir.mkdir(parents=True, exist_ok=True)
    jobs = JobStore(ckpt, work_dir, queue_size=queue_size)

    app = FastAPI(title="headd service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    app.state.checkpoint = ckpt
    app.state.jobs = jobs

    @app.get("/healthz")
    def healthz():
        return PlainTextResponse("ok")

    @app.get("/model")
    def model():
        return JSONResponse(api.model_summary(ckpt))

    @app.post("/render")
    async def render(request: Request):
        try:
            payload = await request.json()
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            return JSONResponse({"detail": f"bad JSON: {exc}"}, status_code=400)
        try:
            blob = api.render_png(ckpt, payload, max_size=max_size)
        except HeaddError as exc:
            return _error_response(exc)
        except KeyError as exc:
            return _error_response(exc)
        return Response(content=blob, media_type="image/png")

    @app.post("/animate")
    async def animate(request: Request):
        try:
            payload = await request.json()
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            return JSONResponse({"detail": f"bad JSON: {exc}"}, status_code=400)
        try:
            blob = api.animate_zip(ckpt, payload, max_size=max_size)
        except HeaddError as exc:
            return _error_response(exc)
        except KeyError as exc:
            return _error_response(exc)
        return Response(content=blob, media_type="application/zip")

    @app.post("/fit")
    def fit(image: UploadFile = File(...), mask: UploadFile = File(...),
            landmarks: str = Form(...)):
        try:
            img = decode_png(image.file.read())
            msk = decode_png(mask.file.read())
            landmarks_obj = json.loads(landmarks)
            inputs = api.parse_fit_inputs(ckpt, img, msk, landmarks_obj)
        except (HeaddError, json.JSONDecodeError) as exc:
            return _error_response(exc)
        record = jobs.submit(inputs)
        if record is None:
            return JSONResponse({"detail": "job queue full"}, status_code=503)
        return JSONResponse(record.to_dict(), status_code=202)

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        record = jobs.get(job_id)
        if record is None:
            return JSONResponse({"detail": f"unknown job {job_id}"},
                                status_code=404)
        return JSONResponse(record.to_dict())

    @app.get("/jobs/{job_id}/result")
    def job_result(job_id: str):
        record = jobs.get(job_id)
        if record is None:
            return JSONResponse({"detail": f"unknown job {job_id}"},
                                status_code=404)
        with jobs.lock:
            blob = jobs.results.get(job_id)
        if record.state != "done" or blob is None:
            return JSONResponse(
                {"detail": f"job {job_id} has no result (state={record.state})"},
                status_code=404)
        return Response(content=blob, media_type="application/zip")

    return app
