"""Session-oriented HTTP API for the interactive annotation loop.

Sessions live in memory; fine-tune jobs are queued onto a single worker
thread (FIFO across sessions) and polled via /jobs/{id}. Masks travel as
per-row run-length encodings with a class legend.
"""
from __future__ import annotations

import io
import itertools
import os
import queue
import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, File, HTTPException, UploadFile
from PIL import Image
from pydantic import BaseModel

from .annotations import AnnotationError, Origin, Point, SparseAnnotations
from .inference import predict_sliding
from .labels import RegistryError
from .model import InputContractError, ModelSnapshot, SegModel, load_checkpoint
from .trainer import FinetuneConfig, FinetuneSample, finetune_incremental
from .losses import LossConfig

PALETTE = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
]


def encode_rle(mask: np.ndarray) -> dict:
    """Per-row run-length encoding: rows of [class_id, run_length] pairs."""
    rows = []
    for row in mask:
        runs = []
        change = np.flatnonzero(np.diff(row))
        start = 0
        for end in itertools.chain(change + 1, [len(row)]):
            runs.append([int(row[start]), int(end - start)])
            start = end
        rows.append(runs)
    return {"height": int(mask.shape[0]), "width": int(mask.shape[1]), "rows": rows}


def decode_rle(rle: dict) -> np.ndarray:
    mask = np.zeros((rle["height"], rle["width"]), dtype=np.int64)
    for r, runs in enumerate(rle["rows"]):
        c = 0
        for value, length in runs:
            mask[r, c : c + length] = value
            c += length
    return mask


@dataclass
class PredictionVersion:
    mask: np.ndarray
    label_space_snapshot: list[list]  # [[class_id, name], ...]


@dataclass
class Job:
    job_id: str
    session_id: str
    state: str = "queued"  # queued | running | done | failed
    step: int = 0
    fraction: float = 0.0
    loss_tail: list[dict] = field(default_factory=list)
    error: str | None = None


@dataclass
class Session:
    session_id: str
    image: np.ndarray
    model: SegModel
    memory: ModelSnapshot | None = None
    annotations: SparseAnnotations | None = None
    predictions: list[PredictionVersion] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)
    active_job: str | None = None


class AnnotationPayload(BaseModel):
    points: list[dict]


class FinetunePayload(BaseModel):
    steps: int | None = None
    iterations_per_step: int | None = None
    learning_rate: float | None = None
    regularizer: str | None = None
    pseudo_label_cap: int | None = None
    batch_size: int | None = None
    crop_size: int | None = None
    seed: int | None = None


class ServiceConfig(BaseModel):
    checkpoint_dir: str = "."
    workers: int = 1

    @classmethod
    def from_env(cls, **overrides) -> "ServiceConfig":
        cfg = {
            "checkpoint_dir": os.environ.get("INCSEG_CHECKPOINT_DIR", "."),
            "workers": int(os.environ.get("INCSEG_WORKERS", "1")),
        }
        cfg.update(overrides)
        return cls(**cfg)


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig.from_env()
    app = FastAPI(title="incseg service")
    sessions: dict[str, Session] = {}
    jobs: dict[str, Job] = {}
    work_queue: "queue.Queue[str]" = queue.Queue()

    def legend(pairs) -> list[dict]:
        return [
            {"class_id": cid, "name": name, "color": PALETTE[cid % len(PALETTE)]}
            for cid, name in pairs
        ]

    def run_job(job_id: str) -> None:
        job = jobs[job_id]
        session = sessions[job.session_id]
        job.state = "running"
        try:
            cfg = job_config(job)
            clicks = SparseAnnotations(
                image_id=session.session_id, points=list(session.annotations.points)
            )
            sample = FinetuneSample(image=session.image, clicks=clicks)

            def progress(step, fraction):
                job.step = step
                job.fraction = fraction

            _, trace = finetune_incremental(
                session.model, session.memory, [sample], cfg, progress=progress
            )
            job.loss_tail = trace.to_records()[-5:]
            _, mask = predict_sliding(session.model, session.image)
            with session.lock:
                session.predictions.append(
                    PredictionVersion(
                        mask=mask,
                        label_space_snapshot=[[c, n] for c, n in session.model.label_space.classes],
                    )
                )
                session.active_job = None
            job.fraction = 1.0
            job.state = "done"
        except Exception as e:  # job failures surface through polling
            job.error = str(e)
            job.state = "failed"
            with session.lock:
                session.active_job = None

    def job_config(job: Job) -> FinetuneConfig:
        o = job_overrides[job.job_id]
        loss = LossConfig(regularizer=o.regularizer or "none")
        kwargs = {
            k: v
            for k, v in o.model_dump().items()
            if v is not None and k not in ("regularizer",)
        }
        steps = kwargs.get("steps", 30)
        return FinetuneConfig(
            loss=loss,
            selection_mode="deployment",
            selection_window=min(15, steps),
            **kwargs,
        )

    job_overrides: dict[str, FinetunePayload] = {}

    def worker_loop():
        while True:
            job_id = work_queue.get()
            if job_id is None:
                return
            run_job(job_id)

    for _ in range(config.workers):
        threading.Thread(target=worker_loop, daemon=True).start()

    @app.post("/sessions", status_code=201)
    async def create_session(image: UploadFile = File(...), checkpoint: str = ""):
        try:
            raw = await image.read()
            img = np.asarray(Image.open(io.BytesIO(raw)).convert("RGB"))
        except Exception as e:
            raise HTTPException(400, f"cannot decode image: {e}")
        ckpt_path = os.path.join(config.checkpoint_dir, checkpoint)
        try:
            model = load_checkpoint(ckpt_path)
        except InputContractError as e:
            raise HTTPException(400, str(e))
        sid = uuid.uuid4().hex
        session = Session(session_id=sid, image=img, model=model)
        _, mask = predict_sliding(model, img)
        session.predictions.append(
            PredictionVersion(
                mask=mask,
                label_space_snapshot=[[c, n] for c, n in model.label_space.classes],
            )
        )
        session.annotations = SparseAnnotations(image_id=sid)
        sessions[sid] = session
        return {"session_id": sid, "height": img.shape[0], "width": img.shape[1],
                "legend": legend(model.label_space.classes)}

    def get_session(sid: str) -> Session:
        if sid not in sessions:
            raise HTTPException(404, "unknown session")
        return sessions[sid]

    @app.post("/sessions/{sid}/classes", status_code=201)
    def register_class(sid: str, body: dict):
        session = get_session(sid)
        name = body.get("name")
        if not name:
            raise HTTPException(422, "missing class name")
        with session.lock:
            if session.model.label_space.new_class_id is not None:
                raise HTTPException(409, "a new class is already registered")
            try:
                session.memory = session.model.snapshot()
                session.model.expand_head(name, init_mode=body.get("init_mode", "zero"))
            except RegistryError as e:
                raise HTTPException(409, str(e))
        return {"class_id": session.model.label_space.new_class_id,
                "legend": legend(session.model.label_space.classes)}

    @app.post("/sessions/{sid}/annotations")
    def add_annotations(sid: str, body: AnnotationPayload):
        session = get_session(sid)
        space = session.model.label_space
        if space.new_class_id is None:
            raise HTTPException(409, "register the new class before annotating")
        h, w = session.image.shape[:2]
        allowed = {space.new_class_id, space.background_id}
        with session.lock:
            staged = SparseAnnotations(
                image_id=sid, points=list(session.annotations.points)
            )
            for rec in body.points:
                if rec.get("origin", "user_click") != "user_click":
                    raise HTTPException(422, "pseudo-label points are server-generated only")
                r, c, cid = int(rec["row"]), int(rec["col"]), int(rec["class_id"])
                if not (0 <= r < h and 0 <= c < w):
                    raise HTTPException(422, f"point ({r}, {c}) outside image")
                if cid not in allowed:
                    raise HTTPException(
                        422,
                        "clicks may only carry the new class or background "
                        "(old classes come from pseudo-labels)",
                    )
                try:
                    staged.add(Point(r, c, cid, Origin.user_click))
                except AnnotationError as e:
                    raise HTTPException(422, str(e))
            session.annotations = staged
        return {"count": len(session.annotations)}

    @app.post("/sessions/{sid}/finetune", status_code=202)
    def start_finetune(sid: str, body: FinetunePayload):
        session = get_session(sid)
        if session.model.label_space.new_class_id is None:
            raise HTTPException(409, "no new class registered")
        if len(session.annotations) == 0:
            raise HTTPException(422, "no annotations provided")
        with session.lock:
            if session.active_job is not None:
                raise HTTPException(409, "a fine-tune job is already running")
            job_id = uuid.uuid4().hex
            session.active_job = job_id
        job = Job(job_id=job_id, session_id=sid)
        jobs[job_id] = job
        job_overrides[job_id] = body
        work_queue.put(job_id)
        return {"job_id": job_id}

    @app.get("/sessions/{sid}/predictions/{version}")
    def get_prediction(sid: str, version: int):
        session = get_session(sid)
        if not 0 <= version < len(session.predictions):
            raise HTTPException(404, "unknown prediction version")
        pv = session.predictions[version]
        return {
            "version": version,
            "mask": encode_rle(pv.mask),
            "legend": legend(pv.label_space_snapshot),
            "latest": len(session.predictions) - 1,
        }

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        if job_id not in jobs:
            raise HTTPException(404, "unknown job")
        job = jobs[job_id]
        return {
            "state": job.state,
            "step": job.step,
            "fraction": job.fraction,
            "loss_breakdown_tail": job.loss_tail,
            "error": job.error,
        }

    app.state.sessions = sessions
    app.state.jobs = jobs
    return app


def main():  # pragma: no cover - convenience runner
    import uvicorn

    port = int(os.environ.get("INCSEG_PORT", "8008"))
    uvicorn.run(create_app(), host="127.0.0.1", port=port)


if __name__ == "__main__":  # pragma: no cover
    main()
