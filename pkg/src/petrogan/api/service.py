"""HTTP facade over loaded checkpoints: generation with truncation,
direction edits and style mixing, image projection, and the survey flow.

Model snapshots are immutable after load and shared by all requests; the
only writable state is the survey response log (single writer) and the
bounded in-memory stores for projection jobs and reconstructions.
"""

from __future__ import annotations

import hashlib
import io
import json
import threading
import uuid
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, Form, HTTPException, Query, Response, UploadFile
from fastapi.staticfiles import StaticFiles
from PIL import Image

from .. import survey as survey_mod
from ..images import center_crop_resize, encode_png
from ..latent import ProjectionConfig, SefaBasis, project, render, sefa
from ..trainer import Checkpoint
from . import schemas

SYNC_PROJECT_STEPS = 200
JOB_STORE_LIMIT = 32
RECON_STORE_LIMIT = 32


class ModelEntry:
    def __init__(self, name: str, checkpoint: Checkpoint, sefa_k: int = 8):
        self.name = name
        self.generator = checkpoint.build_generator()
        self.w_avg = checkpoint.w_avg
        k = min(sefa_k, checkpoint.gan_config.style_dim)
        self.basis: SefaBasis = sefa(self.generator, k)
        self.resolution = checkpoint.gan_config.resolution
        self.style_dim = checkpoint.gan_config.style_dim


class ModelRegistry:
    """Immutable name -> model snapshot map, populated before serving."""

    def __init__(self):
        self._entries: dict[str, ModelEntry] = {}

    def add(self, name: str, checkpoint: Checkpoint, sefa_k: int = 8) -> None:
        if name in self._entries:
            raise ValueError(f"duplicate model name {name!r} at startup")
        self._entries[name] = ModelEntry(name, checkpoint, sefa_k)

    def add_file(self, path, name: str | None = None, sefa_k: int = 8) -> None:
        path = Path(path)
        self.add(name or path.stem, Checkpoint.load(path), sefa_k)

    def get(self, name: str) -> ModelEntry:
        entry = self._entries.get(name)
        if entry is None:
            raise HTTPException(status_code=404, detail=f"unknown model {name!r}")
        return entry

    def list(self) -> list[ModelEntry]:
        return [self._entries[k] for k in sorted(self._entries)]


class _BoundedStore:
    """Tiny LRU used for projection jobs and reconstruction images."""

    def __init__(self, limit: int):
        self.limit = limit
        self._data: OrderedDict[str, object] = OrderedDict()
        self._lock = threading.Lock()

    def put(self, key: str, value) -> None:
        with self._lock:
            self._data[key] = value
            self._data.move_to_end(key)
            while len(self._data) > self.limit:
                self._data.popitem(last=False)

    def get(self, key: str):
        with self._lock:
            return self._data.get(key)


class SurveyStore:
    """Deterministic form cache plus a durable append-only response log."""

    def __init__(self, real_pool, data_dir=None):
        self.real_pool = real_pool
        self.data_dir = Path(data_dir) if data_dir else None
        self._forms: dict[str, dict] = {}
        self._lock = threading.Lock()
        self._responses: list[dict] = []
        if self.data_dir:
            self.data_dir.mkdir(parents=True, exist_ok=True)
            log = self.data_dir / "responses.jsonl"
            if log.exists():
                self._responses = [json.loads(line) for line in
                                   log.read_text().splitlines() if line.strip()]

    def form_id(self, model: str, n: int, seed: int) -> str:
        return hashlib.blake2s(f"{model}:{n}:{seed}".encode(),
                               digest_size=6).hexdigest()

    def build(self, entry: ModelEntry, n: int, seed: int):
        fid_ = self.form_id(entry.name, n, seed)
        if fid_ not in self._forms:
            form, key = survey_mod.build_survey(
                self.real_pool, entry.generator, entry.w_avg, n=n, seed=seed)
            self._forms[fid_] = {"form": form, "key": key, "model": entry.name,
                                 "n": n, "seed": seed}
        return fid_, self._forms[fid_]

    def lookup(self, form_id: str) -> dict | None:
        return self._forms.get(form_id)

    def append_response(self, record: dict) -> None:
        with self._lock:
            self._responses.append(record)
            if self.data_dir:
                with open(self.data_dir / "responses.jsonl", "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")

    def all_responses(self) -> list[dict]:
        with self._lock:
            return list(self._responses)


def create_app(registry: ModelRegistry, real_pool=None, data_dir=None,
               static_dir=None, project_workers: int = 2) -> FastAPI:
    app = FastAPI(title="petrogan explorer", version="0.1.0")
    surveys = SurveyStore(real_pool, data_dir) if real_pool is not None else None
    jobs = _BoundedStore(JOB_STORE_LIMIT)
    recons = _BoundedStore(RECON_STORE_LIMIT)
    pool = ThreadPoolExecutor(max_workers=project_workers)

    # -- models and generation ----------------------------------------------

    @app.get("/api/models", response_model=list[schemas.ModelInfo])
    def list_models():
        return [schemas.ModelInfo(name=e.name, resolution=e.resolution,
                                  style_dim=e.style_dim,
                                  sefa_k=e.basis.directions.shape[0])
                for e in registry.list()]

    @app.get("/api/models/{name}/basis", response_model=schemas.BasisOut)
    def model_basis(name: str):
        e = registry.get(name)
        return schemas.BasisOut(
            model=e.name, layer_range=e.basis.layer_range,
            directions=[schemas.DirectionInfo(index=i, eigenvalue=float(v))
                        for i, v in enumerate(e.basis.eigenvalues)])

    def _parse_edits(e: ModelEntry, dirs: str | None, alphas: str | None):
        if not dirs:
            return None
        try:
            idx = [int(s) for s in dirs.split(",") if s != ""]
            mag = [float(s) for s in (alphas or "").split(",") if s != ""]
        except ValueError:
            raise HTTPException(422, detail="dirs/alphas must be comma-separated numbers")
        if len(idx) != len(mag):
            raise HTTPException(422, detail="dirs and alphas lengths differ")
        k = e.basis.directions.shape[0]
        for i in idx:
            if not 0 <= i < k:
                raise HTTPException(422, detail=f"dirs: index {i} out of range 0..{k - 1}")
        return list(zip(idx, mag))

    @app.get("/api/generate")
    def generate(model: str,
                 seed: int = Query(0, ge=0),
                 psi: float = Query(1.0, ge=0.0, le=2.0),
                 dirs: str | None = None,
                 alphas: str | None = None,
                 mixseed: int | None = Query(None, ge=0),
                 mixlayer: int | None = None):
        e = registry.get(model)
        edits = _parse_edits(e, dirs, alphas)
        if mixlayer is not None and not 0 <= mixlayer <= e.generator.cfg.num_style_slots:
            raise HTTPException(422, detail="mixlayer: out of range")
        image, styles = render(e.generator, e.w_avg, seed=seed, psi=psi,
                               basis=e.basis, edits=edits, mix_seed=mixseed,
                               mix_layer=mixlayer)
        blob = (np.concatenate([np.asarray(s).ravel() for s in styles])
                if isinstance(styles, list) else np.asarray(styles).ravel())
        w_hash = hashlib.sha256(blob.astype("<f4").tobytes()).hexdigest()
        return Response(content=encode_png(image), media_type="image/png",
                        headers={"X-W-Hash": w_hash, "X-Seed": str(seed),
                                 "X-Psi": repr(psi)})

    # -- projection ----------------------------------------------------------

    def _run_projection(e: ModelEntry, image: np.ndarray, steps: int) -> schemas.ProjectionOut:
        result = project(image, e.generator, e.w_avg,
                         ProjectionConfig(steps=steps))
        token = uuid.uuid4().hex[:16]
        recons.put(token, encode_png(result.reconstruction))
        w = result.w if isinstance(result.w, np.ndarray) else result.w[0]
        return schemas.ProjectionOut(w=[float(x) for x in w],
                                     loss_trace=[float(v) for v in result.loss_trace],
                                     recon=f"/api/recon/{token}.png", steps=steps)

    @app.post("/api/project")
    def project_image(model: str = Form(...), steps: int = Form(200, ge=0),
                      image: UploadFile = File(...)):
        e = registry.get(model)
        raw = image.file.read()
        try:
            with Image.open(io.BytesIO(raw)) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except Exception as exc:
            raise HTTPException(415, detail=f"undecodable image upload: {exc}")
        arr = center_crop_resize(arr, e.resolution)
        if steps <= SYNC_PROJECT_STEPS:
            return _run_projection(e, arr, steps)
        job_id = uuid.uuid4().hex[:12]
        jobs.put(job_id, {"status": "pending", "result": None, "error": None})

        def work():
            rec = jobs.get(job_id)
            if rec is None:  # evicted before it started
                return
            rec["status"] = "running"
            try:
                rec["result"] = _run_projection(e, arr, steps)
                rec["status"] = "done"
            except Exception as exc:  # surfaced through the job record
                rec["error"] = str(exc)
                rec["status"] = "error"

        pool.submit(work)
        return schemas.JobOut(job_id=job_id, status="pending")

    @app.get("/api/jobs/{job_id}", response_model=schemas.JobOut)
    def job_status(job_id: str):
        rec = jobs.get(job_id)
        if rec is None:
            raise HTTPException(404, detail=f"unknown job {job_id!r}")
        return schemas.JobOut(job_id=job_id, status=rec["status"],
                              result=rec["result"], error=rec["error"])

    @app.get("/api/recon/{token}.png")
    def recon_image(token: str):
        blob = recons.get(token)
        if blob is None:
            raise HTTPException(404, detail="reconstruction expired")
        return Response(content=blob, media_type="image/png")

    # -- survey ---------------------------------------------------------------

    def _require_surveys() -> SurveyStore:
        if surveys is None:
            raise HTTPException(404, detail="server started without a real image pool")
        return surveys

    @app.get("/api/survey/form", response_model=schemas.SurveyFormOut)
    def survey_form(n: int = Query(10, ge=1), seed: int = Query(0, ge=0),
                    model: str | None = None):
        store = _require_surveys()
        entries = registry.list()
        if not entries:
            raise HTTPException(404, detail="no models loaded")
        entry = registry.get(model) if model else entries[0]
        try:
            form_id, rec = store.build(entry, n, seed)
        except survey_mod.SurveyError as exc:
            raise HTTPException(422, detail=str(exc))
        items = [schemas.SurveyItemOut(
            item_id=i.item_id,
            left=f"/api/survey/image/{form_id}/{i.item_id}/A.png",
            right=f"/api/survey/image/{form_id}/{i.item_id}/B.png")
            for i in rec["form"].items]
        return schemas.SurveyFormOut(form_id=form_id, n=n, seed=seed,
                                     model=entry.name, items=items)

    @app.get("/api/survey/image/{form_id}/{item_id}/{side}.png")
    def survey_image(form_id: str, item_id: str, side: str):
        store = _require_surveys()
        rec = store.lookup(form_id)
        if rec is None or side not in ("A", "B"):
            raise HTTPException(404, detail="unknown survey image")
        key_item = next((k for k in rec["key"].items if k["item_id"] == item_id), None)
        if key_item is None:
            raise HTTPException(404, detail="unknown survey item")
        want = "left" if side == "A" else "right"
        entry = registry.get(rec["model"])
        if key_item["real_side"] == want:
            from ..images import load_image
            img = load_image(key_item["real_source"])
        else:
            img, _ = render(entry.generator, entry.w_avg,
                            seed=key_item["fake_seed"], psi=0.7)
        return Response(content=encode_png(img), media_type="image/png")

    @app.post("/api/survey/response", status_code=201)
    def survey_response(body: schemas.SurveyResponseIn):
        store = _require_surveys()
        rec = store.lookup(body.form_id)
        if rec is None:
            raise HTTPException(422, detail=f"unknown form_id {body.form_id!r}")
        if len(body.answers) != rec["n"]:
            raise HTTPException(422, detail=f"expected {rec['n']} answers, "
                                            f"got {len(body.answers)}")
        store.append_response({"form_id": body.form_id,
                               "respondent": body.respondent,
                               "background": body.background,
                               "answers": list(body.answers)})
        return {"stored": True}

    @app.get("/api/survey/report", response_model=schemas.ReportOut)
    def survey_report():
        store = _require_surveys()
        counts = {"total": 0, "correct": 0, "incorrect": 0, "unsure": 0}
        per_bg: dict[str, dict] = {}
        per_item: dict[str, list] = {}
        responders = {"n": 0}
        bg_responses: dict[str, int] = {}
        for resp in store.all_responses():
            rec = store.lookup(resp["form_id"])
            if rec is None:
                continue
            responders["n"] += 1
            bg = resp["background"]
            bg_responses[bg] = bg_responses.get(bg, 0) + 1
            for answer, key_item in zip(resp["answers"], rec["key"].items):
                bucket = per_bg.setdefault(bg, {"total": 0, "correct": 0,
                                                "incorrect": 0, "unsure": 0})
                label = ("unsure" if answer == "not_sure"
                         else "correct" if answer == key_item["real_side"]
                         else "incorrect")
                for c in (counts, bucket):
                    c["total"] += 1
                    c[label] += 1
                slot = per_item.setdefault(f"{resp['form_id']}/{key_item['item_id']}",
                                           [0, 0])
                slot[1] += 1
                if label == "incorrect":
                    slot[0] += 1

        def as_group(c, responses):
            if c["total"] == 0:
                return schemas.GroupScoreOut(responses=0, correct_pct=0.0,
                                             incorrect_pct=0.0, not_sure_pct=0.0)
            return schemas.GroupScoreOut(
                responses=responses,
                correct_pct=100.0 * c["correct"] / c["total"],
                incorrect_pct=100.0 * c["incorrect"] / c["total"],
                not_sure_pct=100.0 * c["unsure"] / c["total"])

        return schemas.ReportOut(
            total_responses=responders["n"],
            overall=as_group(counts, responders["n"]),
            by_background={bg: as_group(c, bg_responses[bg])
                           for bg, c in per_bg.items()},
            item_difficulty={k: (v[0] / v[1] if v[1] else 0.0)
                             for k, v in per_item.items()})

    if static_dir and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True),
                  name="ui")
    return app
