"""HTTP API for generation, layout fitting, and evaluation.

The loaded checkpoint is an immutable snapshot shared by all requests;
generation concurrency is capped by a semaphore while health stays async and
never blocks behind it.
"""

import base64
import hashlib
import io
import threading
import time
from typing import Dict, List, Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel, Field

from .dataset import DETECTION_PALETTE
from .diffusion import load_state
from .errors import ContractViolation, LayoutParseError, NumericFailure, UnknownColorError
from .layout import fit_layout, layout_from_json, layout_to_json, masks_from_layout, labels_from_masks
from .pipeline import ConditionConflict, evaluate_sets, generate


class GenerateRequest(BaseModel):
    layout: dict
    texts: Dict[str, str] = Field(default_factory=dict)
    references: Dict[str, str] = Field(default_factory=dict)  # base64 PNG
    drop: Optional[Dict[str, str]] = None
    guidance_scale: float = 3.0
    use_ca: bool = True
    seed: int = 0
    steps: int = Field(default=50, ge=1, le=1000)


class GenerateResponse(BaseModel):
    image: str  # base64 PNG
    drop: Dict[str, str]
    seed: int
    timings: Dict[str, float]


class FitLayoutRequest(BaseModel):
    labels: str  # base64 PNG: paletted component ids, or a palette-colored raster


class EvaluateRequest(BaseModel):
    generated: List[str]
    layouts: List[dict]
    references: Optional[List[str]] = None


class HealthResponse(BaseModel):
    status: str
    checkpoint_id: str


def _png_to_array(b64, field):
    try:
        raw = base64.b64decode(b64, validate=True)
        img = Image.open(io.BytesIO(raw))
        img.load()
    except Exception as e:
        raise HTTPException(400, detail=f"{field}: not a decodable PNG ({e})") from e
    if img.mode == "P":
        return np.asarray(img).astype(np.uint8)
    return np.asarray(img.convert("RGB"))


def _array_to_png_b64(arr):
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def create_app(checkpoint_path=None, workers=2, ui_dir=None):
    app = FastAPI(title="layoutdoll", version="0.1.0")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    state = {"model": None, "checkpoint_id": "none"}
    if checkpoint_path is not None:
        model, _, _ = load_state(checkpoint_path)
        digest = hashlib.sha256(open(checkpoint_path, "rb").read()).hexdigest()
        state["model"] = model
        state["checkpoint_id"] = digest[:12]
    gate = threading.Semaphore(max(1, int(workers)))

    @app.exception_handler(RequestValidationError)
    async def schema_error(request: Request, exc: RequestValidationError):
        first = exc.errors()[0]
        path = ".".join(str(p) for p in first.get("loc", ())[1:]) or "body"
        return JSONResponse(status_code=400,
                            content={"detail": f"{path}: {first.get('msg')}"})

    @app.get("/v1/health", response_model=HealthResponse)
    async def health():
        return HealthResponse(status="ok", checkpoint_id=state["checkpoint_id"])

    @app.post("/v1/generate", response_model=GenerateResponse)
    def generate_endpoint(req: GenerateRequest):
        if state["model"] is None:
            raise HTTPException(503, detail="no checkpoint loaded")
        try:
            spec = layout_from_json(req.layout)
        except LayoutParseError as e:
            raise HTTPException(400, detail=str(e)) from e
        refs = {comp: _png_to_array(b64, f"references.{comp}")
                for comp, b64 in req.references.items()}
        t0 = time.time()
        try:
            with gate:
                image, effective = generate(
                    state["model"], spec, req.texts, refs, drop=req.drop,
                    seed=req.seed, steps=req.steps,
                    guidance_scale=req.guidance_scale, use_ca=req.use_ca)
        except ConditionConflict as e:
            raise HTTPException(409, detail=str(e)) from e
        except ContractViolation as e:
            raise HTTPException(400, detail=str(e)) from e
        except NumericFailure as e:
            raise HTTPException(500, detail=str(e)) from e
        total = time.time() - t0
        return GenerateResponse(
            image=_array_to_png_b64(image), drop=effective, seed=req.seed,
            timings={"total_s": round(total, 3),
                     "per_step_s": round(total / req.steps, 4)})

    @app.post("/v1/fit-layout")
    def fit_layout_endpoint(req: FitLayoutRequest):
        arr = _png_to_array(req.labels, "labels")
        if arr.ndim == 2:  # paletted component ids
            from .layout import COMPONENTS
            if arr.max() > len(COMPONENTS):
                raise HTTPException(400, detail=f"unknown palette index {int(arr.max())}")
            labels = arr
        else:  # palette-colored raster
            try:
                masks = masks_from_layout(arr)
            except UnknownColorError as e:
                raise HTTPException(400, detail=str(e)) from e
            labels = labels_from_masks(masks, (arr.shape[1], arr.shape[0]))
        spec = fit_layout(labels)
        import json
        return JSONResponse(content=json.loads(layout_to_json(spec)))

    @app.post("/v1/evaluate")
    def evaluate_endpoint(req: EvaluateRequest):
        if not req.generated or len(req.generated) != len(req.layouts):
            raise HTTPException(400, detail="generated and layouts must be "
                                            "non-empty lists of equal length")
        images = [_png_to_array(b, f"generated[{i}]")
                  for i, b in enumerate(req.generated)]
        try:
            specs = [layout_from_json(doc) for doc in req.layouts]
        except LayoutParseError as e:
            raise HTTPException(400, detail=str(e)) from e
        ref_imgs = None
        if req.references:
            ref_imgs = [_png_to_array(b, f"references[{i}]")
                        for i, b in enumerate(req.references)]
        report = evaluate_sets(images, specs, ref_imgs)
        import json
        return JSONResponse(content=json.loads(report.to_json()))

    return app
