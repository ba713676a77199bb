"""HTTP render service: JSON in, base64 PNG out.

The service wraps one renderer checkpoint and a directory of source
images. Rendering is read-only on the model and guarded by a single
in-flight limit (excess concurrent renders receive 429), so any request
order yields the same images as serial execution.
"""

from __future__ import annotations

import base64
import io
import json
import os
import tempfile
import threading
import time
import uuid
from typing import Dict, List, Optional

import numpy as np
from fastapi import FastAPI, File, Form, Request, UploadFile
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel, Field

from .data import AUDIO_RATE, WavError, audio_features, load_png, image_to_u8, read_wav
from .face import BETA_DIM, FRAME_DIM, MotionFrame, window_descriptor, descriptors_to_tensor
from .flow import NormFlowModel, generate_sequence
from .nets import RendererModel, interpolate_latent
from .rng import Rng
from .tensor import Tensor, no_grad

MAX_UPLOAD_SECONDS = 60

# Published per-channel slider ranges for the editing UI.
CHANNEL_RANGES = {
    "beta": (-3.0, 3.0),
    "rotation": (-0.8, 0.8),
    "translation": (-1.0, 1.0),
    "crop_scale": (0.5, 1.5),
    "crop_offset": (-0.3, 0.3),
}


class MotionPayload(BaseModel):
    beta: List[float] = Field(default_factory=lambda: [0.0] * BETA_DIM)
    rotation: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    translation: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    crop: List[float] = Field(default_factory=lambda: [1.0, 0.0, 0.0])

    def to_frame(self) -> MotionFrame:
        return MotionFrame(np.array(self.beta), np.array(self.rotation),
                           np.array(self.translation), np.array(self.crop))


class RenderRequest(BaseModel):
    source_id: str
    motion: Optional[MotionPayload] = None
    p1: Optional[MotionPayload] = None
    p2: Optional[MotionPayload] = None
    alpha: Optional[float] = None
    return_intermediates: bool = False


class InterpolateRequest(BaseModel):
    source_id: str
    p1: MotionPayload
    p2: MotionPayload
    alpha: float


def flow_to_color(flow: np.ndarray) -> np.ndarray:
    """Optical-flow color wheel: hue = direction, saturation = magnitude."""
    dx, dy = flow[0], flow[1]
    mag = np.sqrt(dx * dx + dy * dy)
    scale = mag.max()
    sat = mag / scale if scale > 1e-12 else np.zeros_like(mag)
    hue = (np.arctan2(dy, dx) + np.pi) / (2.0 * np.pi)  # [0,1)
    h6 = hue * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    v = np.ones_like(sat)
    p = v * (1.0 - sat)
    q = v * (1.0 - sat * f)
    t = v * (1.0 - sat * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b]) * 2.0 - 1.0


def png_base64(img: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(image_to_u8(img).transpose(1, 2, 0), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def descriptor_schema(window_len: int) -> List[dict]:
    channels = []
    for i in range(BETA_DIM):
        lo, hi = CHANNEL_RANGES["beta"]
        channels.append({"index": i, "name": f"beta_{i}", "group": "expression",
                         "min": lo, "max": hi, "default": 0.0})
    for i, name in enumerate(("pitch", "yaw", "roll")):
        lo, hi = CHANNEL_RANGES["rotation"]
        channels.append({"index": BETA_DIM + i, "name": name, "group": "rotation",
                         "min": lo, "max": hi, "default": 0.0})
    for i, name in enumerate(("tx", "ty", "tz")):
        lo, hi = CHANNEL_RANGES["translation"]
        channels.append({"index": BETA_DIM + 3 + i, "name": name, "group": "translation",
                         "min": lo, "max": hi, "default": 0.0})
    crop_specs = [("crop_scale", CHANNEL_RANGES["crop_scale"], 1.0),
                  ("crop_dx", CHANNEL_RANGES["crop_offset"], 0.0),
                  ("crop_dy", CHANNEL_RANGES["crop_offset"], 0.0)]
    for i, (name, (lo, hi), default) in enumerate(crop_specs):
        channels.append({"index": BETA_DIM + 6 + i, "name": name, "group": "crop",
                         "min": lo, "max": hi, "default": default})
    assert len(channels) == FRAME_DIM
    return channels


class RenderService:
    def __init__(self, checkpoint_dir: str, sources: Dict[str, np.ndarray],
                 flow_dir: Optional[str] = None):
        self.model = RendererModel.load(checkpoint_dir)
        self.sources = sources
        self.lock = threading.Lock()
        self.expression_flow: Optional[NormFlowModel] = None
        self.pose_flow: Optional[NormFlowModel] = None
        if flow_dir:
            self.expression_flow = NormFlowModel.load(
                os.path.join(flow_dir, "flow_expression_checkpoint"))
            self.pose_flow = NormFlowModel.load(
                os.path.join(flow_dir, "flow_pose_checkpoint"))

    def render_frame(self, source: np.ndarray, frame: MotionFrame,
                     z_override: Optional[Tensor] = None):
        cfg = self.model.cfg
        descriptor = window_descriptor([frame], 0, cfg.window_len, mode="single")
        src = Tensor(source[None])
        with no_grad():
            desc = descriptors_to_tensor([descriptor])
            z = self.model.map_motion(desc) if z_override is None else z_override
            flow = self.model.predict_flow(src, z)
            warped = self.model.warp_image(src, flow)
            edited = self.model.edit_image(warped, src, z)
        return edited.data[0], warped.data[0], flow.data[0], z

    def latent_for(self, frame: MotionFrame) -> Tensor:
        cfg = self.model.cfg
        descriptor = window_descriptor([frame], 0, cfg.window_len, mode="single")
        with no_grad():
            return self.model.map_motion(descriptors_to_tensor([descriptor]))


def load_sources(sources_dir: str) -> Dict[str, np.ndarray]:
    import os

    sources = {}
    if sources_dir and os.path.isdir(sources_dir):
        for name in sorted(os.listdir(sources_dir)):
            if name.lower().endswith(".png"):
                sources[os.path.splitext(name)[0]] = load_png(os.path.join(sources_dir, name))
    return sources


def create_app(checkpoint_dir: str, sources_dir: str, ui_dir: Optional[str] = None,
               flow_dir: Optional[str] = None) -> FastAPI:
    service = RenderService(checkpoint_dir, load_sources(sources_dir), flow_dir=flow_dir)
    app = FastAPI(title="facerender service", openapi_url="/api/schema")
    app.state.service = service
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        errors = [{"path": ".".join(str(p) for p in e["loc"]), "message": e["msg"]}
                  for e in exc.errors()]
        return JSONResponse(status_code=400, content={"error": "invalid request", "fields": errors})

    def _error(status: int, message: str):
        return JSONResponse(status_code=status,
                            content={"error": message, "diagnostic_id": str(uuid.uuid4())})

    @app.get("/api/info")
    def info():
        cfg = service.model.cfg
        return {
            "window_len": cfg.window_len,
            "image_size": cfg.image_size,
            "z_dim": cfg.z_dim,
            "base_channels": cfg.base_channels,
            "feature_seed": cfg.feature_seed,
            "channels": descriptor_schema(cfg.window_len),
        }

    @app.get("/api/sources")
    def sources():
        return {"sources": sorted(service.sources.keys())}

    def _render_response(source: np.ndarray, frame: Optional[MotionFrame],
                         z_override: Optional[Tensor], want_intermediates: bool):
        start = time.time()
        edited, warped, flow, _ = service.render_frame(source, frame or MotionFrame.zero(),
                                                       z_override)
        payload = {"image": png_base64(edited), "latency_ms": (time.time() - start) * 1000.0}
        if want_intermediates:
            payload["warped"] = png_base64(warped)
            payload["flow_vis"] = png_base64(flow_to_color(flow))
        return payload

    @app.post("/api/render")
    def render(req: RenderRequest):
        source = service.sources.get(req.source_id)
        if source is None:
            return _error(404, f"unknown source_id '{req.source_id}'")
        if not service.lock.acquire(blocking=False):
            return _error(429, "a render is already in flight")
        try:
            if req.motion is not None:
                return _render_response(source, req.motion.to_frame(), None,
                                        req.return_intermediates)
            if req.p1 is not None and req.p2 is not None and req.alpha is not None:
                if not 0.0 <= req.alpha <= 1.0:
                    return JSONResponse(status_code=400, content={
                        "error": "invalid request",
                        "fields": [{"path": "body.alpha", "message": "must lie in [0,1]"}]})
                z = interpolate_latent(service.latent_for(req.p1.to_frame()),
                                       service.latent_for(req.p2.to_frame()), req.alpha)
                return _render_response(source, None, z, req.return_intermediates)
            return JSONResponse(status_code=400, content={
                "error": "invalid request",
                "fields": [{"path": "body.motion", "message": "motion or (p1,p2,alpha) required"}]})
        except ValueError as exc:
            return JSONResponse(status_code=400, content={
                "error": "invalid request", "fields": [{"path": "body", "message": str(exc)}]})
        except Exception:
            return _error(500, "render failed")
        finally:
            service.lock.release()

    @app.post("/api/interpolate")
    def interpolate(req: InterpolateRequest):
        source = service.sources.get(req.source_id)
        if source is None:
            return _error(404, f"unknown source_id '{req.source_id}'")
        if not 0.0 <= req.alpha <= 1.0:
            return JSONResponse(status_code=400, content={
                "error": "invalid request",
                "fields": [{"path": "body.alpha", "message": "must lie in [0,1]"}]})
        if not service.lock.acquire(blocking=False):
            return _error(429, "a render is already in flight")
        try:
            z = interpolate_latent(service.latent_for(req.p1.to_frame()),
                                   service.latent_for(req.p2.to_frame()), req.alpha)
            return _render_response(source, None, z, False)
        except Exception:
            return _error(500, "render failed")
        finally:
            service.lock.release()

    @app.post("/api/audio-drive")
    async def audio_drive(source_id: str = Form(...), wav: UploadFile = File(...),
                          temperature: float = Form(1.0), seed: int = Form(0),
                          source_motion: Optional[str] = Form(None)):
        if service.expression_flow is None or service.pose_flow is None:
            return JSONResponse(status_code=400, content={
                "error": "invalid request",
                "fields": [{"path": "service", "message": "no flow checkpoints loaded"}]})
        source = service.sources.get(source_id)
        if source is None:
            return _error(404, f"unknown source_id '{source_id}'")
        payload = await wav.read()
        if len(payload) > (MAX_UPLOAD_SECONDS + 1) * AUDIO_RATE * 2 + 1024:
            return JSONResponse(status_code=400, content={
                "error": "invalid request",
                "fields": [{"path": "wav", "message": f"longer than {MAX_UPLOAD_SECONDS}s"}]})
        with tempfile.NamedTemporaryFile(suffix=".wav") as tmp:
            tmp.write(payload)
            tmp.flush()
            try:
                pcm = read_wav(tmp.name)
            except WavError as exc:
                return JSONResponse(status_code=400, content={
                    "error": "invalid request", "fields": [{"path": "wav", "message": str(exc)}]})
        if len(pcm) > MAX_UPLOAD_SECONDS * AUDIO_RATE:
            return JSONResponse(status_code=400, content={
                "error": "invalid request",
                "fields": [{"path": "wav", "message": f"longer than {MAX_UPLOAD_SECONDS}s"}]})
        motion = MotionFrame.zero()
        if source_motion:
            try:
                motion = MotionFrame.from_json_dict(json.loads(source_motion))
            except (ValueError, KeyError) as exc:
                return JSONResponse(status_code=400, content={
                    "error": "invalid request",
                    "fields": [{"path": "source_motion", "message": str(exc)}]})
        if not service.lock.acquire(blocking=False):
            return _error(429, "a render is already in flight")
        try:
            feats = audio_features(pcm)
            if feats.shape[0] == 0:
                return JSONResponse(status_code=400, content={
                    "error": "invalid request",
                    "fields": [{"path": "wav", "message": "audio shorter than one frame"}]})
            lookahead = service.expression_flow.cfg.lookahead
            feats_ext = np.concatenate([feats, np.repeat(feats[-1:], lookahead, axis=0)])
            track = generate_sequence(service.expression_flow, service.pose_flow, feats_ext,
                                      motion, feats.shape[0], temperature=temperature,
                                      rng=Rng(seed))
            frames = []
            for frame in track:
                edited, _, _, _ = service.render_frame(source, frame)
                frames.append(png_base64(edited))
            return {"frames": frames, "motions": [f.to_json_dict() for f in track]}
        except Exception:
            return _error(500, "render failed")
        finally:
            service.lock.release()

    if ui_dir:
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    return app
