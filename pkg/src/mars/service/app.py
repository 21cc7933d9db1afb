"""HTTP service wrapping the core package: channel-multiplex utilities,
tokenization, generation, evaluation, and artifact inspection over one
workspace. Checkpoints load lazily on first use and stay resident."""
from __future__ import annotations

import base64
import numpy as np
from fastapi import FastAPI, Query
from fastapi.responses import JSONResponse

from .. import __version__, dsp
from ..armodel import UNCONDITIONAL, ar_sample
from ..cmx import CmxDescriptor, PackedTensor, cmx_pack, cmx_unpack
from ..errors import InvalidInputError, MarsError
from ..tokenizer import MultiScaleTokenMap, detokenize, tokenize
from ..pipeline.cache import Workspace
from ..pipeline.config import to_flat
from ..pipeline.inspect_tool import describe
from . import schemas as s

_ERROR_STATUS = {
    "invalid-input": 400,
    "invalid-config": 400,
    "missing-prerequisite": 409,
    "io-error": 422,
    "stage-failure": 500,
    "internal": 500,
}


class ServiceRuntime:
    """Lazy holder of the trained models behind the endpoints."""

    def __init__(self, ws: Workspace):
        self.ws = ws
        self._tokenizer = None
        self._ar = None
        self._codec = None

    @property
    def codec(self):
        if self._codec is None:
            stats = self.ws.load_stats()
            self._codec = self.ws.cfg.codec(stats.mean, stats.std)
        return self._codec

    @property
    def tokenizer(self):
        if self._tokenizer is None:
            from ..pipeline.runs import load_tokenizer

            self._tokenizer = load_tokenizer(self.ws)
        return self._tokenizer

    @property
    def ar(self):
        if self._ar is None:
            from ..pipeline.runs import load_ar

            self._ar = load_ar(self.ws, self.tokenizer)
        return self._ar


def _b64_to_array(b64: str, shape: list[int]) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
    except Exception as e:
        raise InvalidInputError(f"invalid base64 payload: {e}") from e
    count = int(np.prod(shape))
    if len(raw) != 4 * count:
        raise InvalidInputError(
            f"payload holds {len(raw)} bytes, shape {shape} needs {4 * count}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def _array_to_b64(a: np.ndarray) -> str:
    return base64.b64encode(np.asarray(a, dtype="<f4").tobytes()).decode("ascii")


def _wav_response(w: dsp.Waveform, cfg_hash: str) -> s.AudioResponse:
    return s.AudioResponse(
        wav_b64=base64.b64encode(dsp.encode_wav(w, 16)).decode("ascii"),
        sample_rate=w.sample_rate, duration_seconds=w.duration, config_hash=cfg_hash)


def _token_map_model(tm: MultiScaleTokenMap) -> s.TokenMapModel:
    return s.TokenMapModel(schedule=list(tm.schedule),
                           grids=[g.tolist() for g in tm.grids])


def _token_map_from_model(m: s.TokenMapModel, vocab: int) -> MultiScaleTokenMap:
    return MultiScaleTokenMap([np.asarray(g) for g in m.grids], tuple(m.schedule), vocab)


def create_app(ws: Workspace) -> FastAPI:
    app = FastAPI(title="mars", version=__version__)
    runtime = ServiceRuntime(ws)

    @app.exception_handler(MarsError)
    async def mars_error_handler(_, exc: MarsError):
        return JSONResponse(
            status_code=_ERROR_STATUS.get(exc.category, 500),
            content=s.ErrorResponse(category=exc.category, message=str(exc)).model_dump())

    @app.get("/health", response_model=s.HealthResponse)
    def health():
        return s.HealthResponse(status="ok", version=__version__, config_hash=ws.hash)

    @app.get("/config", response_model=s.ConfigResponse)
    def config():
        return s.ConfigResponse(config_hash=ws.hash, entries=to_flat(ws.cfg))

    @app.get("/conditions", response_model=s.ConditionsResponse)
    def conditions():
        return s.ConditionsResponse(
            classes=list(range(ws.cfg.ar.condition_classes)),
            unconditional=UNCONDITIONAL)

    @app.post("/cmx/pack", response_model=s.CmxTensorResponse)
    def pack(req: s.CmxPackRequest):
        x = _b64_to_array(req.values_b64, req.shape)
        desc = CmxDescriptor(tuple(req.shape), req.factor_h, req.factor_w, req.mode)
        packed = cmx_pack(x, desc)
        return s.CmxTensorResponse(
            shape=list(packed.values.shape), values_b64=_array_to_b64(packed.values),
            descriptor=s.CmxDescriptorModel(
                in_shape=list(desc.in_shape), factor_h=desc.factor_h,
                factor_w=desc.factor_w, mode=desc.mode))

    @app.post("/cmx/unpack", response_model=s.CmxTensorResponse)
    def unpack(req: s.CmxUnpackRequest):
        d = req.descriptor
        desc = CmxDescriptor(tuple(d.in_shape), d.factor_h, d.factor_w, d.mode)
        packed = PackedTensor(_b64_to_array(req.values_b64, req.shape), desc)
        restored = cmx_unpack(packed)
        return s.CmxTensorResponse(
            shape=list(restored.shape), values_b64=_array_to_b64(restored),
            descriptor=s.CmxDescriptorModel(
                in_shape=list(desc.in_shape), factor_h=1, factor_w=1, mode=desc.mode))

    @app.post("/tokenize", response_model=s.TokenizeResponse)
    def tokenize_endpoint(req: s.TokenizeRequest):
        try:
            raw = base64.b64decode(req.wav_b64, validate=True)
        except Exception as e:
            raise InvalidInputError(f"invalid base64 payload: {e}") from e
        w = dsp.decode_wav(raw)
        tm = tokenize(w, runtime.tokenizer, runtime.codec)
        return s.TokenizeResponse(token_map=_token_map_model(tm), config_hash=ws.hash)

    @app.post("/detokenize", response_model=s.AudioResponse)
    def detokenize_endpoint(req: s.DetokenizeRequest):
        tm = _token_map_from_model(req.token_map, ws.cfg.tokenizer.codebook_size)
        wave = detokenize(tm, runtime.tokenizer, runtime.codec, seed=req.seed)
        return _wav_response(wave, ws.hash)

    @app.post("/generate", response_model=s.GenerateResponse)
    def generate(req: s.GenerateRequest):
        condition = UNCONDITIONAL if req.condition is None else req.condition
        items = []
        for i in range(req.count):
            seeds = np.random.SeedSequence([req.seed, i]).generate_state(2)
            tm = ar_sample(runtime.ar, condition, seed=int(seeds[0]))
            wave = detokenize(tm, runtime.tokenizer, runtime.codec, seed=int(seeds[1]))
            items.append(s.GeneratedItem(
                wav_b64=base64.b64encode(dsp.encode_wav(wave, 16)).decode("ascii"),
                sample_rate=wave.sample_rate, duration_seconds=wave.duration,
                seed=req.seed, index=i, condition=req.condition))
        return s.GenerateResponse(items=items, config_hash=ws.hash)

    @app.post("/evaluate", response_model=s.MetricReportModel)
    def evaluate(req: s.EvaluateRequest):
        from ..pipeline.runs import run_evaluate

        report = run_evaluate(ws, req.mode)
        return s.MetricReportModel(**report.as_dict())

    @app.get("/inspect", response_model=s.InspectResponse)
    def inspect(path: str = Query(..., description="path inside the workspace")):
        target = (ws.root / path).resolve()
        if not str(target).startswith(str(ws.root.resolve())):
            raise InvalidInputError("inspect is restricted to the workspace directory")
        return s.InspectResponse(path=str(target), description=describe(target))

    return app
