"""HTTP front for the pool server (FastAPI).

Same state machine as the socket protocol in :mod:`ddml.net`: the routes
delegate to :meth:`PoolServer.handle`, so a draw or submit over HTTP and one
over the socket are indistinguishable to the pool.
"""

from __future__ import annotations

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import privacy
from .errors import DDMLError
from .net import PoolServer


class SpecReply(BaseModel):
    ok: bool = True
    spec: dict


class DrawReply(BaseModel):
    ok: bool = True
    weights: list[float]
    version: int


class SubmitRequest(BaseModel):
    weights: list[float]


class SubmitReply(BaseModel):
    ok: bool = True
    status: str


class ErrorReply(BaseModel):
    ok: bool = False
    error: str


class AnalyzeRequest(BaseModel):
    k: int = Field(ge=2)
    epsilon: float = Field(gt=0)
    gamma: float = Field(default=1.0, gt=0)
    T: int = Field(default=10_000, ge=1)
    delta: float = Field(default=1e-8, gt=0, lt=0.5)


class Report(BaseModel):
    adversary: str
    epsilon_effective: float
    delta: float
    method: str
    trials: int
    notes: list[str]


def _reply(body: dict, model):
    if body.get("ok"):
        return model(**body)
    return JSONResponse(status_code=400, content=body)


def create_app(server: PoolServer) -> FastAPI:
    app = FastAPI(title="ddml pool server")
    errors = {400: {"model": ErrorReply}}

    @app.get("/spec", response_model=SpecReply)
    def get_spec():
        return _reply(server.handle({"op": "spec"}), SpecReply)

    @app.post("/draw", response_model=DrawReply, responses=errors)
    def draw():
        return _reply(server.handle({"op": "draw"}), DrawReply)

    @app.post("/submit", response_model=SubmitReply, responses=errors)
    def submit(req: SubmitRequest):
        return _reply(server.handle({"op": "submit", "weights": req.weights}), SubmitReply)

    @app.get("/counters")
    def counters() -> dict[str, int]:
        return dict(server.pool.counters)

    @app.get("/snapshot")
    def snapshot() -> dict:
        return server.pool.snapshot()

    @app.post("/analyze", response_model=list[Report], responses=errors)
    def analyze(req: AnalyzeRequest):
        try:
            reports = privacy.analyze(req.k, req.epsilon, req.gamma, req.T, req.delta)
        except DDMLError as exc:
            return JSONResponse(status_code=400, content={"ok": False, "error": f"{type(exc).__name__}: {exc}"})
        return [Report(**r.to_dict()) for r in reports]

    return app
