"""HTTP front end for the analyst service.

Same messages as the socket protocol in :mod:`midpoint.wire`, one request
per step: ``POST /sessions`` returns a Solicit, ``POST
/sessions/{id}/feedback`` takes a Feedback and returns an Estimate.
"""

from __future__ import annotations

from typing import Mapping

import httpx
import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .factorization import AnalystModel
from .wire import (
    AnalystError,
    AnalystService,
    Error,
    Estimate,
    Feedback,
    SelectionConfig,
    Solicit,
    build_feedback,
)

_STATUS = {"parse": 422, "protocol_violation": 409, "bad_feedback": 400, "internal": 500}


def _error_response(err: Error) -> JSONResponse:
    return JSONResponse(status_code=_STATUS[err.code], content=err.model_dump(mode="json"))


def create_app(service: AnalystService) -> FastAPI:
    app = FastAPI(title="midpoint analyst", version="0.1.0")
    app.state.service = service

    @app.exception_handler(RequestValidationError)
    async def _invalid(request: Request, exc: RequestValidationError):
        return _error_response(Error(code="parse", detail=str(exc.errors())))

    @app.get("/health")
    def health() -> dict:
        return {
            "status": "ok",
            "d": service.model.d,
            "protocol": service.config.protocol,
            "n_solicited": len(service.items),
        }

    @app.post("/sessions", response_model=Solicit)
    def open_session() -> Solicit:
        return service.open_session()

    @app.post(
        "/sessions/{session_id}/feedback",
        response_model=Estimate,
        responses={400: {"model": Error}, 409: {"model": Error}, 422: {"model": Error}},
    )
    def submit_feedback(session_id: str, feedback: Feedback):
        if feedback.session_id != session_id:
            service.close_session(session_id)
            return _error_response(Error(code="protocol_violation", detail="session id mismatch"))
        reply = service.handle_feedback(feedback)
        if isinstance(reply, Error):
            return _error_response(reply)
        return reply

    return app


def create_app_from_model(model: AnalystModel, config: SelectionConfig = SelectionConfig()) -> FastAPI:
    return create_app(AnalystService(model, config))


def user_agent_run_http(
    ratings: Mapping[str, float],
    x0: int,
    base_url: str = "http://127.0.0.1:7342",
    protocol: str = "mp",
    rng: np.random.Generator | None = None,
    client: httpx.Client | None = None,
) -> Estimate:
    """HTTP counterpart of :func:`midpoint.wire.user_agent_run`."""
    rng = rng if rng is not None else np.random.default_rng()
    own = client is None
    client = client or httpx.Client(base_url=base_url, timeout=30.0)
    try:
        resp = client.post("/sessions")
        resp.raise_for_status()
        solicit = Solicit.model_validate_json(resp.content)
        feedback = build_feedback(solicit, ratings, x0, protocol, rng)
        resp = client.post(
            f"/sessions/{solicit.session_id}/feedback",
            content=feedback.model_dump_json(),
            headers={"content-type": "application/json"},
        )
        if resp.status_code != 200:
            err = Error.model_validate_json(resp.content)
            raise AnalystError(err.code, err.detail)
        return Estimate.model_validate_json(resp.content)
    finally:
        if own:
            client.close()
