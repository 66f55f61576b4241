"""Analyst service and user agent speaking newline-delimited JSON.

One TCP connection carries one session::

    analyst -> user   {"type": "solicit", "session_id": ..., "items": [{"id", "bias", "ratio"?}]}
    user -> analyst   {"type": "feedback", "session_id": ..., "revealed": [...], "values": [...]}
    analyst -> user   {"type": "estimate", "session_id": ..., "x_hat": [...]}

Any failure is answered with ``{"type": "error", "code", "detail"}`` and the
connection is closed.  No message type has a field for the private label:
the agent obfuscates locally and only ever sends a :class:`Feedback`.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import uuid
from dataclasses import dataclass
from typing import Annotated, Literal, Mapping, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError

from .factorization import AnalystModel
from .protocol import (
    DEFAULT_RIDGE,
    Disclosure,
    ObfuscatedFeedback,
    SingularDesignError,
    estimate_profile,
    mp_disclose,
    mp_obfuscate,
    mpss_disclose,
    mpss_obfuscate,
)
from .selection import SelectionProblem, default_seed_set, greedy_select

logger = logging.getLogger(__name__)

MAX_LINE = 16 * 1024 * 1024


class _Message(BaseModel):
    model_config = ConfigDict(extra="forbid", ser_json_inf_nan="strings")


class SolicitItem(_Message):
    id: str
    bias: float
    ratio: float | None = Field(default=None, ge=0)


class Solicit(_Message):
    type: Literal["solicit"] = "solicit"
    session_id: str
    items: list[SolicitItem]


class Feedback(_Message):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)
    type: Literal["feedback"] = "feedback"
    session_id: str
    revealed: list[str]
    values: list[float]


class Estimate(_Message):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)
    type: Literal["estimate"] = "estimate"
    session_id: str
    x_hat: list[float]


class Error(_Message):
    type: Literal["error"] = "error"
    code: Literal["parse", "protocol_violation", "bad_feedback", "internal"]
    detail: str


WireMessage = Annotated[Union[Solicit, Feedback, Estimate, Error], Field(discriminator="type")]
_adapter = TypeAdapter(WireMessage)


class WireParseError(ValueError):
    pass


class AnalystError(RuntimeError):
    """The analyst answered with an Error message."""

    def __init__(self, code: str, detail: str):
        self.code = code
        super().__init__(f"{code}: {detail}")


def encode(message: _Message) -> bytes:
    return message.model_dump_json().encode("utf-8") + b"\n"


def decode(line: bytes | str) -> Solicit | Feedback | Estimate | Error:
    try:
        return _adapter.validate_json(line)
    except ValidationError as exc:
        raise WireParseError(str(exc)) from exc


def solicit_to_disclosure(solicit: Solicit) -> Disclosure:
    ratios = [it.ratio for it in solicit.items]
    has = [r is not None for r in ratios]
    if any(has) and not all(has):
        raise WireParseError("ratio given for some items only")
    return Disclosure(
        tuple(it.id for it in solicit.items),
        np.array([it.bias for it in solicit.items], dtype=float),
        np.array(ratios, dtype=float) if solicit.items and all(has) else None,
    )


def disclosure_to_items(disclosure: Disclosure) -> list[SolicitItem]:
    out = []
    for k, item in enumerate(disclosure.item_ids):
        ratio = None if disclosure.ratio is None else float(disclosure.ratio[k])
        out.append(SolicitItem(id=item, bias=float(disclosure.bias[k]), ratio=ratio))
    return out


@dataclass(frozen=True)
class SelectionConfig:
    """How the analyst picks the solicited items.

    The solicitation is the pivoted-QR seed set plus ``budget - |seed|``
    greedy picks; an explicit ``items`` list bypasses selection.
    """

    budget: int = 20
    protocol: str = "mp"
    ridge: float = DEFAULT_RIDGE
    items: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.protocol not in ("mp", "mpss"):
            raise ValueError("protocol must be 'mp' or 'mpss'")


def choose_items(model: AnalystModel, budget: int) -> list[str]:
    candidates = {p.item_id: p.latent for p in model.catalog}
    seed = default_seed_set(candidates)
    if budget < len(seed):
        raise ValueError(f"budget {budget} is below the latent dimension {len(seed)}")
    extra = min(budget - len(seed), len(candidates) - len(seed))
    return [*seed, *greedy_select(SelectionProblem(candidates, extra, seed))]


class AnalystService:
    """Transport-independent analyst state: one disclosure, many sessions."""

    def __init__(self, model: AnalystModel, config: SelectionConfig = SelectionConfig()):
        self.model = model
        self.config = config
        items = list(config.items) if config.items is not None else choose_items(model, config.budget)
        profiles = model.profiles
        missing = [i for i in items if i not in profiles]
        if missing:
            raise ValueError(f"solicited items not in the model: {missing[:10]}")
        self.items = items
        slice_ = [profiles[i] for i in items]
        if config.protocol == "mpss":
            self.disclosure = mpss_disclose(slice_, [model.probs(i) for i in items])
        else:
            self.disclosure = mp_disclose(slice_)
        self._sessions: set[str] = set()
        self._lock = threading.Lock()

    def open_session(self) -> Solicit:
        session_id = uuid.uuid4().hex
        with self._lock:
            self._sessions.add(session_id)
        return Solicit(session_id=session_id, items=disclosure_to_items(self.disclosure))

    def close_session(self, session_id: str) -> None:
        with self._lock:
            self._sessions.discard(session_id)

    def estimate(self, feedback: ObfuscatedFeedback) -> np.ndarray:
        return estimate_profile(
            feedback, self.model.profiles, self.config.ridge, self.model.noise_sigma_hat
        ).x_hat

    def handle_feedback(self, message: Feedback) -> Estimate | Error:
        with self._lock:
            known = message.session_id in self._sessions
            self._sessions.discard(message.session_id)
        if not known:
            return Error(code="protocol_violation", detail=f"unknown session {message.session_id}")
        solicited = set(self.items)
        outside = [i for i in message.revealed if i not in solicited]
        if outside:
            return Error(code="protocol_violation", detail=f"unsolicited items revealed: {outside[:10]}")
        if len(message.revealed) != len(message.values):
            return Error(code="bad_feedback", detail="revealed and values differ in length")
        if len(set(message.revealed)) != len(message.revealed):
            return Error(code="bad_feedback", detail="duplicate revealed items")
        if not message.revealed:
            return Error(code="bad_feedback", detail="no feedback revealed")
        try:
            x_hat = self.estimate(ObfuscatedFeedback(tuple(message.revealed), np.array(message.values)))
        except (SingularDesignError, ValueError) as exc:
            return Error(code="bad_feedback", detail=str(exc))
        if not np.all(np.isfinite(x_hat)):
            return Error(code="bad_feedback", detail="estimate is not finite")
        return Estimate(session_id=message.session_id, x_hat=x_hat.tolist())


class _SessionHandler(socketserver.StreamRequestHandler):
    def _send(self, message: _Message) -> None:
        data = encode(message)
        logger.debug("send %s", data.rstrip())
        self.wfile.write(data)
        self.wfile.flush()

    def handle(self):
        service: AnalystService = self.server.service
        solicit = service.open_session()
        try:
            self._send(solicit)
            line = self.rfile.readline(MAX_LINE)
            if not line:
                return
            logger.debug("recv %s", line.rstrip())
            try:
                message = decode(line)
            except WireParseError as exc:
                self._send(Error(code="parse", detail=str(exc)))
                return
            if not isinstance(message, Feedback):
                self._send(Error(code="protocol_violation", detail=f"expected feedback, got {message.type}"))
                return
            self._send(service.handle_feedback(message))
        except (ConnectionError, OSError) as exc:
            logger.debug("session %s dropped: %s", solicit.session_id, exc)
        finally:
            service.close_session(solicit.session_id)


class AnalystServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], service: AnalystService):
        self.service = service
        super().__init__(address, _SessionHandler)


def make_analyst_server(
    model: AnalystModel, config: SelectionConfig = SelectionConfig(), host: str = "127.0.0.1", port: int = 0
) -> AnalystServer:
    """Bound but not yet serving; call ``serve_forever`` (port 0 picks a free port)."""
    return AnalystServer((host, port), AnalystService(model, config))


def analyst_serve(
    model: AnalystModel, config: SelectionConfig = SelectionConfig(), host: str = "127.0.0.1", port: int = 7341
) -> None:
    """Serve sessions until interrupted."""
    with make_analyst_server(model, config, host, port) as server:
        logger.info("analyst listening on %s:%d", *server.server_address[:2])
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass


def build_feedback(
    solicit: Solicit,
    ratings: Mapping[str, float],
    x0: int,
    protocol: str,
    rng: np.random.Generator,
) -> Feedback:
    """User-side obfuscation of a solicitation; ``x0`` goes no further than here."""
    disclosure = solicit_to_disclosure(solicit)
    if protocol == "mpss":
        if disclosure.ratio is None:
            raise AnalystError("protocol_violation", "solicitation carries no ratios; MPSS impossible")
        rated = {i: float(ratings[i]) for i in disclosure.item_ids if i in ratings}
        obf = mpss_obfuscate(rated, x0, disclosure, rng)
    elif protocol == "mp":
        missing = [i for i in disclosure.item_ids if i not in ratings]
        if missing:
            raise ValueError(f"no ratings for solicited items {missing[:10]}")
        obf = mp_obfuscate([ratings[i] for i in disclosure.item_ids], x0, disclosure)
    else:
        raise ValueError("protocol must be 'mp' or 'mpss'")
    return Feedback(session_id=solicit.session_id, revealed=list(obf.revealed), values=obf.values.tolist())


def user_agent_run(
    ratings: Mapping[str, float],
    x0: int,
    host: str = "127.0.0.1",
    port: int = 7341,
    protocol: str = "mp",
    rng: np.random.Generator | None = None,
    capture: list[tuple[str, bytes]] | None = None,
    timeout: float = 30.0,
) -> Estimate:
    """Run one session against an analyst and return its estimate.

    ``capture``, if given, receives every frame as ``("sent" | "recv", bytes)``.
    """
    rng = rng if rng is not None else np.random.default_rng()
    with socket.create_connection((host, port), timeout=timeout) as sock:
        reader = sock.makefile("rb")

        def recv():
            line = reader.readline(MAX_LINE)
            if not line:
                raise ConnectionError("analyst closed the connection")
            if capture is not None:
                capture.append(("recv", line))
            return decode(line)

        first = recv()
        if isinstance(first, Error):
            raise AnalystError(first.code, first.detail)
        if not isinstance(first, Solicit):
            raise AnalystError("protocol_violation", f"expected solicit, got {first.type}")
        data = encode(build_feedback(first, ratings, x0, protocol, rng))
        if capture is not None:
            capture.append(("sent", data))
        sock.sendall(data)
        reply = recv()
    if isinstance(reply, Error):
        raise AnalystError(reply.code, reply.detail)
    if not isinstance(reply, Estimate):
        raise AnalystError("protocol_violation", f"expected estimate, got {reply.type}")
    return reply
