"""Newline-delimited JSON socket front for an :class:`InstancePool`.

Requests are one JSON object per line::

    {"op": "spec"}
    {"op": "draw"}
    {"op": "submit", "weights": [...]}

and every request gets exactly one reply line.  Replies never say which
instance was drawn or replaced.  There is no authentication or TLS; this is
a protocol demonstrator.
"""

from __future__ import annotations

import asyncio
import json
import logging
import socket
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .client import PrivacyParams, client_update
from .errors import BindFailure, DDMLError
from .glm import ModelSpec
from .pool import InstancePool, replay

log = logging.getLogger(__name__)

LINE_LIMIT = 64 * 1024 * 1024


def _dumps(obj) -> bytes:
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode("utf-8")


def parse_address(text: str, default_port: int = 7070) -> tuple[str, int]:
    host, sep, port = str(text).rpartition(":")
    if not sep:
        return port or "127.0.0.1", default_port
    return host or "127.0.0.1", int(port)


class PoolServer:
    """Owns the pool, the model spec (and its version) and the server RNG.

    Request handling is synchronous inside the event loop, so each pool
    operation is atomic; nothing is held across a client's draw and submit.
    """

    def __init__(self, pool: InstancePool, spec: ModelSpec, rng: np.random.Generator,
                 snapshot_path=None, trace_path=None):
        if pool.strategy.needs_token:
            raise ValueError(f"{pool.strategy} needs a draw token, which the wire protocol never carries")
        if pool.shape != spec.weight_shape:
            raise ValueError(f"pool shape {pool.shape} does not match spec {spec.weight_shape}")
        self.pool = pool
        self.spec = spec
        self.rng = rng
        self.snapshot_path = snapshot_path
        self.trace_path = trace_path
        self._server: asyncio.base_events.Server | None = None
        self.address: tuple[str, int] | None = None

    def set_spec(self, spec: ModelSpec):
        """Publish a new schema; clients re-fetch when they see the new version."""
        if spec.weight_shape != self.pool.shape:
            raise ValueError("a new spec must keep the pool's weight shape")
        self.spec = spec

    # -- protocol -------------------------------------------------------------

    def handle(self, request) -> dict:
        """Reply to one decoded request object."""
        if not isinstance(request, dict):
            return {"ok": False, "error": "BadRequest: expected a JSON object"}
        op = request.get("op")
        try:
            if op == "spec":
                return {"ok": True, "spec": self.spec.to_dict()}
            if op == "draw":
                _, w = self.pool.draw(self.rng)
                return {"ok": True, "weights": w.ravel().tolist(), "version": self.spec.version}
            if op == "submit":
                weights = request.get("weights")
                if not isinstance(weights, list):
                    return {"ok": False, "error": "BadRequest: submit needs a weights array"}
                outcome = self.pool.submit(weights, self.rng)
                return {"ok": True, "status": outcome.status}
        except DDMLError as exc:
            return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
        except (TypeError, ValueError) as exc:
            return {"ok": False, "error": f"BadRequest: {exc}"}
        return {"ok": False, "error": f"BadRequest: unknown op {op!r}"}

    def handle_line(self, line: bytes) -> bytes:
        try:
            request = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            return _dumps({"ok": False, "error": f"BadRequest: malformed frame ({exc})"})
        return _dumps(self.handle(request))

    async def _connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        try:
            while True:
                try:
                    line = await reader.readline()
                except (asyncio.LimitOverrunError, ValueError):
                    writer.write(_dumps({"ok": False, "error": "BadRequest: frame too long"}))
                    break
                if not line:
                    break
                if not line.strip():
                    continue
                writer.write(self.handle_line(line))
                await writer.drain()
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            writer.close()

    # -- lifecycle ------------------------------------------------------------

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        try:
            self._server = await asyncio.start_server(self._connection, host, port, limit=LINE_LIMIT)
        except OSError as exc:
            raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
        self.address = self._server.sockets[0].getsockname()[:2]
        log.info("serving pool k=%d (%s) on %s:%d", self.pool.k, self.pool.strategy, *self.address)
        return self.address

    async def stop(self):
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
        self.flush()

    def flush(self):
        """Write the pool snapshot (and the operation trace if recorded)."""
        if self.snapshot_path:
            doc = self.pool.snapshot()
            doc["spec"] = self.spec.to_dict()
            Path(self.snapshot_path).write_text(json.dumps(doc))
        if self.trace_path and self.pool.trace is not None:
            Path(self.trace_path).write_text("\n".join(json.dumps(e) for e in self.pool.trace) + "\n")

    async def serve_forever(self, host: str = "127.0.0.1", port: int = 0, stop: asyncio.Event | None = None):
        await self.start(host, port)
        stop = stop or asyncio.Event()
        try:
            await stop.wait()
        finally:
            await self.stop()


class ServerThread:
    """Run a :class:`PoolServer` on a background event loop (tests, embedding).

    Usable as a context manager; leaving it shuts the server down gracefully,
    which flushes the snapshot.
    """

    def __init__(self, server: PoolServer, host: str = "127.0.0.1", port: int = 0):
        self.server = server
        self._host, self._port = host, port
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, daemon=True)

    def start(self) -> tuple[str, int]:
        self._thread.start()
        fut = asyncio.run_coroutine_threadsafe(self.server.start(self._host, self._port), self._loop)
        return fut.result()

    def stop(self):
        asyncio.run_coroutine_threadsafe(self.server.stop(), self._loop).result()
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join()
        self._loop.close()

    def call(self, fn, *args):
        """Run ``fn(*args)`` on the server loop (keeps pool access serialized)."""
        async def run():
            return fn(*args)

        return asyncio.run_coroutine_threadsafe(run(), self._loop).result()

    @property
    def address(self) -> tuple[str, int]:
        return self.server.address

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()


def server_from_config(config, record: bool = False, snapshot_path=None, trace_path=None) -> PoolServer:
    """Pool server initialised exactly as the simulator would for ``config``.

    The server RNG continues the pool stream after initialisation, so
    :func:`replay_trace` can rebuild the same state machine from the seed.
    """
    from .sim import _streams, build_pool

    rng = _streams(config.seed)[2]
    pool = build_pool(config, rng)
    if record:
        pool.record()
    return PoolServer(pool, config.spec, rng, snapshot_path, trace_path)


def replay_trace(config, trace) -> InstancePool:
    """Apply a recorded server trace to a freshly initialised in-process pool."""
    from .sim import _streams, build_pool

    rng = _streams(config.seed)[2]
    return replay(trace, build_pool(config, rng), rng)


def read_trace(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# --- client side --------------------------------------------------------------


class Connection:
    """Blocking line-oriented client for the wire protocol."""

    def __init__(self, address: tuple[str, int], timeout: float = 10.0):
        self.sock = socket.create_connection(address, timeout=timeout)
        self._file = self.sock.makefile("rb")

    def request(self, obj: dict) -> dict:
        self.sock.sendall(_dumps(obj))
        line = self._file.readline()
        if not line:
            raise ConnectionError("server closed the connection")
        return json.loads(line)

    def close(self):
        self._file.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class AgentSummary:
    rounds: int = 0
    submits: int = 0
    accepted: int = 0
    rejected_spam: int = 0
    dropped: int = 0
    spec_fetches: int = 0
    retries: int = 0
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def client_agent(
    server_address,
    X,
    y,
    params: PrivacyParams,
    rounds: int,
    rng: np.random.Generator,
    max_retries: int = 5,
    backoff: float = 0.05,
    update=None,
) -> AgentSummary:
    """Run the client side of the protocol for ``rounds`` rounds.

    Each round draws a model, applies a private update on the local examples
    and submits it.  The spec is fetched on the first draw and whenever the
    draw reports a different version.  Network failures reconnect with
    exponential backoff (``backoff * 2**attempt``), up to ``max_retries``
    consecutive attempts; after that the agent stops and lists the error.
    ``update`` replaces the honest update, e.g. to play a spammer.
    """
    summary = AgentSummary()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if len(y) == 0 or rounds <= 0:
        return summary
    address = parse_address(server_address) if isinstance(server_address, str) else tuple(server_address)
    conn: Connection | None = None
    spec: ModelSpec | None = None
    attempt = 0
    r = 0
    while r < rounds:
        try:
            if conn is None:
                conn = Connection(address)
            reply = conn.request({"op": "draw"})
            _check(reply)
            if spec is None or reply["version"] != spec.version:
                spec = ModelSpec.from_dict(_check(conn.request({"op": "spec"}))["spec"])
                summary.spec_fetches += 1
                if reply["version"] != spec.version:
                    continue  # schema moved between the two requests; draw again
            w = np.asarray(reply["weights"], dtype=float).reshape(spec.weight_shape)
            new = update(w) if update else client_update(w, X, y, params, spec, rng)
            status = _check(conn.request({"op": "submit", "weights": np.ravel(new).tolist()}))["status"]
            summary.submits += 1
            setattr(summary, status, getattr(summary, status) + 1)
            summary.rounds += 1
            r += 1
            attempt = 0
        except (OSError, ConnectionError, json.JSONDecodeError) as exc:
            if conn is not None:
                conn.close()
                conn = None
            if attempt >= max_retries:
                summary.errors.append(f"gave up after {attempt} retries: {exc}")
                break
            time.sleep(backoff * 2**attempt)
            attempt += 1
            summary.retries += 1
        except ServerError as exc:
            summary.errors.append(str(exc))
            break
    if conn is not None:
        conn.close()
    return summary


class ServerError(DDMLError):
    """The server answered ``ok: false``."""


def _check(reply: dict) -> dict:
    if not reply.get("ok"):
        raise ServerError(reply.get("error", "unknown server error"))
    return reply
