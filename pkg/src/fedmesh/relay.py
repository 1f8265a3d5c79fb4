"""Cross-node operation relay.

Wire format: one single-line JSON object per request and per response,
carried over HTTP POST to ``/operations/<operation_id>``. Requests are
``{"operation_id", "access_key", "conversation_id", "body"}``; responses are
``{"status": "ok", "body": ...}`` or
``{"status": "error", "error": {"code", "message"}}`` with codes ``auth``,
``not_found``, ``protocol``, and ``internal``. Bodies are natural-language
text only; no structured record ever rides the wire.

Calls are least-privilege: a remote operation is reachable only through a
target declared in node config, and the target's name must equal the
destination node's id so traces and topology checks line up. The outbound
leak guard runs before any bytes leave the node and fails closed: a finding
aborts the call with nothing sent and nothing recorded.

An in-process loopback transport serves hermetic runs and tests; requests
still round-trip through their JSON wire form.
"""

from __future__ import annotations

import json
import logging
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import TYPE_CHECKING, Mapping, Protocol

from .errors import (
    AuthError,
    ConfigError,
    FedmeshError,
    LeakBlocked,
    OperationNotFound,
    RelayAuthError,
    RelayRemoteError,
    RelayTransportError,
    TargetNotConfigured,
)
from .locality import scan_outbound

if TYPE_CHECKING:
    from .runtime import Node

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_SECONDS = 30.0

_REQUEST_FIELDS = ("operation_id", "access_key", "conversation_id", "body")


@dataclass(frozen=True)
class RelayTarget:
    """A remote operation this node may call: name, URL, id, and key."""

    name: str
    url: str
    operation_id: str
    access_key: str

    def __post_init__(self) -> None:
        for field_name in ("name", "url", "operation_id", "access_key"):
            if not getattr(self, field_name):
                raise ConfigError(f"relay target field {field_name!r} must be non-empty")


@dataclass(frozen=True)
class RelayRequest:
    operation_id: str
    access_key: str
    conversation_id: str
    body: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "operation_id": self.operation_id,
                "access_key": self.access_key,
                "conversation_id": self.conversation_id,
                "body": self.body,
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, raw: str) -> "RelayRequest":
        record = json.loads(raw)
        if not isinstance(record, dict):
            raise ValueError("request must be a JSON object")
        missing = [key for key in _REQUEST_FIELDS if key not in record]
        if missing:
            raise ValueError(f"request missing fields: {', '.join(missing)}")
        if not all(isinstance(record[key], str) for key in _REQUEST_FIELDS):
            raise ValueError("request fields must be strings")
        if not record["body"]:
            raise ValueError("request body must be non-empty")
        return cls(
            operation_id=record["operation_id"],
            access_key=record["access_key"],
            conversation_id=record["conversation_id"],
            body=record["body"],
        )


@dataclass(frozen=True)
class RelayResponse:
    status: str  # "ok" | "error"
    body: str | None = None
    error_code: str | None = None
    error_message: str | None = None

    @classmethod
    def ok(cls, body: str) -> "RelayResponse":
        return cls(status="ok", body=body)

    @classmethod
    def fail(cls, code: str, message: str) -> "RelayResponse":
        return cls(status="error", error_code=code, error_message=message)

    def to_json(self) -> str:
        if self.status == "ok":
            return json.dumps({"status": "ok", "body": self.body}, ensure_ascii=False)
        return json.dumps(
            {"status": "error", "error": {"code": self.error_code, "message": self.error_message}},
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, raw: str) -> "RelayResponse":
        record = json.loads(raw)
        if not isinstance(record, dict) or "status" not in record:
            raise ValueError("response must be a JSON object with a status")
        if record["status"] == "ok":
            if not isinstance(record.get("body"), str):
                raise ValueError("ok response must carry a text body")
            return cls.ok(record["body"])
        error = record.get("error")
        if not isinstance(error, dict):
            raise ValueError("error response must carry an error object")
        return cls.fail(str(error.get("code", "internal")), str(error.get("message", "")))


class Transport(Protocol):
    sends: int
    bytes_sent: int

    def send(self, target: RelayTarget, request: RelayRequest) -> RelayResponse: ...


class LoopbackTransport:
    """In-process transport for hermetic runs.

    Targets use ``local:<node_id>`` URLs resolved against a shared bus of
    booted nodes. The request still round-trips through its JSON wire form
    so loopback and network behave identically.
    """

    def __init__(self, bus: Mapping[str, "Node"]) -> None:
        self.bus = bus
        self.sends = 0
        self.bytes_sent = 0

    def send(self, target: RelayTarget, request: RelayRequest) -> RelayResponse:
        if not target.url.startswith("local:"):
            raise RelayTransportError(f"loopback transport cannot reach url {target.url!r}")
        node = self.bus.get(target.url[len("local:"):])
        if node is None:
            raise RelayTransportError(f"no local node behind url {target.url!r}")
        payload = request.to_json()
        self.sends += 1
        self.bytes_sent += len(payload.encode("utf-8"))
        try:
            parsed = RelayRequest.from_json(payload)
        except (ValueError, json.JSONDecodeError) as exc:
            return RelayResponse.fail("protocol", str(exc))
        return serve_request(node, parsed)


class HttpTransport:
    """JSON-over-HTTP POST transport; one request per call, 30 s timeout."""

    def __init__(self, timeout: float = DEFAULT_TIMEOUT_SECONDS) -> None:
        self.timeout = timeout
        self.sends = 0
        self.bytes_sent = 0

    def send(self, target: RelayTarget, request: RelayRequest) -> RelayResponse:
        url = f"{target.url.rstrip('/')}/operations/{target.operation_id}"
        payload = request.to_json().encode("utf-8")
        http_request = urllib.request.Request(
            url,
            data=payload,
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        self.sends += 1
        self.bytes_sent += len(payload)
        try:
            with urllib.request.urlopen(http_request, timeout=self.timeout) as response:
                raw = response.read().decode("utf-8")
        except (urllib.error.URLError, OSError) as exc:
            raise RelayTransportError(f"relay transport failed for {url}: {exc}") from exc
        try:
            return RelayResponse.from_json(raw)
        except (ValueError, json.JSONDecodeError) as exc:
            raise RelayTransportError(f"malformed relay response from {url}: {exc}") from exc


def serve_request(node: "Node", request: RelayRequest) -> RelayResponse:
    """Server-side entry shared by both transports.

    Authenticates the access key against the addressed operation, runs the
    node's tool-calling loop, and wraps the outcome in the wire response.
    Error messages carry exception types and identifiers, never dataset
    values.
    """
    from .runtime import OperationRequest, handle_operation

    try:
        response = handle_operation(
            node,
            OperationRequest(
                operation_id=request.operation_id,
                access_key=request.access_key,
                conversation_id=request.conversation_id,
                body=request.body,
            ),
        )
        return RelayResponse.ok(response.body)
    except OperationNotFound as exc:
        return RelayResponse.fail("not_found", str(exc))
    except AuthError as exc:
        return RelayResponse.fail("auth", str(exc))
    except FedmeshError as exc:
        return RelayResponse.fail("internal", f"{type(exc).__name__}: {exc}")
    except Exception:
        logger.exception("node=%s operation=%s failed", node.node_id, request.operation_id)
        return RelayResponse.fail("internal", "internal error")


def relay_call(node: "Node", target_name: str, body: str, conversation_id: str) -> str:
    """Call a remote operation on a configured target.

    Order matters: target lookup, outbound guard, then transport. When the
    guard finds protected values the call aborts with ``LeakBlocked`` and
    the transport counters confirm zero bytes were sent. Both the request
    and the response envelope are recorded in the run's trace.
    """
    target = node.relay_targets.get(target_name)
    if target is None:
        raise TargetNotConfigured(
            f"node {node.node_id!r} has no relay target {target_name!r}"
        )
    for mutate in node.outbound_mutators:
        body = mutate(target_name, body)

    edge = (node.node_id, target.name)
    if node.enforce_guard:
        verdict = scan_outbound(body, node.protected_index, edge)
        if not verdict.clean:
            columns = sorted({finding.source_column for finding in verdict.findings})
            raise LeakBlocked(
                f"outbound message {node.node_id}->{target.name} blocked: "
                f"{len(verdict.findings)} protected value(s) from column(s) {', '.join(columns)}",
                verdict.findings,
            )

    request = RelayRequest(
        operation_id=target.operation_id,
        access_key=target.access_key,
        conversation_id=conversation_id,
        body=body,
    )
    if node.trace is not None:
        node.trace.append(
            from_node=node.node_id,
            to_node=target.name,
            operation_id=target.operation_id,
            conversation_id=conversation_id,
            body=body,
        )
    if node.transport is None:
        raise RelayTransportError(f"node {node.node_id!r} has no transport configured")
    logger.debug("relay %s->%s operation=%s chars=%d", node.node_id, target.name, target.operation_id, len(body))
    response = node.transport.send(target, request)

    if response.status == "ok" and response.body is not None:
        if node.trace is not None:
            node.trace.append(
                from_node=target.name,
                to_node=node.node_id,
                operation_id=target.operation_id,
                conversation_id=conversation_id,
                body=response.body,
            )
        return response.body

    code = response.error_code or "internal"
    message = response.error_message or ""
    if node.trace is not None:
        node.trace.append(
            from_node=target.name,
            to_node=node.node_id,
            operation_id=target.operation_id,
            conversation_id=conversation_id,
            body=f"error[{code}]: {message}",
        )
    if code == "auth":
        raise RelayAuthError(f"target {target.name!r} rejected the access key: {message}")
    raise RelayRemoteError(f"target {target.name!r} answered error[{code}]: {message}")


# ---------------------------------------------------------------------------
# Network listener
# ---------------------------------------------------------------------------


class _RelayHandler(BaseHTTPRequestHandler):
    node: "Node"  # set on the subclass built in serve()

    def do_POST(self) -> None:  # noqa: N802 (http.server API)
        prefix = "/operations/"
        if not self.path.startswith(prefix):
            self._reply(RelayResponse.fail("protocol", f"unknown path {self.path!r}"))
            return
        path_operation = self.path[len(prefix):]
        try:
            length = int(self.headers.get("Content-Length", "0"))
            raw = self.rfile.read(length).decode("utf-8")
            request = RelayRequest.from_json(raw)
        except (ValueError, json.JSONDecodeError, UnicodeDecodeError) as exc:
            self._reply(RelayResponse.fail("protocol", f"malformed request: {exc}"))
            return
        if request.operation_id != path_operation:
            self._reply(
                RelayResponse.fail(
                    "protocol",
                    f"path operation {path_operation!r} does not match body operation {request.operation_id!r}",
                )
            )
            return
        self._reply(serve_request(self.node, request))

    def _reply(self, response: RelayResponse) -> None:
        payload = response.to_json().encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, format: str, *args: object) -> None:
        logger.debug("http %s: %s", self.client_address, format % args)


class RelayServer:
    """A running listener; handles concurrent inbound requests in threads,
    so a handler awaiting its own outbound relay call never blocks new
    work."""

    def __init__(self, node: "Node", bind_address: tuple[str, int]) -> None:
        handler = type("BoundRelayHandler", (_RelayHandler,), {"node": node})
        self._server = ThreadingHTTPServer(bind_address, handler)
        self._server.daemon_threads = True
        self._thread = threading.Thread(
            target=self._server.serve_forever, name=f"relay-{node.node_id}", daemon=True
        )
        self._thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[0], self._server.server_address[1]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)


def serve(node: "Node", bind_address: tuple[str, int] = ("127.0.0.1", 0)) -> RelayServer:
    """Start a listener for the node's operations on the given address."""
    return RelayServer(node, bind_address)
