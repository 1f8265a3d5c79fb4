"""Per-node execution environment.

A node owns its datasets, secrets, tool registry, and exposed operations.
Handling a request runs the bounded tool-calling loop: the operation's
policy produces a message and tool calls, the runtime executes the
permitted tools, and the results feed the next turn until the policy stops
requesting tools. Policies never touch node state directly; every data
access goes through a recorded tool call.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Mapping, Protocol, Sequence

from .datastore import (
    ClinicStore,
    GuidanceDoc,
    InsurerStore,
    NO_COVERAGE_RULE,
    NO_ENROLLMENT,
    NO_GUIDANCE,
    NO_OBSERVATION,
    ProtectedValueIndex,
    Table,
    coverage_rule,
    lookup_observation,
    match_enrollment,
    render_enrollment_text,
    render_guidance_text,
    render_observation_text,
    render_rule_text,
)
from .errors import (
    AuthError,
    ConfigError,
    FedmeshError,
    LoopLimitExceeded,
    OperationNotFound,
    ToolError,
    ToolNotPermitted,
)
from .locality import TraceLog
from .pseudonym import SecretSource, derive_token, load_secret, normalize_id

if TYPE_CHECKING:
    from .relay import RelayTarget, Transport

logger = logging.getLogger(__name__)

DEFAULT_LOOP_LIMIT = 8


@dataclass(frozen=True)
class ToolCall:
    tool: str
    args: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class ToolResult:
    tool: str
    text: str


@dataclass(frozen=True)
class ToolExchange:
    call: ToolCall
    result: ToolResult


@dataclass(frozen=True)
class PolicyDecision:
    """One policy turn: an optional message plus requested tool calls.

    A turn with no tool calls ends the loop and its message is the final
    response.
    """

    message: str | None = None
    tool_calls: tuple[ToolCall, ...] = ()


class AgentPolicy(Protocol):
    def decide(self, request_body: str, history: Sequence[ToolExchange]) -> PolicyDecision: ...


@dataclass(frozen=True)
class OperationConfig:
    """An externally exposed entry point: policy, permitted tools, key."""

    operation_id: str
    agent_policy: str
    permitted_tools: frozenset[str]
    access_key: str

    def __post_init__(self) -> None:
        if not self.access_key:
            raise ConfigError(f"operation {self.operation_id!r} has an empty access key")


@dataclass(frozen=True)
class OperationRequest:
    operation_id: str
    access_key: str
    conversation_id: str
    body: str

    def __post_init__(self) -> None:
        if not self.body:
            raise ValueError("request body must be non-empty")


@dataclass(frozen=True)
class OperationResponse:
    body: str
    tool_log: tuple[ToolExchange, ...] = ()

    def __post_init__(self) -> None:
        if not self.body:
            raise ValueError("response body must be non-empty")


@dataclass
class ToolContext:
    """Everything a tool may see: the node it runs on and the conversation."""

    node: "Node"
    operation: OperationConfig
    conversation_id: str


ToolFn = Callable[[ToolContext, Mapping[str, str]], str]


@dataclass
class Node:
    """One organisation's isolated deployment.

    Datasets, secrets, and tools are local; the only outward path is a
    relay target declared in config. ``enforce_guard`` exists as a test
    hook so the offline checker can be exercised against guard bypasses.
    """

    node_id: str
    datasets: dict[str, ClinicStore | InsurerStore | list[GuidanceDoc]]
    tables: dict[str, Table]
    secrets: SecretSource
    operations: dict[str, OperationConfig]
    policies: dict[str, AgentPolicy]
    relay_targets: dict[str, "RelayTarget"]
    protected_index: ProtectedValueIndex
    tools: dict[str, ToolFn]
    hmac_secret: str | None = None
    transport: "Transport | None" = None
    trace: TraceLog | None = None
    loop_limit: int = DEFAULT_LOOP_LIMIT
    enforce_guard: bool = True
    outbound_mutators: list[Callable[[str, str], str]] = field(default_factory=list)
    _conversation_locks: dict[str, threading.Lock] = field(
        default_factory=dict, init=False, repr=False
    )
    _locks_guard: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def __post_init__(self) -> None:
        for op in self.operations.values():
            unknown = op.permitted_tools - set(self.tools)
            if unknown:
                raise ConfigError(
                    f"operation {op.operation_id!r} permits unknown tools: {sorted(unknown)}"
                )
            if op.operation_id not in self.policies:
                raise ConfigError(f"operation {op.operation_id!r} has no policy instance")
        if self.loop_limit < 1:
            raise ConfigError("loop_limit must be at least 1")

    def conversation_lock(self, conversation_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._conversation_locks.setdefault(conversation_id, threading.Lock())


def handle_operation(node: Node, req: OperationRequest) -> OperationResponse:
    """Run the tool-calling loop for one request.

    The loop is bounded unconditionally: a policy that keeps requesting
    tools is cut off after ``node.loop_limit`` turns. Requests in the same
    conversation are serialised; distinct conversations proceed
    concurrently.
    """
    op = node.operations.get(req.operation_id)
    if op is None:
        raise OperationNotFound(f"node {node.node_id!r} exposes no operation {req.operation_id!r}")
    if req.access_key != op.access_key:
        raise AuthError(f"access key mismatch for operation {req.operation_id!r}")

    policy = node.policies[req.operation_id]
    with node.conversation_lock(req.conversation_id):
        history: list[ToolExchange] = []
        for _ in range(node.loop_limit):
            decision = policy.decide(req.body, tuple(history))
            if not decision.tool_calls:
                logger.debug(
                    "node=%s op=%s finished after %d tool call(s)",
                    node.node_id,
                    req.operation_id,
                    len(history),
                )
                return OperationResponse(body=decision.message or "", tool_log=tuple(history))
            for call in decision.tool_calls:
                result = execute_tool(node, op, call, conversation_id=req.conversation_id)
                history.append(ToolExchange(call, result))
    raise LoopLimitExceeded(
        f"operation {req.operation_id!r} exceeded the loop bound of {node.loop_limit}"
    )


def execute_tool(
    node: Node,
    op: OperationConfig,
    call: ToolCall,
    *,
    conversation_id: str,
) -> ToolResult:
    """Dispatch one permitted tool call against node-local state."""
    if call.tool not in op.permitted_tools:
        raise ToolNotPermitted(
            f"tool {call.tool!r} is not permitted for operation {op.operation_id!r}"
        )
    fn = node.tools.get(call.tool)
    if fn is None:
        raise ToolError(f"tool {call.tool!r} is not registered on node {node.node_id!r}")
    ctx = ToolContext(node=node, operation=op, conversation_id=conversation_id)
    try:
        text = fn(ctx, dict(call.args))
    except FedmeshError:
        raise
    except Exception as exc:
        raise ToolError(f"tool {call.tool!r} failed: {exc}") from exc
    logger.debug("node=%s tool=%s result_chars=%d", node.node_id, call.tool, len(text))
    return ToolResult(tool=call.tool, text=text)


# ---------------------------------------------------------------------------
# Built-in tools
# ---------------------------------------------------------------------------


def _require_arg(args: Mapping[str, str], name: str, tool: str) -> str:
    value = args.get(name)
    if value is None:
        raise ToolError(f"tool {tool!r} requires argument {name!r}")
    return value


def _clinic_store(ctx: ToolContext, tool: str) -> ClinicStore:
    store = ctx.node.datasets.get("clinic")
    if not isinstance(store, ClinicStore):
        raise ToolError(f"tool {tool!r} needs a clinic dataset on node {ctx.node.node_id!r}")
    return store


def _insurer_store(ctx: ToolContext, tool: str) -> InsurerStore:
    store = ctx.node.datasets.get("insurer")
    if not isinstance(store, InsurerStore):
        raise ToolError(f"tool {tool!r} needs an insurer dataset on node {ctx.node.node_id!r}")
    return store


def tool_csv_lookup(ctx: ToolContext, args: Mapping[str, str]) -> str:
    """Fetch the clinical observation row for a patient id."""
    store = _clinic_store(ctx, "csv_lookup")
    raw = _require_arg(args, "patient_id", "csv_lookup")
    obs = lookup_observation(store, normalize_id(raw))
    return NO_OBSERVATION if obs is None else render_observation_text(obs)


def tool_enrollment_match(ctx: ToolContext, args: Mapping[str, str]) -> str:
    """Exact-match a case token against the local enrolment table."""
    store = _insurer_store(ctx, "enrollment_match")
    token = _require_arg(args, "token", "enrollment_match")
    row = match_enrollment(store, token)
    return NO_ENROLLMENT if row is None else render_enrollment_text(row)


def tool_coverage_lookup(ctx: ToolContext, args: Mapping[str, str]) -> str:
    store = _insurer_store(ctx, "coverage_lookup")
    plan_id = _require_arg(args, "plan_id", "coverage_lookup")
    treatment = _require_arg(args, "treatment_code", "coverage_lookup")
    rule = coverage_rule(store, plan_id, treatment)
    return NO_COVERAGE_RULE if rule is None else render_rule_text(rule)


def tool_guidance_search(ctx: ToolContext, args: Mapping[str, str]) -> str:
    """Return guidance documents matching the query (all, when empty)."""
    docs = ctx.node.datasets.get("guidance")
    if not isinstance(docs, list):
        raise ToolError(f"tool 'guidance_search' needs a guidance dataset on node {ctx.node.node_id!r}")
    query = args.get("query", "").strip().casefold()

    def matches(doc: GuidanceDoc) -> bool:
        if not query:
            return True
        if query in doc.doc_id.casefold():
            return True
        texts = list(doc.severity_bands.values()) + list(doc.ladder) + list(doc.red_flags)
        return any(query in text.casefold() for text in texts)

    matched = [doc for doc in docs if matches(doc)]
    return NO_GUIDANCE if not matched else render_guidance_text(matched)


def tool_hmac_token(ctx: ToolContext, args: Mapping[str, str]) -> str:
    """Derive the case token for an id. The key resolves here, at execution
    time, from the node-local secret source; it never enters a message."""
    if ctx.node.hmac_secret is None:
        raise ToolError("tool 'hmac_token' needs an hmac_secret in node config")
    raw = _require_arg(args, "patient_id", "hmac_token")
    key = load_secret(ctx.node.hmac_secret, ctx.node.secrets)
    return derive_token(key, normalize_id(raw)).hex


def tool_relay_call(ctx: ToolContext, args: Mapping[str, str]) -> str:
    """Call a configured remote operation; the outbound guard applies."""
    from .relay import relay_call

    target = _require_arg(args, "target", "relay_call")
    body = _require_arg(args, "body", "relay_call")
    return relay_call(ctx.node, target, body, ctx.conversation_id)


TOOL_REGISTRY: dict[str, ToolFn] = {
    "csv_lookup": tool_csv_lookup,
    "enrollment_match": tool_enrollment_match,
    "coverage_lookup": tool_coverage_lookup,
    "guidance_search": tool_guidance_search,
    "hmac_token": tool_hmac_token,
    "relay_call": tool_relay_call,
}
