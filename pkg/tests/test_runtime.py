from __future__ import annotations

import threading

import pytest

from fedmesh.config import load_node_config
from fedmesh.datastore import ProtectedValueIndex
from fedmesh.errors import (
    AuthError,
    ConfigError,
    LoopLimitExceeded,
    OperationNotFound,
    ToolError,
    ToolNotPermitted,
)
from fedmesh.pseudonym import SecretSource
from fedmesh.runtime import (
    Node,
    OperationConfig,
    OperationRequest,
    PolicyDecision,
    TOOL_REGISTRY,
    ToolCall,
    execute_tool,
    handle_operation,
)
from fedmesh.scenario import boot_scenario, build_node

from conftest import GOLDEN_TOKENS


class GreedyPolicy:
    """Adversarial stub: requests a tool on every turn, never finishes."""

    def __init__(self) -> None:
        self.turns = 0

    def decide(self, request_body, history):
        self.turns += 1
        return PolicyDecision(tool_calls=(ToolCall("noop"),))


class SilentPolicy:
    """Answers immediately without any tool calls."""

    def decide(self, request_body, history):
        return PolicyDecision(message=f"echo: {request_body}")


def _test_node(policy, *, loop_limit=8, permitted=("noop",)):
    tools = dict(TOOL_REGISTRY)
    tools["noop"] = lambda ctx, args: "ok"
    op = OperationConfig(
        operation_id="op",
        agent_policy="stub",
        permitted_tools=frozenset(permitted),
        access_key="key-1",
    )
    return Node(
        node_id="test",
        datasets={},
        tables={},
        secrets=SecretSource(env={}),
        operations={"op": op},
        policies={"op": policy},
        relay_targets={},
        protected_index=ProtectedValueIndex("test", ()),
        tools=tools,
        loop_limit=loop_limit,
    )


def _request(body="hello", key="key-1", op="op"):
    return OperationRequest(operation_id=op, access_key=key, conversation_id="c1", body=body)


def test_unknown_operation():
    node = _test_node(SilentPolicy())
    with pytest.raises(OperationNotFound):
        handle_operation(node, _request(op="nope"))


def test_access_key_mismatch():
    node = _test_node(SilentPolicy())
    with pytest.raises(AuthError):
        handle_operation(node, _request(key="wrong"))


def test_loop_limit_hit_at_exact_bound():
    policy = GreedyPolicy()
    node = _test_node(policy)
    with pytest.raises(LoopLimitExceeded):
        handle_operation(node, _request())
    assert policy.turns == 8


def test_loop_limit_configurable():
    policy = GreedyPolicy()
    node = _test_node(policy, loop_limit=3)
    with pytest.raises(LoopLimitExceeded):
        handle_operation(node, _request())
    assert policy.turns == 3


def test_tool_outside_permitted_set():
    class RelayHungryPolicy:
        def decide(self, request_body, history):
            return PolicyDecision(tool_calls=(ToolCall("relay_call", {"target": "x", "body": "y"}),))

    node = _test_node(RelayHungryPolicy(), permitted=("noop",))
    with pytest.raises(ToolNotPermitted):
        handle_operation(node, _request())


def test_operation_config_with_unknown_tool_rejected():
    with pytest.raises(ConfigError):
        _test_node(SilentPolicy(), permitted=("no_such_tool",))


def test_empty_access_key_rejected():
    with pytest.raises(ConfigError):
        OperationConfig("op", "stub", frozenset(), "")


def test_policy_without_tools_has_empty_tool_log():
    node = _test_node(SilentPolicy())
    response = handle_operation(node, _request("ping"))
    assert response.body == "echo: ping"
    assert response.tool_log == ()


def test_intermediate_message_does_not_end_the_loop():
    class ChattyPolicy:
        def decide(self, request_body, history):
            if not history:
                return PolicyDecision(message="working on it", tool_calls=(ToolCall("noop"),))
            return PolicyDecision(message="final answer")

    response = handle_operation(_test_node(ChattyPolicy()), _request())
    assert response.body == "final answer"
    assert len(response.tool_log) == 1


def test_distinct_conversations_run_concurrently():
    node = _test_node(SilentPolicy())
    results: dict[str, str] = {}

    def run(conversation_id: str) -> None:
        request = OperationRequest("op", "key-1", conversation_id, "hi")
        results[conversation_id] = handle_operation(node, request).body

    threads = [threading.Thread(target=run, args=(f"conv-{i}",)) for i in range(4)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    assert len(results) == 4


def test_same_conversation_is_serialised():
    import time

    intervals: list[tuple[float, float]] = []

    class SlowPolicy:
        def decide(self, request_body, history):
            entered = time.monotonic()
            time.sleep(0.05)
            intervals.append((entered, time.monotonic()))
            return PolicyDecision(message="done")

    node = _test_node(SlowPolicy())

    def run() -> None:
        handle_operation(node, OperationRequest("op", "key-1", "shared-conv", "hi"))

    threads = [threading.Thread(target=run) for _ in range(3)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    intervals.sort()
    for (_, previous_exit), (next_enter, _) in zip(intervals, intervals[1:]):
        assert next_enter >= previous_exit


# ---------------------------------------------------------------------------
# Built-in tools against the demo workspace
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def nodes(workspace):
    scenario = boot_scenario(workspace.node_configs, run_id="run-runtime-tools")
    yield scenario.nodes
    scenario.close()


def _tool(node, name, args):
    op = next(iter(node.operations.values()))
    call = ToolCall(name, args)
    return execute_tool(node, op, call, conversation_id="c1").text


def test_hmac_token_tool_matches_golden(nodes):
    text = _tool(nodes["clinic"], "hmac_token", {"patient_id": "CLN-0001"})
    assert text == GOLDEN_TOKENS["CLN-0001"]


def test_csv_lookup_tool_renders_row(nodes):
    text = _tool(nodes["clinic"], "csv_lookup", {"patient_id": "CLN-0001"})
    assert "symptom_class: moderate" in text
    assert "duration_weeks: 12" in text


def test_csv_lookup_tool_absent(nodes):
    assert _tool(nodes["clinic"], "csv_lookup", {"patient_id": "CLN-9999"}) == "no matching observation"


def test_enrollment_match_tool(nodes):
    text = _tool(nodes["insurer"], "enrollment_match", {"token": GOLDEN_TOKENS["CLN-0002"]})
    assert "plan_id: PLAN-B" in text


def test_coverage_lookup_tool(nodes):
    text = _tool(
        nodes["insurer"],
        "coverage_lookup",
        {"plan_id": "PLAN-A", "treatment_code": "knee_hyaluronic_injection"},
    )
    assert "covered: yes" in text


def test_guidance_search_tool(nodes):
    text = _tool(nodes["specialist"], "guidance_search", {"query": "osteoarthritis"})
    assert "doc: osteoarthritis_knee_guidance.md" in text
    assert "red_flag: Locked knee" in text


def test_specialist_cannot_relay(nodes):
    """The specialist operation's permitted set contains no relay tool."""
    node = nodes["specialist"]
    op = node.operations["specialist_consult"]
    assert "relay_call" not in op.permitted_tools
    with pytest.raises(ToolNotPermitted):
        execute_tool(node, op, ToolCall("relay_call", {"target": "x", "body": "y"}), conversation_id="c")


def test_tool_missing_argument(nodes):
    with pytest.raises(ToolError):
        _tool(nodes["clinic"], "csv_lookup", {})


def test_trace_records_each_direction_once(workspace):
    scenario = boot_scenario(workspace.node_configs, run_id="run-trace-dirs")
    try:
        scenario.submit("Confirm coverage for CLN-0001")
    finally:
        scenario.close()
    edges = [(env.from_node, env.to_node) for env in scenario.trace.envelopes]
    assert edges == [
        ("clinic", "insurer"),
        ("insurer", "specialist"),
        ("specialist", "insurer"),
        ("insurer", "clinic"),
    ]


def test_build_node_from_config(workspace):
    cfg = load_node_config(workspace.clinic_config)
    node = build_node(cfg)
    assert node.node_id == "clinic"
    assert set(node.operations) == {"coverage_request"}
    assert node.loop_limit == 8
    assert "insurer" in node.relay_targets
