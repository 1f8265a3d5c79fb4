"""Boot a multi-node deployment and drive one request through it.

All nodes of a run share one trace log. The in-process transport wires the
nodes over a local bus for hermetic runs; the network transport starts one
loopback HTTP listener per node and rewrites relay target URLs to the bound
ports. Both preserve the isolation contract because every data access is
store-scoped per node either way.
"""

from __future__ import annotations

import dataclasses
import logging
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .config import NodeConfig, build_topology, load_node_config, load_topology_config
from .datastore import (
    ProtectedValueIndex,
    load_clinic_store,
    load_guidance,
    load_insurer_store,
    protected_values,
)
from .errors import ConfigError, FedmeshError
from .locality import Topology, TraceLog, Violation, check_trace
from .policies import build_policy
from .pseudonym import SecretSource
from .relay import HttpTransport, LoopbackTransport, RelayServer, serve
from .runtime import TOOL_REGISTRY, Node, OperationRequest, handle_operation

logger = logging.getLogger(__name__)

TRANSPORTS = ("inprocess", "network")


def build_node(
    cfg: NodeConfig,
    *,
    trace: TraceLog | None = None,
    env: Mapping[str, str] | None = None,
    policy_overrides: Mapping[str, Mapping[str, object]] | None = None,
) -> Node:
    """Load datasets, build the protected index, and instantiate policies.

    ``policy_overrides`` merges extra options into every operation whose
    policy name matches; the scenario runner uses it for fault injection.
    """
    secrets = SecretSource(files=dict(cfg.secret_files), env=env)

    datasets: dict[str, object] = {}
    tables: dict[str, object] = {}
    for kind, paths in cfg.datasets.items():
        if kind == "clinic":
            store = load_clinic_store(paths["observations"], paths["patients"])
            datasets["clinic"] = store
            tables.update(store.tables)
        elif kind == "insurer":
            store = load_insurer_store(paths["enrollment"], paths["coverage_rules"])
            datasets["insurer"] = store
            tables.update(store.tables)
        elif kind == "guidance":
            datasets["guidance"] = load_guidance(paths["dir"])
        else:
            raise ConfigError(f"node {cfg.node_id!r}: unknown dataset kind {kind!r}")

    index = protected_values(cfg.node_id, cfg.protected, tables, secrets)

    policies = {}
    for op in cfg.operations:
        options = dict(cfg.policy_options.get(op.operation_id, {}))
        if policy_overrides and op.agent_policy in policy_overrides:
            options.update(policy_overrides[op.agent_policy])
        policies[op.operation_id] = build_policy(op.agent_policy, options)

    return Node(
        node_id=cfg.node_id,
        datasets=datasets,  # type: ignore[arg-type]
        tables=tables,  # type: ignore[arg-type]
        secrets=secrets,
        operations={op.operation_id: op for op in cfg.operations},
        policies=policies,
        relay_targets={target.name: target for target in cfg.relay_targets},
        protected_index=index,
        tools=dict(TOOL_REGISTRY),
        hmac_secret=cfg.hmac_secret,
        trace=trace,
        loop_limit=cfg.loop_limit,
    )


def _load_tables(cfg: NodeConfig) -> dict[str, object]:
    tables: dict[str, object] = {}
    for kind, paths in cfg.datasets.items():
        if kind == "clinic":
            tables.update(load_clinic_store(paths["observations"], paths["patients"]).tables)
        elif kind == "insurer":
            tables.update(load_insurer_store(paths["enrollment"], paths["coverage_rules"]).tables)
    return tables


def load_audit_context(
    topology_config_path: Path | str,
) -> tuple[Topology, dict[str, ProtectedValueIndex]]:
    """Rebuild the topology and per-node indexes the trace checker needs."""
    tcfg = load_topology_config(topology_config_path)
    configs = [load_node_config(path) for path in tcfg.node_config_paths]
    topology = build_topology(
        configs,
        token_free_nodes=tcfg.token_free_nodes,
        inquiry_edges=tcfg.inquiry_edges,
        patient_id_pattern=tcfg.patient_id_pattern,
    )
    indexes = {}
    for cfg in configs:
        secrets = SecretSource(files=dict(cfg.secret_files))
        indexes[cfg.node_id] = protected_values(
            cfg.node_id, cfg.protected, _load_tables(cfg), secrets  # type: ignore[arg-type]
        )
    return topology, indexes


@dataclass
class Scenario:
    """A booted deployment: nodes, shared trace, declared topology."""

    run_id: str
    nodes: dict[str, Node]
    trace: TraceLog
    topology: Topology
    entry_node: str
    entry_operation: str
    servers: list[RelayServer] = field(default_factory=list)

    def submit(self, body: str, conversation_id: str | None = None) -> str:
        node = self.nodes[self.entry_node]
        op = node.operations[self.entry_operation]
        request = OperationRequest(
            operation_id=self.entry_operation,
            access_key=op.access_key,
            conversation_id=conversation_id or f"{self.run_id}-c1",
            body=body,
        )
        return handle_operation(node, request).body

    def indexes(self):
        return {node_id: node.protected_index for node_id, node in self.nodes.items()}

    def check(self) -> list[Violation]:
        return check_trace(self.trace, self.topology, self.indexes())

    def close(self) -> None:
        for server in self.servers:
            server.close()
        self.servers.clear()


def boot_scenario(
    config_paths: Sequence[Path | str],
    *,
    transport: str = "inprocess",
    run_id: str | None = None,
    env: Mapping[str, str] | None = None,
    policy_overrides: Mapping[str, Mapping[str, object]] | None = None,
    token_free_nodes: frozenset[str] = frozenset({"specialist"}),
    inquiry_edges: frozenset[tuple[str, str]] = frozenset({("clinic", "insurer")}),
) -> Scenario:
    """Boot every configured node; the first config hosts the entry
    operation."""
    if transport not in TRANSPORTS:
        raise ConfigError(f"unknown transport {transport!r} (expected one of {TRANSPORTS})")
    if not config_paths:
        raise ConfigError("at least one node config is required")

    run_id = run_id or f"run-{uuid.uuid4().hex[:12]}"
    trace = TraceLog(run_id)
    configs = [load_node_config(path) for path in config_paths]
    topology = build_topology(
        configs, token_free_nodes=token_free_nodes, inquiry_edges=inquiry_edges
    )

    nodes: dict[str, Node] = {}
    for cfg in configs:
        if cfg.node_id in nodes:
            raise ConfigError(f"duplicate node id {cfg.node_id!r}")
        nodes[cfg.node_id] = build_node(
            cfg, trace=trace, env=env, policy_overrides=policy_overrides
        )

    servers: list[RelayServer] = []
    if transport == "inprocess":
        for node in nodes.values():
            node.transport = LoopbackTransport(nodes)
    else:
        urls: dict[str, str] = {}
        for cfg in configs:
            server = serve(nodes[cfg.node_id], (cfg.bind_host, cfg.bind_port))
            servers.append(server)
            urls[cfg.node_id] = server.url
        for node in nodes.values():
            node.transport = HttpTransport()
            node.relay_targets = {
                name: dataclasses.replace(target, url=urls.get(target.name, target.url))
                for name, target in node.relay_targets.items()
            }
        logger.info("network listeners: %s", ", ".join(f"{n}={u}" for n, u in urls.items()))

    entry = configs[0]
    return Scenario(
        run_id=run_id,
        nodes=nodes,
        trace=trace,
        topology=topology,
        entry_node=entry.node_id,
        entry_operation=entry.operations[0].operation_id,
        servers=servers,
    )


@dataclass(frozen=True)
class ScenarioResult:
    run_id: str
    request_body: str
    response_body: str | None
    error: str | None
    trace: TraceLog
    violations: tuple[Violation, ...]
    transcript: str

    @property
    def exit_code(self) -> int:
        # 0 clean, 1 operational failure, 2 locality violations
        if self.error is not None:
            return 1
        return 2 if self.violations else 0


def _indent(text: str) -> str:
    return "\n".join("    " + line for line in text.split("\n"))


def _build_transcript(
    scenario: Scenario,
    request_body: str,
    response_body: str | None,
    error: str | None,
    violations: Sequence[Violation],
) -> str:
    lines = [f"run {scenario.run_id}: {scenario.entry_node}/{scenario.entry_operation}"]
    lines.append(f"> {request_body}")
    for env in scenario.trace.envelopes:
        lines.append(f"[{env.sent_at}] {env.from_node} -> {env.to_node} ({env.operation_id})")
        lines.append(_indent(env.body))
    if response_body is not None:
        lines.append(f"response <- {scenario.entry_node}")
        lines.append(_indent(response_body))
    if error is not None:
        lines.append(f"error: {error}")
    if violations:
        lines.append(f"locality: {len(violations)} violation(s)")
        lines.extend(_indent(v.to_json()) for v in violations)
    else:
        lines.append("locality: clean")
    return "\n".join(lines) + "\n"


def run_scenario(
    config_paths: Sequence[Path | str],
    request_body: str,
    *,
    transport: str = "inprocess",
    run_id: str | None = None,
    trace_path: Path | str | None = None,
    env: Mapping[str, str] | None = None,
    inject_leak: str | None = None,
    forward_token: bool = False,
    bypass_guard: bool = False,
) -> ScenarioResult:
    """Boot, submit the request, audit the trace, and assemble a transcript.

    ``inject_leak`` appends text to every body the entry node sends out;
    ``forward_token`` makes the insurer leak the case token into its
    consult; ``bypass_guard`` disables the runtime guard so seeded faults
    reach the trace for the offline checker to catch.
    """
    policy_overrides = {"insurer": {"forward_token": True}} if forward_token else None
    scenario = boot_scenario(
        config_paths,
        transport=transport,
        run_id=run_id,
        env=env,
        policy_overrides=policy_overrides,
    )
    try:
        if bypass_guard:
            for node in scenario.nodes.values():
                node.enforce_guard = False
        if inject_leak:
            entry = scenario.nodes[scenario.entry_node]
            entry.outbound_mutators.append(lambda target, body: f"{body}\n{inject_leak}")

        response_body: str | None = None
        error: str | None = None
        try:
            response_body = scenario.submit(request_body)
        except FedmeshError as exc:
            error = f"{type(exc).__name__}: {exc}"

        violations = tuple(scenario.check())
        if trace_path is not None:
            scenario.trace.write(trace_path)
        transcript = _build_transcript(scenario, request_body, response_body, error, violations)
        return ScenarioResult(
            run_id=scenario.run_id,
            request_body=request_body,
            response_body=response_body,
            error=error,
            trace=scenario.trace,
            violations=violations,
            transcript=transcript,
        )
    finally:
        scenario.close()
