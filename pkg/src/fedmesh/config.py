"""JSON configuration files for nodes and for the audit topology.

A node config declares the node id, dataset paths, secret sources, protected
columns, exposed operations, relay targets, and the listener bind address.
Relative paths resolve against the config file's directory. The README
documents the full schema; by contract a relay target's name must equal the
destination node's id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .datastore import MatchMode, ProtectedSpec
from .errors import ConfigError
from .locality import DEFAULT_PATIENT_ID_PATTERN, Topology
from .relay import RelayTarget
from .runtime import DEFAULT_LOOP_LIMIT, OperationConfig

DATASET_KINDS = ("clinic", "insurer", "guidance")


@dataclass(frozen=True)
class NodeConfig:
    node_id: str
    base_dir: Path
    datasets: Mapping[str, Mapping[str, Path]]
    secret_files: Mapping[str, Path]
    hmac_secret: str | None
    protected: tuple[ProtectedSpec, ...]
    operations: tuple[OperationConfig, ...]
    policy_options: Mapping[str, Mapping[str, object]]
    relay_targets: tuple[RelayTarget, ...]
    bind_host: str
    bind_port: int
    loop_limit: int


def _expect(record: Mapping[str, object], key: str, kind: type, where: str) -> object:
    if key not in record:
        raise ConfigError(f"{where}: missing key {key!r}")
    value = record[key]
    if not isinstance(value, kind):
        raise ConfigError(f"{where}: key {key!r} must be {kind.__name__}")
    return value


def _parse_protected(entries: object, where: str) -> tuple[ProtectedSpec, ...]:
    if not isinstance(entries, list):
        raise ConfigError(f"{where}: 'protected' must be a list")
    specs: list[ProtectedSpec] = []
    for entry in entries:
        if not isinstance(entry, dict):
            raise ConfigError(f"{where}: protected entries must be objects")
        try:
            match = MatchMode(entry.get("match", "exact"))
        except ValueError:
            raise ConfigError(f"{where}: protected match must be 'exact' or 'text'") from None
        allowed_to = frozenset(entry.get("allowed_to", ()))
        if "derived" in entry:
            specs.append(
                ProtectedSpec(
                    derived=str(entry["derived"]),
                    store=str(entry.get("store", "patients")),
                    column=str(entry.get("column", "patient_id")),
                    secret=str(entry["secret"]) if "secret" in entry else None,
                    match=match,
                    allowed_to=allowed_to,
                )
            )
        else:
            columns = entry.get("columns")
            if not isinstance(columns, list) or not columns:
                raise ConfigError(f"{where}: protected entry needs a non-empty 'columns' list")
            specs.append(
                ProtectedSpec(
                    store=str(_expect(entry, "store", str, where)),
                    columns=tuple(str(col) for col in columns),
                    match=match,
                    allowed_to=allowed_to,
                )
            )
    return tuple(specs)


def load_node_config(path: Path | str) -> NodeConfig:
    path = Path(path)
    where = path.name
    try:
        record = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{where}: invalid JSON: {exc}") from None
    if not isinstance(record, dict):
        raise ConfigError(f"{where}: config root must be an object")

    base_dir = path.parent
    node_id = str(_expect(record, "node_id", str, where))
    if not node_id:
        raise ConfigError(f"{where}: node_id must be non-empty")

    datasets: dict[str, dict[str, Path]] = {}
    for kind, paths in _expect(record, "datasets", dict, where).items():
        if kind not in DATASET_KINDS:
            raise ConfigError(f"{where}: unknown dataset kind {kind!r}")
        if not isinstance(paths, dict):
            raise ConfigError(f"{where}: dataset {kind!r} must map names to paths")
        datasets[kind] = {name: base_dir / str(p) for name, p in paths.items()}

    secret_files: dict[str, Path] = {}
    for name, source in record.get("secrets", {}).items():
        if not isinstance(source, dict):
            raise ConfigError(f"{where}: secret {name!r} must be an object")
        if "file" in source:
            secret_files[str(name)] = base_dir / str(source["file"])
        # otherwise the secret resolves through its environment variable

    operations: list[OperationConfig] = []
    policy_options: dict[str, dict[str, object]] = {}
    ops_record = _expect(record, "operations", dict, where)
    if not ops_record:
        raise ConfigError(f"{where}: node must expose at least one operation")
    for op_id, op in ops_record.items():
        if not isinstance(op, dict):
            raise ConfigError(f"{where}: operation {op_id!r} must be an object")
        tools = op.get("tools", [])
        if not isinstance(tools, list):
            raise ConfigError(f"{where}: operation {op_id!r}: 'tools' must be a list")
        operations.append(
            OperationConfig(
                operation_id=str(op_id),
                agent_policy=str(_expect(op, "policy", str, f"{where}:{op_id}")),
                permitted_tools=frozenset(str(tool) for tool in tools),
                access_key=str(_expect(op, "access_key", str, f"{where}:{op_id}")),
            )
        )
        options = op.get("policy_options", {})
        if not isinstance(options, dict):
            raise ConfigError(f"{where}: operation {op_id!r}: 'policy_options' must be an object")
        policy_options[str(op_id)] = dict(options)

    targets: list[RelayTarget] = []
    for name, target in record.get("relay_targets", {}).items():
        if not isinstance(target, dict):
            raise ConfigError(f"{where}: relay target {name!r} must be an object")
        targets.append(
            RelayTarget(
                name=str(name),
                url=str(_expect(target, "url", str, f"{where}:{name}")),
                operation_id=str(_expect(target, "operation_id", str, f"{where}:{name}")),
                access_key=str(_expect(target, "access_key", str, f"{where}:{name}")),
            )
        )

    bind = record.get("bind", {})
    if not isinstance(bind, dict):
        raise ConfigError(f"{where}: 'bind' must be an object")

    return NodeConfig(
        node_id=node_id,
        base_dir=base_dir,
        datasets=datasets,
        secret_files=secret_files,
        hmac_secret=str(record["hmac_secret"]) if "hmac_secret" in record else None,
        protected=_parse_protected(record.get("protected", []), where),
        operations=tuple(operations),
        policy_options=policy_options,
        relay_targets=tuple(targets),
        bind_host=str(bind.get("host", "127.0.0.1")),
        bind_port=int(bind.get("port", 0)),
        loop_limit=int(record.get("loop_limit", DEFAULT_LOOP_LIMIT)),
    )


# ---------------------------------------------------------------------------
# Audit topology
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TopologyConfig:
    node_config_paths: tuple[Path, ...]
    token_free_nodes: frozenset[str]
    inquiry_edges: frozenset[tuple[str, str]]
    patient_id_pattern: str


def load_topology_config(path: Path | str) -> TopologyConfig:
    path = Path(path)
    where = path.name
    try:
        record = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{where}: invalid JSON: {exc}") from None
    if not isinstance(record, dict):
        raise ConfigError(f"{where}: topology root must be an object")
    nodes = record.get("nodes")
    if not isinstance(nodes, list) or not nodes:
        raise ConfigError(f"{where}: 'nodes' must list node config paths")
    inquiry_edges = frozenset(
        (str(edge[0]), str(edge[1])) for edge in record.get("inquiry_edges", [])
    )
    return TopologyConfig(
        node_config_paths=tuple(path.parent / str(p) for p in nodes),
        token_free_nodes=frozenset(str(n) for n in record.get("token_free_nodes", [])),
        inquiry_edges=inquiry_edges,
        patient_id_pattern=str(record.get("patient_id_pattern", DEFAULT_PATIENT_ID_PATTERN)),
    )


def build_topology(
    configs: Sequence[NodeConfig],
    *,
    token_free_nodes: frozenset[str] = frozenset(),
    inquiry_edges: frozenset[tuple[str, str]] = frozenset(),
    patient_id_pattern: str = DEFAULT_PATIENT_ID_PATTERN,
) -> Topology:
    """Declared relay edges are exactly the configured (node, target) pairs."""
    edges = frozenset(
        (cfg.node_id, target.name) for cfg in configs for target in cfg.relay_targets
    )
    return Topology(
        edges=edges,
        token_free_nodes=token_free_nodes,
        inquiry_edges=inquiry_edges,
        patient_id_pattern=patient_id_pattern,
    )
