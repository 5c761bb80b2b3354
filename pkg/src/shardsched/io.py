"""Reading and writing model specs, cluster configs, schedules, and decision logs."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .cost_model import ClusterConfig, CostModel, parse_size
from .errors import ConfigError
from .graph_ir import (Graph, Node, NodeKind, OptimizerStateFragment, Parameter, Phase, Schedule)

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

SCHEDULE_FORMAT = "shardsched-schedule/1"

_NODE_FIELDS = {"id", "kind", "duration_us", "transient_bytes", "persistent_delta_bytes", "deps",
                "param_ref", "micro_step", "phase", "label", "fused_from"}
_PARAM_FIELDS = {"id", "size_bytes", "shard_count"}
_FRAG_FIELDS = {"id", "size_bytes"}
_CLUSTER_FIELDS = {"device_count", "device_memory_bytes", "memory_limit", "prefetch_limit",
                   "fusion_threshold", "accumulation_steps", "reserved_bytes", "host_memory_bytes",
                   "memory_fraction"}
_CLUSTER_SIZES = {"device_memory_bytes", "memory_limit", "prefetch_limit", "reserved_bytes",
                  "host_memory_bytes"}
_COST_FIELDS = {"collective_latency_us", "collective_bandwidth", "host_transfer_latency_us",
                "host_transfer_bandwidth", "table"}
_PIPELINE_FIELDS = {"passes", "warmup_iterations", "strict", "decision_log_dir"}


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def parse_json(text: str, source: str = "<input>") -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from None


def read_config(path: str | Path) -> dict:
    """Load a JSON or TOML mapping, chosen by file suffix."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    if path.suffix.lower() == ".toml":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: malformed TOML: {exc}") from None
    else:
        data = parse_json(text, str(path))
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object at top level")
    return data


def _reject_unknown(entry: dict, allowed: set[str], where: str) -> None:
    if not isinstance(entry, dict):
        raise ConfigError(f"{where}: expected an object")
    extra = sorted(set(entry) - allowed)
    if extra:
        raise ConfigError(f"{where}: unknown fields {extra}")


def _size(value, where: str) -> int:
    try:
        return parse_size(value)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def model_from_dict(data: dict) -> Graph:
    _reject_unknown(data, {"parameters", "optimizer_fragments", "nodes"}, "model")
    try:
        params = []
        for k, p in enumerate(data.get("parameters", [])):
            _reject_unknown(p, _PARAM_FIELDS, f"parameters[{k}]")
            params.append(Parameter(str(p["id"]), _size(p["size_bytes"], f"parameters[{k}]"),
                                    int(p.get("shard_count", 1))))
        frags = []
        for k, f in enumerate(data.get("optimizer_fragments", [])):
            _reject_unknown(f, _FRAG_FIELDS, f"optimizer_fragments[{k}]")
            frags.append(OptimizerStateFragment(str(f["id"]),
                                                _size(f["size_bytes"], f"optimizer_fragments[{k}]")))
        nodes = []
        for k, n in enumerate(data.get("nodes", [])):
            _reject_unknown(n, _NODE_FIELDS, f"nodes[{k}]")
            ref = n.get("param_ref")
            refs = () if ref is None else (tuple(map(str, ref)) if isinstance(ref, list) else (str(ref),))
            nodes.append(Node(
                id=int(n["id"]),
                kind=NodeKind.parse(n["kind"]),
                duration_us=int(n.get("duration_us", 0)),
                transient_bytes=_size(n.get("transient_bytes", 0), f"nodes[{k}]"),
                persistent_delta_bytes=int(n.get("persistent_delta_bytes", 0)),
                deps=frozenset(int(d) for d in n.get("deps", [])),
                refs=refs,
                micro_step=int(n.get("micro_step", 0)),
                phase=Phase(n.get("phase", "forward")),
                label=n.get("label"),
                fused_from=tuple(int(x) for x in n.get("fused_from", [])),
            ))
        return Graph.build(nodes, params, frags)
    except ConfigError:
        raise
    except KeyError as exc:
        raise ConfigError(f"model: missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None


def model_to_dict(graph: Graph) -> dict:
    nodes = []
    for nid in sorted(graph.nodes):
        n = graph[nid]
        ref: Any = None
        if len(n.refs) == 1:
            ref = n.refs[0]
        elif n.refs:
            ref = list(n.refs)
        entry = {
            "id": n.id, "kind": n.kind.value, "duration_us": n.duration_us,
            "transient_bytes": n.transient_bytes, "persistent_delta_bytes": n.persistent_delta_bytes,
            "deps": sorted(n.deps), "param_ref": ref, "micro_step": n.micro_step,
            "phase": n.phase.value,
        }
        if n.label is not None:
            entry["label"] = n.label
        if n.fused_from:
            entry["fused_from"] = list(n.fused_from)
        nodes.append(entry)
    params = []
    for p in graph.parameters.values():
        entry = {"id": p.id, "size_bytes": p.size_bytes}
        if p.shard_count != 1:
            entry["shard_count"] = p.shard_count
        params.append(entry)
    return {
        "parameters": params,
        "optimizer_fragments": [{"id": f.id, "size_bytes": f.size_bytes}
                                for f in graph.fragments.values()],
        "nodes": nodes,
    }


def load_model(path: str | Path) -> Graph:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return model_from_dict(parse_json(text, str(path)))


def cluster_from_dict(data: dict) -> tuple[ClusterConfig, CostModel]:
    """Split a flat config mapping into cluster limits and cost-model parameters."""
    _reject_unknown(data, _CLUSTER_FIELDS | _COST_FIELDS, "cluster")
    ckw = {}
    for k in _CLUSTER_FIELDS & data.keys():
        v = data[k]
        ckw[k] = _size(v, f"cluster.{k}") if k in _CLUSTER_SIZES and v is not None else v
    mkw = {k: data[k] for k in _COST_FIELDS & data.keys()}
    if mkw.get("table") is not None:
        mkw["table"] = tuple((_size(s, "cluster.table"), t) for s, t in mkw["table"])
    try:
        return ClusterConfig(**ckw), CostModel(**mkw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cluster: {exc}") from None


def load_cluster(path: str | Path) -> tuple[ClusterConfig, CostModel]:
    return cluster_from_dict(read_config(path))


def load_pipeline_config(path: str | Path) -> dict:
    data = read_config(path)
    _reject_unknown(data, _PIPELINE_FIELDS, "pipeline")
    return data


def schedule_to_dict(graph: Graph, schedule: Schedule, optimizer_resident: bool) -> dict:
    return {
        "format": SCHEDULE_FORMAT,
        "order": list(schedule.order),
        "provenance": list(schedule.provenance),
        "optimizer_resident": optimizer_resident,
        "model": model_to_dict(graph),
    }


def schedule_from_dict(data: dict, model: Graph | None = None) -> tuple[Graph, Schedule, bool]:
    _reject_unknown(data, {"format", "order", "provenance", "optimizer_resident", "model"}, "schedule")
    if data.get("format", SCHEDULE_FORMAT) != SCHEDULE_FORMAT:
        raise ConfigError(f"schedule: unsupported format {data.get('format')!r}")
    if "model" in data:
        model = model_from_dict(data["model"])
    if model is None:
        raise ConfigError("schedule file carries no model; pass --model")
    order = [int(x) for x in data.get("order", [])]
    return model, Schedule(tuple(order), tuple(data.get("provenance", ()))), bool(
        data.get("optimizer_resident", False))


def load_schedule(path: str | Path, model: Graph | None = None) -> tuple[Graph, Schedule, bool]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return schedule_from_dict(parse_json(text, str(path)), model)


def write_jsonl(path: str | Path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
