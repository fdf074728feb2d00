"""
graph_core.py — Model-graph IR, JSON ingestion and synthetic GPT graphs.

Nodes carry only symbolic sizes (parameter element counts and an abstract
output size), never tensors. A graph document looks like:

    {"inputs": ["input_ids", "mask"],
     "nodes": [{"id": "embed", "kind": "embed", "args": ["input_ids"],
                "param_count": 0, "out_units": 1536, "tmp_attr": null}, ...],
     "common_nodes": ["attention_mask"]}

Args naming a graph input are input references, every other arg refers to a
node that must appear earlier in the document. `common_nodes` is optional;
without it, nodes with at least the threshold number of distinct users are
common.
"""

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx

from planner.errors import CycleError, DanglingRefError, DomainError, SchemaError

logger = logging.getLogger(__name__)

KINDS = (
    "gemm",
    "attention-core",
    "elementwise",
    "norm",
    "embed",
    "reshape",
    "loss-head",
    "opaque",
)
PARAMETERLESS_KINDS = {"elementwise", "reshape"}
TMP_KINDS = {"gemm", "attention-core"}
TMP_ATTRS = {"row", "column", None}

NODE_FIELDS = ("id", "kind", "args", "param_count", "out_units", "tmp_attr")


@dataclass(frozen=True)
class OpNode:
    id: str
    kind: str
    args: tuple[str, ...] = ()
    param_count: int = 0
    out_units: int = 1
    tmp_attr: str | None = None


@dataclass(frozen=True)
class ModelGraph:
    nodes: tuple[OpNode, ...]
    inputs: tuple[str, ...]
    param_counts: dict[str, int] = field(compare=False)
    common_user_counts: dict[str, int]

    def node(self, node_id: str) -> OpNode:
        return self.nodes[self.position(node_id)]

    def position(self, node_id: str) -> int:
        return self._index[node_id]

    def is_input(self, name: str) -> bool:
        return name in self._input_set

    def users(self, name: str) -> list[str]:
        """Distinct nodes listing `name` in their args, in graph order."""
        return [n.id for n in self.nodes if name in n.args]

    @property
    def total_params(self) -> int:
        return sum(self.param_counts.values())

    @property
    def layer_count(self) -> int:
        # one attention core per transformer layer
        return sum(1 for n in self.nodes if n.kind == "attention-core")

    def __post_init__(self):
        object.__setattr__(self, "_index", {n.id: i for i, n in enumerate(self.nodes)})
        object.__setattr__(self, "_input_set", frozenset(self.inputs))


# ---------------------------------------------------------------------------
# Construction and validation
# ---------------------------------------------------------------------------

def _check_node(node: OpNode) -> None:
    if node.kind not in KINDS:
        raise SchemaError(f"node {node.id!r}: unknown kind {node.kind!r}")
    if not isinstance(node.param_count, int) or node.param_count < 0:
        raise SchemaError(f"node {node.id!r}: param_count must be a nonnegative integer")
    if not isinstance(node.out_units, int) or node.out_units < 1:
        raise SchemaError(f"node {node.id!r}: out_units must be a positive integer")
    if node.tmp_attr not in TMP_ATTRS:
        raise SchemaError(f"node {node.id!r}: tmp_attr must be row, column or null")
    if node.kind in PARAMETERLESS_KINDS and node.param_count != 0:
        raise SchemaError(f"node {node.id!r}: {node.kind} nodes carry no parameters")
    if node.tmp_attr is not None and node.kind not in TMP_KINDS:
        raise SchemaError(f"node {node.id!r}: tmp_attr only applies to gemm/attention-core")


def default_common_threshold(nodes) -> int:
    layers = sum(1 for n in nodes if n.kind == "attention-core")
    return max(2, layers)


def _users(nodes, inputs) -> dict[str, list[str]]:
    input_set = set(inputs)
    users: dict[str, list[str]] = {}
    for node in nodes:
        for arg in dict.fromkeys(node.args):
            if arg not in input_set:
                users.setdefault(arg, []).append(node.id)
    return users


def build_graph(nodes, inputs, common_threshold: int | None = None, common_nodes=None) -> ModelGraph:
    """
    Validate a topologically ordered node list and wrap it as a ModelGraph.

    Common nodes are those with at least `common_threshold` distinct users,
    unless `common_nodes` names them explicitly.
    """
    nodes = tuple(nodes)
    inputs = tuple(inputs)

    if len(set(inputs)) != len(inputs):
        raise SchemaError("duplicate graph input names")

    all_ids = [n.id for n in nodes]
    if len(set(all_ids)) != len(all_ids):
        raise SchemaError("duplicate node ids")
    clashes = set(all_ids) & set(inputs)
    if clashes:
        raise SchemaError(f"names used both as node and input: {sorted(clashes)}")

    id_set = set(all_ids)
    input_set = set(inputs)
    seen: set[str] = set()
    for node in nodes:
        _check_node(node)
        for arg in node.args:
            if arg in input_set or arg in seen:
                continue
            if arg in id_set:
                raise CycleError(f"node {node.id!r} references {arg!r} before it is defined")
            raise DanglingRefError(f"node {node.id!r} references unknown {arg!r}")
        seen.add(node.id)

    users = _users(nodes, inputs)
    if common_nodes is not None:
        declared = set(common_nodes)
        unknown = sorted(declared - id_set)
        if unknown:
            raise SchemaError(f"common nodes not in the graph: {unknown}")
        common = {n.id: len(users.get(n.id, [])) for n in nodes if n.id in declared}
    else:
        threshold = common_threshold or default_common_threshold(nodes)
        if threshold < 2:
            raise DomainError("common-node threshold must be at least 2")
        common = {n.id: len(users[n.id]) for n in nodes if len(users.get(n.id, [])) >= threshold}

    return ModelGraph(
        nodes=nodes,
        inputs=inputs,
        param_counts={n.id: n.param_count for n in nodes},
        common_user_counts=common,
    )


def to_networkx(graph: ModelGraph) -> nx.DiGraph:
    dag = nx.DiGraph()
    for name in graph.inputs:
        dag.add_node(name, kind="input")
    for node in graph.nodes:
        dag.add_node(node.id, kind=node.kind, param_count=node.param_count)
        for arg in node.args:
            dag.add_edge(arg, node.id)
    return dag


def detect_common_nodes(graph: ModelGraph, threshold: int) -> dict[str, int]:
    """Nodes consumed by at least `threshold` distinct users, with their user counts."""
    if threshold < 2:
        raise DomainError("common-node threshold must be at least 2")
    dag = to_networkx(graph)
    return {
        node.id: dag.out_degree(node.id)
        for node in graph.nodes
        if dag.out_degree(node.id) >= threshold
    }


# ---------------------------------------------------------------------------
# Documents
# ---------------------------------------------------------------------------

def ingest_graph(document: dict, common_threshold: int | None = None) -> ModelGraph:
    if not isinstance(document, dict):
        raise SchemaError("graph document must be a JSON object")
    if not isinstance(document.get("inputs"), list) or not isinstance(document.get("nodes"), list):
        raise SchemaError("graph document needs 'inputs' and 'nodes' lists")
    if not all(isinstance(x, str) for x in document["inputs"]):
        raise SchemaError("graph inputs must be strings")

    nodes = []
    for raw in document["nodes"]:
        if not isinstance(raw, dict):
            raise SchemaError("every node entry must be an object")
        missing = {"id", "kind", "args", "param_count", "out_units"} - raw.keys()
        if missing:
            raise SchemaError(f"node entry missing fields: {sorted(missing)}")
        unknown = raw.keys() - set(NODE_FIELDS)
        if unknown:
            raise SchemaError(f"node entry has unknown fields: {sorted(unknown)}")
        if not isinstance(raw["id"], str) or not isinstance(raw["args"], list):
            raise SchemaError("node id must be a string and args a list")
        if not all(isinstance(a, str) for a in raw["args"]):
            raise SchemaError(f"node {raw['id']!r}: args must be strings")
        if isinstance(raw["param_count"], bool) or isinstance(raw["out_units"], bool):
            raise SchemaError(f"node {raw['id']!r}: sizes must be integers")
        nodes.append(OpNode(
            id=raw["id"],
            kind=raw["kind"],
            args=tuple(raw["args"]),
            param_count=raw["param_count"],
            out_units=raw["out_units"],
            tmp_attr=raw.get("tmp_attr"),
        ))

    declared = document.get("common_nodes")
    if declared is not None:
        if not isinstance(declared, list) or not all(isinstance(c, str) for c in declared):
            raise SchemaError("common_nodes must be a list of node ids")
    if common_threshold is not None:
        # an explicit threshold re-runs detection
        declared = None

    graph = build_graph(nodes, document["inputs"], common_threshold, common_nodes=declared)
    logger.debug("Ingested graph with %d nodes, %d inputs", len(graph.nodes), len(graph.inputs))
    return graph


def serialize_graph(graph: ModelGraph) -> dict:
    return {
        "inputs": list(graph.inputs),
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind,
                "args": list(n.args),
                "param_count": n.param_count,
                "out_units": n.out_units,
                "tmp_attr": n.tmp_attr,
            }
            for n in graph.nodes
        ],
        "common_nodes": list(graph.common_user_counts),
    }


def load_graph(path, common_threshold: int | None = None) -> ModelGraph:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"graph file not found at {path}")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        logger.exception("Failed to parse graph file %s", path)
        raise SchemaError(f"graph file {path} is not valid JSON: {e}") from e
    return ingest_graph(document, common_threshold)


def save_graph(graph: ModelGraph, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(serialize_graph(graph), indent=2), encoding="utf-8")
    return path


def graph_fingerprint(graph: ModelGraph) -> str:
    canonical = json.dumps(serialize_graph(graph), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Synthetic GPT-like graphs
# ---------------------------------------------------------------------------

def generate_gpt_graph(
    layers: int,
    hidden: int,
    with_head: bool = True,
    vocab_size: int = 0,
) -> ModelGraph:
    """
    embed -> layers x (attention block + FFN block) -> final norm [-> loss head].

    Each layer holds 12*hidden^2 parameters (qkv 3h^2, proj h^2, fc1 4h^2,
    fc2 4h^2). Every block opens with a parameter-free `residual` node that
    carries the block input; the block's norm reads it and the residual add,
    fused into the closing row-parallel gemm, reads it again, so a block never
    reaches back into the previous block.
    One attention-mask node, derived from the `mask` input, feeds every layer
    and is declared as the graph's common node.
    Embedding parameters are vocab_size*hidden (0 by default, the loss head
    reuses them).
    """
    if layers < 1 or hidden < 1:
        raise DomainError("layers and hidden must be positive")

    h = hidden
    inputs = ["input_ids", "mask"] + (["labels"] if with_head else [])
    nodes = [
        OpNode("attention_mask", "reshape", ("mask",), 0, 1),
        OpNode("embed", "embed", ("input_ids",), vocab_size * h, h),
    ]
    prev = "embed"
    for layer in range(layers):
        a = f"layer{layer}.attn"
        f = f"layer{layer}.ffn"
        nodes += [
            OpNode(f"{a}.residual", "reshape", (prev,), 0, h),
            OpNode(f"{a}.norm", "norm", (f"{a}.residual",), 0, h),
            OpNode(f"{a}.qkv", "gemm", (f"{a}.norm",), 3 * h * h, 3 * h, "column"),
            OpNode(f"{a}.core", "attention-core", (f"{a}.qkv", "attention_mask"), 0, h, "column"),
            OpNode(f"{a}.proj", "gemm", (f"{a}.core", f"{a}.residual"), h * h, h, "row"),
            OpNode(f"{f}.residual", "reshape", (f"{a}.proj",), 0, h),
            OpNode(f"{f}.norm", "norm", (f"{f}.residual",), 0, h),
            OpNode(f"{f}.fc1", "gemm", (f"{f}.norm",), 4 * h * h, 4 * h, "column"),
            OpNode(f"{f}.act", "elementwise", (f"{f}.fc1",), 0, 4 * h),
            OpNode(f"{f}.fc2", "gemm", (f"{f}.act", f"{f}.residual"), 4 * h * h, h, "row"),
        ]
        prev = f"{f}.fc2"

    nodes.append(OpNode("final_norm", "norm", (prev,), 0, h))
    if with_head:
        nodes.append(OpNode("loss_head", "loss-head", ("final_norm", "labels"), 0, 1))

    return build_graph(nodes, inputs, common_nodes=["attention_mask"])


def generate_random_graph(num_nodes: int, seed: int = 0, num_inputs: int = 2, max_fanin: int = 3) -> ModelGraph:
    """Random topologically ordered DAG of gemm and elementwise nodes."""
    if num_nodes < 1 or num_inputs < 1 or max_fanin < 1:
        raise DomainError("num_nodes, num_inputs and max_fanin must be positive")
    rng = random.Random(seed)
    inputs = [f"x{i}" for i in range(num_inputs)]
    nodes = []
    for i in range(num_nodes):
        pool = inputs + [n.id for n in nodes]
        # bias towards recent producers so chains and skips both occur
        recent = pool[-4:]
        fanin = rng.randint(1, min(max_fanin, len(pool)))
        args = {rng.choice(recent if rng.random() < 0.7 else pool) for _ in range(fanin)}
        args = tuple(sorted(args, key=pool.index))
        if rng.random() < 0.6:
            nodes.append(OpNode(f"n{i}", "gemm", args, rng.randint(1, 100), rng.randint(1, 8)))
        else:
            nodes.append(OpNode(f"n{i}", "elementwise", args, 0, rng.randint(1, 8)))
    return build_graph(nodes, inputs, rng.randint(2, 4))
