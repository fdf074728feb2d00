"""
sharder.py — Splits a model graph into a chain of subgraphs and maps the
chain onto pipeline stages.

The traversal follows the dependency search / graph sharding procedure:
walk nodes in topological order, keep each node with its farthest
dependency (retroactively merging the nodes in between), and close the
current subgraph once its parameter sum reaches Sum(params)/k. Every
subgraph's inputs are exactly the previous subgraph's outputs plus the graph
inputs it first consumes, so the list runs as a plain sequence.
"""

import logging
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from planner.errors import (
    EmptyGraphError,
    InfeasibleError,
    StateError,
    UnusedInputWarning,
)
from planner.graph_core import ModelGraph, OpNode

logger = logging.getLogger(__name__)


@dataclass
class ShardState:
    current_subgraph_id: int
    node_to_subgraph: dict[str, int]
    input_first_user: dict[str, str | None]
    subgraph_outputs: dict[int, list[str]]
    visited: list[str]
    common_remaining: dict[str, int]
    param_threshold: Fraction
    running_param_count: int = 0

    @classmethod
    def initial(cls, graph: ModelGraph, k: int) -> "ShardState":
        return cls(
            current_subgraph_id=0,
            node_to_subgraph={},
            input_first_user={name: None for name in graph.inputs},
            subgraph_outputs={},
            visited=[],
            common_remaining=dict(graph.common_user_counts),
            param_threshold=Fraction(graph.total_params, k),
        )

    def exported(self, node_id: str) -> bool:
        return any(node_id in outs for outs in self.subgraph_outputs.values())


@dataclass(frozen=True)
class Subgraph:
    index: int
    nodes: tuple[OpNode, ...]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    param_count: int

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]


@dataclass(frozen=True)
class SubgraphSequence:
    subgraphs: tuple[Subgraph, ...]
    input_owner: dict[str, int | None]
    merges: int = 0

    def __len__(self) -> int:
        return len(self.subgraphs)

    def __iter__(self):
        return iter(self.subgraphs)

    def __getitem__(self, index: int) -> Subgraph:
        return self.subgraphs[index]


@dataclass(frozen=True)
class StageAssignment:
    stage_of_subgraph: dict[int, int]
    stage_param_counts: tuple[int, ...]
    stage_layer_counts: tuple[int, ...] = field(default=())

    @property
    def stages(self) -> int:
        return len(self.stage_param_counts)

    def subgraphs_of(self, stage: int) -> list[int]:
        return [i for i, s in sorted(self.stage_of_subgraph.items()) if s == stage]


# ---------------------------------------------------------------------------
# Dependency search
# ---------------------------------------------------------------------------

def search_dependency(node: OpNode, state: ShardState, graph_inputs) -> tuple[int, str | None, ShardState]:
    """
    Farthest dependency of `node`: the smallest subgraph id it must join and
    the node responsible for it (None when nothing pulls it back).

    Common-node args only consume one remaining use; a graph input pulls the
    node to its first user's subgraph; a previous subgraph output pulls it to
    the subgraph right after that output; any other visited node except the
    last one pulls it to that node's own subgraph. First arg wins on ties.
    """
    s_min = state.current_subgraph_id
    n_min = None
    last = state.visited[-1] if state.visited else None

    for arg in dict.fromkeys(node.args):
        if arg in state.common_remaining:
            if arg not in state.node_to_subgraph:
                raise StateError(f"common node {arg!r} used by {node.id!r} before it is visited")
            state.common_remaining[arg] = max(0, state.common_remaining[arg] - 1)
        elif arg in graph_inputs:
            first = state.input_first_user.get(arg)
            if first is None:
                state.input_first_user[arg] = node.id
            elif state.node_to_subgraph[first] < s_min:
                s_min, n_min = state.node_to_subgraph[first], first
        elif state.exported(arg):
            if state.node_to_subgraph[arg] + 1 < s_min:
                s_min, n_min = state.node_to_subgraph[arg] + 1, arg
        elif arg in state.node_to_subgraph:
            if arg != last and state.node_to_subgraph[arg] < s_min:
                s_min, n_min = state.node_to_subgraph[arg], arg
        else:
            raise StateError(f"arg {arg!r} of {node.id!r} is neither visited, an input nor common")

    return s_min, n_min, state


# ---------------------------------------------------------------------------
# Graph sharding
# ---------------------------------------------------------------------------

def shard_graph(graph: ModelGraph, k: int) -> SubgraphSequence:
    if not graph.nodes:
        raise EmptyGraphError("cannot shard a graph without nodes")
    if not 1 <= k <= len(graph.nodes):
        raise InfeasibleError(f"k must lie in [1, {len(graph.nodes)}], got {k}")

    state = ShardState.initial(graph, k)
    inputs = set(graph.inputs)
    params = graph.param_counts
    members: dict[int, int] = {}      # running param sum per subgraph id
    merges = 0

    for node in graph.nodes:
        s_min, n_min, state = search_dependency(node, state, inputs)
        s = state.current_subgraph_id

        if s_min < s:
            merges += 1
            # Every node visited from n_min onward rejoins subgraph s_min.
            moved_from: dict[int, list[str]] = {}
            for prev in reversed(state.visited):
                old = state.node_to_subgraph[prev]
                if old != s_min:
                    members[old] -= params[prev]
                    members[s_min] = members.get(s_min, 0) + params[prev]
                    state.node_to_subgraph[prev] = s_min
                    moved_from.setdefault(old, []).append(prev)
                if prev == n_min:
                    break
            # reopened subgraphs lose their recorded outputs
            for sid in [sid for sid in state.subgraph_outputs if sid >= s_min]:
                del state.subgraph_outputs[sid]
            for old in [sid for sid in moved_from if sid < s_min]:
                _reexport(state, graph, old, moved_from[old], members)
            s = state.current_subgraph_id = s_min
            logger.debug("Node %s pulled subgraph back to %d via %s", node.id, s_min, n_min)

        state.node_to_subgraph[node.id] = s
        state.visited.append(node.id)
        members[s] = members.get(s, 0) + params[node.id]
        state.running_param_count = members[s]

        if state.running_param_count >= state.param_threshold:
            outs = []
            for common, remaining in state.common_remaining.items():
                if common in state.node_to_subgraph and remaining > 0:
                    outs.append(common)
            outs.append(node.id)
            state.subgraph_outputs[s] = list(dict.fromkeys(outs))
            state.current_subgraph_id = s + 1

    seq = _build_sequence(graph, state, merges)
    _check_partition(graph, seq)
    logger.info(
        "Sharded %d nodes into %d subgraphs (k=%d, %d retroactive merges)",
        len(graph.nodes), len(seq), k, merges,
    )
    return seq


def _reexport(state: ShardState, graph: ModelGraph, sid: int, moved: list[str], members: dict[int, int]) -> None:
    """
    Subgraph `sid` handed its trailing nodes to the next subgraph. Drop it if
    nothing is left, otherwise export whatever the moved nodes still read
    from it.
    """
    if not any(label == sid for label in state.node_to_subgraph.values()):
        state.subgraph_outputs.pop(sid, None)
        members.pop(sid, None)
        return

    moved_set = set(moved)

    def owned_here(name: str) -> bool:
        if not graph.is_input(name):
            return name not in moved_set
        return state.input_first_user.get(name) not in moved_set

    outs = [o for o in state.subgraph_outputs.get(sid, []) if owned_here(o)]
    for node_id in reversed(moved):
        for arg in graph.node(node_id).args:
            if owned_here(arg):
                outs.append(arg)
    state.subgraph_outputs[sid] = list(dict.fromkeys(outs))


def _build_sequence(graph: ModelGraph, state: ShardState, merges: int) -> SubgraphSequence:
    closed = state.current_subgraph_id
    last_id = max(state.node_to_subgraph.values())
    count = max(closed, last_id + 1)

    first_user_subgraph = {
        name: (state.node_to_subgraph[user] if user is not None else None)
        for name, user in state.input_first_user.items()
    }

    subgraphs = []
    for sid in range(count):
        nodes = tuple(n for n in graph.nodes if state.node_to_subgraph[n.id] == sid)
        if not nodes:
            continue
        own_inputs = [name for name in graph.inputs if first_user_subgraph[name] == sid]
        prev_outs = subgraphs[-1].outputs if subgraphs else ()
        outputs = state.subgraph_outputs.get(sid)
        if outputs is None:
            # open trailing subgraph: export its sinks
            ids = {n.id for n in nodes}
            used = {a for n in nodes for a in n.args}
            outputs = [n.id for n in nodes if n.id not in used] or [nodes[-1].id]
            outputs = [o for o in outputs if o in ids]
        subgraphs.append(Subgraph(
            index=len(subgraphs),
            nodes=nodes,
            inputs=tuple(prev_outs) + tuple(own_inputs),
            outputs=tuple(outputs),
            param_count=sum(n.param_count for n in nodes),
        ))

    # Renumbering above is a no-op unless a subgraph id was vacated; keep
    # input ownership aligned with the final indices.
    position = {}
    for sg in subgraphs:
        for n in sg.nodes:
            position[n.id] = sg.index
    owner = {
        name: (position[user] if user is not None else None)
        for name, user in state.input_first_user.items()
    }
    return SubgraphSequence(subgraphs=tuple(subgraphs), input_owner=owner, merges=merges)


def _check_partition(graph: ModelGraph, seq: SubgraphSequence) -> None:
    ids = [n.id for sg in seq for n in sg.nodes]
    if len(ids) != len(set(ids)) or set(ids) != {n.id for n in graph.nodes}:
        raise StateError("subgraph node sets do not partition the graph")


def subgraph_of(seq: SubgraphSequence) -> dict[str, int]:
    return {n.id: sg.index for sg in seq for n in sg.nodes}


def run_sequence(graph: ModelGraph, seq: SubgraphSequence) -> list[str]:
    """
    Evaluate the chain over symbolic values: each subgraph sees only its
    listed inputs. Returns the problems found (empty when executable).
    """
    problems = []
    inputs = set(graph.inputs)
    available_from_prev: set[str] = set()
    for sg in seq:
        for name in sg.inputs:
            if name not in inputs and name not in available_from_prev:
                problems.append(f"subgraph {sg.index}: input {name!r} not produced upstream")
        env = set(sg.inputs)
        for node in sg.nodes:
            for arg in node.args:
                if arg not in env:
                    problems.append(f"subgraph {sg.index}: {node.id!r} reads undefined {arg!r}")
            env.add(node.id)
        for name in sg.outputs:
            if name not in env:
                problems.append(f"subgraph {sg.index}: output {name!r} undefined")
        available_from_prev = set(sg.outputs)
    return problems


# ---------------------------------------------------------------------------
# Stage assignment
# ---------------------------------------------------------------------------

def _min_max_load(weights: np.ndarray, s: int) -> float:
    n = len(weights)
    prefix = np.concatenate(([0], np.cumsum(weights)))
    best = prefix[1:].astype(float)          # one stage covering [0, i]
    for _ in range(1, s):
        nxt = np.full(n, np.inf)
        for i in range(1, n):
            # last stage covers (t, i] for t in [0, i)
            tail = prefix[i + 1] - prefix[1:i + 1]
            nxt[i] = np.min(np.maximum(best[:i], tail))
        best = nxt
    return float(best[-1])


def _fits(weights, start: int, parts: int, limit: float) -> bool:
    remaining = len(weights) - start
    if remaining < parts:
        return False
    needed, run = 1, 0
    for w in weights[start:]:
        if w > limit:
            return False
        if run + w > limit:
            needed, run = needed + 1, w
        else:
            run += w
    return needed <= parts


def assign_stages(seq: SubgraphSequence, s: int, weights=None) -> StageAssignment:
    """
    Contiguous split of the subgraph chain into `s` stages minimizing the
    heaviest stage. `weights` overrides the per-subgraph load (param_count by
    default). Among optimal splits, earlier boundaries win.
    """
    n = len(seq)
    if s < 1 or n < s:
        raise InfeasibleError(f"cannot place {n} subgraphs on {s} stages")

    if weights is None:
        weights = [sg.param_count for sg in seq]
    w = np.asarray(weights, dtype=float)
    limit = _min_max_load(w, s)

    stage_of = {}
    start = 0
    for stage in range(s - 1):
        run = 0.0
        end = start
        while True:
            run += w[end]
            if run <= limit and _fits(w, end + 1, s - stage - 1, limit):
                break
            end += 1
        for i in range(start, end + 1):
            stage_of[i] = stage
        start = end + 1
    for i in range(start, n):
        stage_of[i] = s - 1

    params = [0] * s
    layers = [0] * s
    for sg in seq:
        params[stage_of[sg.index]] += sg.param_count
        layers[stage_of[sg.index]] += sum(1 for node in sg.nodes if node.kind == "attention-core")

    logger.debug("Stage loads: %s (limit %.1f)", params, limit)
    return StageAssignment(
        stage_of_subgraph=stage_of,
        stage_param_counts=tuple(params),
        stage_layer_counts=tuple(layers),
    )


def input_ownership(seq: SubgraphSequence, assignment: StageAssignment) -> dict[str, int]:
    """Stage that loads each graph input: the stage of its first user."""
    owner = {}
    for name, sg_index in seq.input_owner.items():
        if sg_index is None:
            warnings.warn(f"graph input {name!r} has no users; assigned to stage 0", UnusedInputWarning)
            owner[name] = 0
        else:
            owner[name] = assignment.stage_of_subgraph[sg_index]
    return owner
