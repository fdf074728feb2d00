"""
tmp.py — Tensor-model-parallel cost model.

Default TMP runs each layer's compute and its AllReduces back to back.
Sub-pipelined TMP splits a microbatch into two halves so one half's
AllReduce overlaps the other half's compute. Each layer is two equal halves
(attention block, FFN block); T_a covers both of a layer's AllReduces, so one
block's AllReduce for one sub-microbatch costs T_a/4.
"""

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from config.settings import SMALL_BATCH_PENALTY, SUB_MICROBATCHES, TRACE_US_PER_UNIT
from planner.errors import DomainError, IndivisibleError
from planner.graph_core import OpNode
from planner.recompute import exact

logger = logging.getLogger(__name__)

QUARTER = Fraction(1, 4)


@dataclass(frozen=True)
class TmpConfig:
    K: int
    T_m: Fraction
    T_a: Fraction
    tmp_degree: int = 2

    def __post_init__(self):
        object.__setattr__(self, "T_m", exact(self.T_m))
        object.__setattr__(self, "T_a", exact(self.T_a))
        if self.K < 1:
            raise DomainError("K must be at least 1")
        if self.T_m <= 0 or self.T_a < 0:
            raise DomainError("need T_m > 0 and T_a >= 0")
        if self.tmp_degree < 1:
            raise DomainError("tmp_degree must be positive")

    def with_penalty(self, sub_microbatch_size: int, table=None) -> "TmpConfig":
        """T_m scaled by the small-batch efficiency loss of the given sub-microbatch size."""
        table = SMALL_BATCH_PENALTY if table is None else table
        factor = exact(table.get(sub_microbatch_size, 1))
        return TmpConfig(self.K, self.T_m * factor, self.T_a, self.tmp_degree)


@dataclass(frozen=True)
class TmpCost:
    fwd: Fraction
    bwd: Fraction
    total: Fraction

    def to_dict(self) -> dict:
        return {"fwd": float(self.fwd), "bwd": float(self.bwd), "total": float(self.total)}


def default_tmp_cost(cfg: TmpConfig) -> TmpCost:
    K, T_m, T_a = cfg.K, cfg.T_m, cfg.T_a
    return TmpCost(
        fwd=K * (T_m + T_a),
        bwd=K * (2 * T_m + T_a),
        total=K * (3 * T_m + 2 * T_a),
    )


def subpipelined_tmp_cost(cfg: TmpConfig) -> TmpCost:
    K, T_m, T_a = cfg.K, cfg.T_m, cfg.T_a
    lead = K - QUARTER
    return TmpCost(
        fwd=T_m / 4 + lead * max(T_m, T_a) + T_a / 4,
        bwd=T_m / 2 + lead * max(2 * T_m, T_a) + T_a / 4,
        total=3 * T_m / 4 + T_a / 2 + lead * max(3 * T_m, 2 * T_m + T_a, 2 * T_a),
    )


def speedup(cfg: TmpConfig) -> float:
    return float(default_tmp_cost(cfg).total / subpipelined_tmp_cost(cfg).total)


def speedup_ceiling(T_m, T_a) -> float:
    """Limit of default/sub-pipelined total as K grows."""
    T_m, T_a = exact(T_m), exact(T_a)
    return float((3 * T_m + 2 * T_a) / max(3 * T_m, 2 * T_m + T_a, 2 * T_a))


# ---------------------------------------------------------------------------
# Two-stream micro-simulator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StreamEvent:
    stream: str          # "compute" or "comm"
    sub_microbatch: int
    half: int            # 0..2K-1, attention and FFN halves alternate
    start: Fraction
    end: Fraction


@dataclass
class SubpipelineTrace:
    direction: str
    makespan: Fraction
    events: list[StreamEvent] = field(default_factory=list)

    def stream(self, name: str) -> list[StreamEvent]:
        return [e for e in self.events if e.stream == name]


def simulate_subpipeline(cfg: TmpConfig, direction: str = "fwd") -> SubpipelineTrace:
    """
    Both streams are sequential. Compute runs A0 B0 A1 B1 ... over the 2K
    halves (A, B the two sub-microbatches); each half's AllReduce follows its
    compute, and the sub-microbatch's next half waits for that AllReduce.
    """
    if direction not in ("fwd", "bwd"):
        raise DomainError(f"direction must be fwd or bwd, got {direction!r}")

    per_half = cfg.T_m / 4 if direction == "fwd" else cfg.T_m / 2
    comm_cost = cfg.T_a / 4
    halves = 2 * cfg.K

    compute_free = Fraction(0)
    comm_free = Fraction(0)
    comm_done = {x: Fraction(0) for x in range(SUB_MICROBATCHES)}
    events = []

    for half in range(halves):
        for x in range(SUB_MICROBATCHES):
            start = max(compute_free, comm_done[x])
            end = start + per_half
            events.append(StreamEvent("compute", x, half, start, end))
            compute_free = end

            if comm_cost > 0:
                c_start = max(comm_free, end)
                c_end = c_start + comm_cost
                events.append(StreamEvent("comm", x, half, c_start, c_end))
                comm_free = comm_done[x] = c_end
            else:
                comm_done[x] = end

    makespan = max(e.end for e in events)
    return SubpipelineTrace(direction=direction, makespan=makespan, events=events)


def audit_trace(trace: SubpipelineTrace) -> list[str]:
    """Stream overlaps and broken compute/comm ordering found in a trace."""
    problems = []
    for name in ("compute", "comm"):
        events = sorted(trace.stream(name), key=lambda e: e.start)
        for a, b in zip(events, events[1:]):
            if b.start < a.end:
                problems.append(f"{name} stream overlap at {float(b.start)}")
    compute = {(e.sub_microbatch, e.half): e for e in trace.stream("compute")}
    for e in trace.stream("comm"):
        if e.start < compute[(e.sub_microbatch, e.half)].end:
            problems.append(f"comm of half {e.half} starts before its compute ends")
        nxt = compute.get((e.sub_microbatch, e.half + 1))
        if nxt is not None and nxt.start < e.end:
            problems.append(f"compute of half {e.half + 1} starts before the previous AllReduce ends")
    return problems


def subpipeline_trace_document(traces, us_per_unit=TRACE_US_PER_UNIT) -> dict:
    """Chrome trace events, one process per direction with a compute and a comm thread."""
    trace_events = []
    for pid, trace in enumerate(traces):
        trace_events.append({"name": "process_name", "ph": "M", "pid": pid, "args": {"name": trace.direction}})
        for e in trace.events:
            trace_events.append({
                "name": f"{chr(ord('A') + e.sub_microbatch)}{e.half}",
                "cat": e.stream,
                "ph": "X",
                "pid": pid,
                "tid": e.stream,
                "ts": float(e.start * us_per_unit),
                "dur": float((e.end - e.start) * us_per_unit),
                "args": {"sub_microbatch": e.sub_microbatch, "half": e.half},
            })
    return {"traceEvents": trace_events, "displayTimeUnit": "ms"}


def export_subpipeline_trace(traces, path, us_per_unit=TRACE_US_PER_UNIT) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(subpipeline_trace_document(traces, us_per_unit)), encoding="utf-8")
    except OSError:
        logger.exception("Failed to write sub-pipeline trace to %s", path)
        raise
    logger.info("Wrote %d-direction sub-pipeline trace to %s", len(traces), path)
    return path


# ---------------------------------------------------------------------------
# Gemm partitioning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GemmPartition:
    node_id: str
    tmp_degree: int
    per_rank_params: int
    per_rank_out_units: int
    forward_allreduces: int
    backward_allreduces: int


def split_gemm(node: OpNode, tmp_degree: int) -> GemmPartition:
    """
    Megatron split: a column-parallel gemm shards its output features and
    needs an AllReduce of the input gradient in backward; a row-parallel gemm
    shards its input features and AllReduces its output in forward.
    """
    if tmp_degree < 1:
        raise DomainError("tmp_degree must be positive")
    if tmp_degree == 1:
        return GemmPartition(node.id, 1, node.param_count, node.out_units, 0, 0)
    if node.tmp_attr is None:
        raise DomainError(f"node {node.id!r} has no TMP attribute")
    if node.param_count % tmp_degree or node.out_units % tmp_degree:
        raise IndivisibleError(f"node {node.id!r} cannot be split {tmp_degree} ways")

    if node.tmp_attr == "row":
        fwd, bwd, out_units = 1, 0, node.out_units
    else:
        fwd, bwd, out_units = 0, 1, node.out_units // tmp_degree
    return GemmPartition(
        node_id=node.id,
        tmp_degree=tmp_degree,
        per_rank_params=node.param_count // tmp_degree,
        per_rank_out_units=out_units,
        forward_allreduces=fwd,
        backward_allreduces=bwd,
    )


def split_graph_nodes(nodes, tmp_degree: int) -> list[GemmPartition]:
    return [split_gemm(n, tmp_degree) for n in nodes if n.tmp_attr is not None]
