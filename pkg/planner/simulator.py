"""
simulator.py — Deterministic event simulation of one training iteration.

Every stage owns a compute stream and a comm stream, both FIFO. A stage runs
its action list left to right: compute actions occupy the compute stream,
sends are queued on the sender's comm stream without blocking, and a receive
blocks the stage until the matching send has finished. The iteration closes
with one DP gradient AllReduce per stage. Time is kept as exact fractions.
"""

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import networkx as nx

from config.settings import BOUNDARY_FRACTION, TRACE_US_PER_UNIT
from planner.errors import CapacityError, DeadlockError, DomainError, PolicyError
from planner.recompute import MemoryModel, RecomputePlan, exact
from planner.schedule import (
    ActionKind,
    PipelineConfig,
    Policy,
    ScheduleTable,
    build_schedule,
    parse_policy,
)
from planner.tmp import TmpConfig, default_tmp_cost, subpipelined_tmp_cost

logger = logging.getLogger(__name__)

COMPUTE = "compute"
COMM = "comm"


def ring_allreduce_time(nbytes, degree: int, bandwidth) -> Fraction:
    """2(d-1)/d * bytes / bandwidth; free with one replica or unknown bandwidth."""
    if degree <= 1 or not bandwidth:
        return Fraction(0)
    return Fraction(2 * (degree - 1), degree) * exact(nbytes) / exact(bandwidth)


@dataclass(frozen=True)
class CostModel:
    forward_per_mb: tuple
    backward_multiplier: Fraction = Fraction(2)
    recompute_multiplier: Fraction = Fraction(1)
    p2p_per_activation: Fraction = Fraction(0)
    dp_allreduce: tuple = ()
    head_extra: Fraction = Fraction(0)
    # transformer blocks (attention + FFN) and layers per stage, when known
    blocks_per_stage: tuple | None = None
    layers_per_stage: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "forward_per_mb", tuple(exact(t) for t in self.forward_per_mb))
        object.__setattr__(self, "dp_allreduce", tuple(exact(t) for t in self.dp_allreduce))
        for name in ("backward_multiplier", "recompute_multiplier", "p2p_per_activation", "head_extra"):
            object.__setattr__(self, name, exact(getattr(self, name)))
        times = (*self.forward_per_mb, *self.dp_allreduce, self.backward_multiplier,
                 self.recompute_multiplier, self.p2p_per_activation, self.head_extra)
        if any(t < 0 for t in times):
            raise DomainError("cost model times must be nonnegative")

    @property
    def stages(self) -> int:
        return len(self.forward_per_mb)

    @classmethod
    def uniform(cls, s: int, T_m=1, **overrides) -> "CostModel":
        """Forward T_m, recompute T_m, backward 2*T_m and free communication."""
        return cls(forward_per_mb=tuple([exact(T_m)] * s), **overrides)

    def allreduce(self, stage: int) -> Fraction:
        return self.dp_allreduce[stage] if self.dp_allreduce else Fraction(0)


@dataclass(frozen=True)
class SimEvent:
    stage: int
    stream: str
    kind: str
    microbatch: int
    start: Fraction
    end: Fraction


@dataclass(frozen=True)
class StageStats:
    busy: Fraction
    idle: Fraction
    window_start: Fraction
    window_end: Fraction
    peak_memory_bytes: float

    @property
    def window_idle(self) -> Fraction:
        return (self.window_end - self.window_start) - self.busy


@dataclass
class SimResult:
    policy: Policy
    makespan: Fraction
    per_stage: list[StageStats]
    critical_stage: int
    bubble_fraction: Fraction
    events: list[SimEvent] = field(default_factory=list)

    def count(self, stage: int, kind: str) -> int:
        return sum(1 for e in self.events if e.stage == stage and e.kind == kind)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.value,
            "makespan": float(self.makespan),
            "critical_stage": self.critical_stage,
            "bubble_fraction": float(self.bubble_fraction),
            "per_stage": [
                {
                    "stage": j,
                    "busy": float(st.busy),
                    "idle": float(st.idle),
                    "peak_memory_bytes": st.peak_memory_bytes,
                }
                for j, st in enumerate(self.per_stage)
            ],
        }


# ---------------------------------------------------------------------------
# Durations and memory
# ---------------------------------------------------------------------------

class _StageCosts:
    def __init__(self, stage: int, s: int, costs: CostModel, alpha, tmp_cfg, subpipelined: bool):
        self.stage = stage
        base = costs.forward_per_mb[stage]
        blocks = costs.blocks_per_stage[stage] if costs.blocks_per_stage else None

        alpha = exact(alpha)
        if blocks:
            # whole blocks only; the remainder is recomputed
            self.kept_fraction = Fraction(int(alpha * blocks), blocks)
        else:
            self.kept_fraction = alpha

        forward, backward = base, costs.backward_multiplier * base
        if tmp_cfg is not None:
            layers = costs.layers_per_stage[stage] if costs.layers_per_stage else tmp_cfg.K
            if layers:
                per_layer = TmpConfig(layers, base / layers, tmp_cfg.T_a, tmp_cfg.tmp_degree)
                cost = subpipelined_tmp_cost(per_layer) if subpipelined else default_tmp_cost(per_layer)
                forward, backward = cost.fwd, cost.bwd

        self.forward = forward + (costs.head_extra if stage == s - 1 else 0)
        self.recompute = costs.recompute_multiplier * forward * (1 - self.kept_fraction)
        self.backward = backward

    def duration(self, kind: ActionKind) -> Fraction:
        if kind is ActionKind.FORWARD:
            return self.forward
        if kind is ActionKind.RECOMPUTE:
            return self.recompute
        return self.backward


class _MemoryTracker:
    """
    Forward keeps the full activation of kept blocks and the input boundary of
    recomputed ones; recompute restores the rest; backward frees the microbatch.
    """

    def __init__(self, baseline, activation, kept_fraction: Fraction):
        self.current = exact(baseline)
        self.peak = self.current
        act = exact(activation)
        boundary = exact(BOUNDARY_FRACTION)
        self.on_forward = act * (kept_fraction + (1 - kept_fraction) * boundary)
        self.on_recompute = act * (1 - kept_fraction) * (1 - boundary)
        self.held: dict[int, Fraction] = {}

    def apply(self, kind: ActionKind, mb: int) -> None:
        if kind is ActionKind.FORWARD:
            delta = self.on_forward
        elif kind is ActionKind.RECOMPUTE:
            delta = self.on_recompute
        elif kind is ActionKind.BACKWARD:
            self.current -= self.held.pop(mb, Fraction(0))
            return
        else:
            return
        self.held[mb] = self.held.get(mb, Fraction(0)) + delta
        self.current += delta
        self.peak = max(self.peak, self.current)


def _memory_inputs(memory: MemoryModel | None, s: int):
    if memory is None:
        return [0] * s, [0] * s
    if memory.per_stage_runtime and len(memory.per_stage_runtime) == s:
        activation = list(memory.per_stage_activation)
        baseline = [r - a for r, a in zip(memory.per_stage_runtime, activation)]
        return baseline, activation
    return [memory.M_r - memory.M_a] * s, [memory.M_a] * s


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

def _default_recompute(policy: Policy, s: int) -> RecomputePlan:
    if policy is Policy.SHIFTED_CRITICAL_PATH:
        return RecomputePlan.last_stage_kept(s)
    return RecomputePlan.recompute_all(s)


def _wait_target(stage: int, kind: ActionKind) -> int:
    return stage - 1 if kind is ActionKind.RECV_ACT else stage + 1


def run(
    plan,
    table: ScheduleTable,
    costs: CostModel,
    recompute: RecomputePlan | None = None,
    tmp_cfg: TmpConfig | None = None,
    memory: MemoryModel | None = None,
    subpipelined: bool = True,
) -> SimResult:
    s, m = table.cfg.s, table.cfg.m
    if plan is not None and getattr(plan, "pmp", s) != s:
        raise DomainError(f"plan has {plan.pmp} pipeline stages but the table has {s}")
    if costs.stages != s:
        raise DomainError(f"cost model covers {costs.stages} stages, table has {s}")

    recompute = recompute or _default_recompute(table.policy, s)
    if recompute.stages != s:
        raise DomainError(f"recompute plan covers {recompute.stages} stages, table has {s}")
    if any(not 0 <= exact(a) <= 1 for a in recompute.alphas):
        raise DomainError(f"recompute ratios must lie in [0, 1], got {list(recompute.alphas)}")
    # 1F1B and early recompute give every stage a recompute slot per
    # microbatch, so any ratio runs there. A stage without one (the last
    # stage of the shifted critical path) has nothing to rebuild from.
    for j, actions in enumerate(table.per_stage):
        if exact(recompute.alphas[j]) != 1 and not any(a.kind is ActionKind.RECOMPUTE for a in actions):
            raise PolicyError(
                f"stage {j} of the {table.policy.value} schedule has no recompute slot"
                " and must keep all activations (alpha = 1)"
            )

    stage_costs = [_StageCosts(j, s, costs, recompute.alphas[j], tmp_cfg, subpipelined) for j in range(s)]
    baseline, activation = _memory_inputs(memory, s)
    trackers = [_MemoryTracker(baseline[j], activation[j], stage_costs[j].kept_fraction) for j in range(s)]

    pointer = [0] * s
    clock = [Fraction(0)] * s
    compute_free = [Fraction(0)] * s
    comm_free = [Fraction(0)] * s
    sent: dict[tuple[int, ActionKind, int], Fraction] = {}
    events: list[SimEvent] = []

    progressed = True
    while progressed:
        progressed = False
        for j in range(s):
            actions = table.per_stage[j]
            while pointer[j] < len(actions):
                a = actions[pointer[j]]
                if a.kind in (ActionKind.RECV_ACT, ActionKind.RECV_GRAD):
                    send_kind = ActionKind.SEND_ACT if a.kind is ActionKind.RECV_ACT else ActionKind.SEND_GRAD
                    arrival = sent.get((_wait_target(j, a.kind), send_kind, a.microbatch))
                    if arrival is None:
                        break
                    clock[j] = max(clock[j], arrival)
                elif a.kind in (ActionKind.SEND_ACT, ActionKind.SEND_GRAD):
                    start = max(comm_free[j], clock[j])
                    end = start + costs.p2p_per_activation
                    if end > start:
                        events.append(SimEvent(j, COMM, a.kind.value, a.microbatch, start, end))
                    comm_free[j] = end
                    sent[(j, a.kind, a.microbatch)] = end
                else:
                    start = max(clock[j], compute_free[j])
                    end = start + stage_costs[j].duration(a.kind)
                    events.append(SimEvent(j, COMPUTE, a.kind.value, a.microbatch, start, end))
                    compute_free[j] = clock[j] = end
                    trackers[j].apply(a.kind, a.microbatch)
                pointer[j] += 1
                progressed = True

    blocked = [j for j in range(s) if pointer[j] < len(table.per_stage[j])]
    if blocked:
        waits = nx.DiGraph()
        for j in blocked:
            a = table.per_stage[j][pointer[j]]
            waits.add_edge(j, _wait_target(j, a.kind), action=f"{a.kind.value}({a.microbatch})")
        try:
            cycle = [edge[:2] for edge in nx.find_cycle(waits)]
        except nx.NetworkXNoCycle:
            cycle = []
        detail = ", ".join(f"stage {j} at {waits.edges[j, t]['action']}" for j, t in waits.edges)
        logger.error("Simulation deadlocked: %s", detail)
        raise DeadlockError(f"schedule deadlocks: {detail}", cycle)

    for j in range(s):
        duration = costs.allreduce(j)
        if duration > 0:
            start = max(comm_free[j], compute_free[j])
            events.append(SimEvent(j, COMM, "AllReduce", -1, start, start + duration))
            comm_free[j] = start + duration

    return _summarize(table, events, trackers, memory)


def _summarize(table: ScheduleTable, events, trackers, memory) -> SimResult:
    s = table.cfg.s
    makespan = max((e.end for e in events), default=Fraction(0))

    per_stage = []
    for j in range(s):
        compute = [e for e in events if e.stage == j and e.stream == COMPUTE]
        busy = sum((e.end - e.start for e in compute), Fraction(0))
        window_start = min((e.start for e in compute), default=Fraction(0))
        window_end = max((e.end for e in compute), default=Fraction(0))
        per_stage.append(StageStats(
            busy=busy,
            idle=makespan - busy,
            window_start=window_start,
            window_end=window_end,
            peak_memory_bytes=float(trackers[j].peak),
        ))

    # least idle inside its own busy window; ties go to the later stage
    critical = min(range(s), key=lambda j: (per_stage[j].window_idle, -j))
    bubble = (makespan - per_stage[critical].busy) / makespan if makespan else Fraction(0)

    if memory is not None and memory.capacity is not None:
        over = [j for j in range(s) if per_stage[j].peak_memory_bytes > memory.capacity]
        if over:
            raise CapacityError(
                f"stages {over} exceed capacity {memory.capacity} "
                f"(peak {max(per_stage[j].peak_memory_bytes for j in over):.0f})"
            )

    events.sort(key=lambda e: (e.start, e.stage, e.stream, e.end))
    return SimResult(
        policy=table.policy,
        makespan=makespan,
        per_stage=per_stage,
        critical_stage=critical,
        bubble_fraction=bubble,
        events=events,
    )


def simulate_policy(policy, cfg: PipelineConfig, costs: CostModel | None = None, **kwargs) -> SimResult:
    """Build the policy's table and run it; uniform costs unless given."""
    table = build_schedule(policy, cfg)
    return run(None, table, costs or CostModel.uniform(cfg.s), **kwargs)


def compare_policies(plan, costs: CostModel, policies, m: int | None = None, **kwargs) -> list[dict]:
    """Makespan of each policy under identical costs, relative to the first."""
    s = costs.stages
    m = m or plan.num_microbatches
    rows = []
    for policy in policies:
        policy = parse_policy(policy)
        result = simulate_policy(policy, PipelineConfig(s, m), costs, **kwargs)
        rows.append({
            "policy": policy.value,
            "makespan": result.makespan,
            "bubble_fraction": result.bubble_fraction,
            "critical_stage": result.critical_stage,
        })
    baseline = rows[0]["makespan"] if rows else None
    for row in rows:
        row["ratio"] = row["makespan"] / baseline if baseline else Fraction(0)
    return rows


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def trace_document(result: SimResult, us_per_unit=TRACE_US_PER_UNIT) -> dict:
    trace_events = []
    for stage in sorted({e.stage for e in result.events}):
        trace_events.append({"name": "process_name", "ph": "M", "pid": stage, "args": {"name": f"stage {stage}"}})
    for e in result.events:
        trace_events.append({
            "name": f"{e.kind}{e.microbatch}" if e.microbatch >= 0 else e.kind,
            "cat": e.kind,
            "ph": "X",
            "pid": e.stage,
            "tid": e.stream,
            "ts": float(e.start * us_per_unit),
            "dur": float((e.end - e.start) * us_per_unit),
            "args": {"microbatch": e.microbatch},
        })
    return {"traceEvents": trace_events, "displayTimeUnit": "ms"}


def export_trace(result: SimResult, path, us_per_unit=TRACE_US_PER_UNIT) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(trace_document(result, us_per_unit)), encoding="utf-8")
    except OSError:
        logger.exception("Failed to write trace to %s", path)
        raise
    logger.info("Wrote %d trace events to %s", len(result.events), path)
    return path


def render_timeline(result: SimResult) -> str:
    """One character column per time unit; F/R/B cells carry the microbatch id."""
    s = len(result.per_stage)
    width = int(-(-result.makespan // 1))
    rows = []
    for j in range(s):
        cells = ["."] * width
        for e in result.events:
            if e.stage != j or e.stream != COMPUTE or e.end == e.start:
                continue
            mark = f"{e.kind[0]}{e.microbatch % 10}"
            for t in range(int(e.start), int(-(-e.end // 1))):
                cells[t] = mark[0] if t == int(e.start) else mark[1]
        rows.append(f"stage {j:>2} |{''.join(cells)}|")
    rows.append(f"makespan {float(result.makespan):g}, critical stage {result.critical_stage}")
    return "\n".join(rows)
