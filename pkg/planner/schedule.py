"""
schedule.py — Per-stage pipeline schedules for three policies and their
analytic bubble metrics.

Policies:
    1f1b             warm-up forwards, then backward/forward pairs; every
                     backward waits for its gradient, recomputes, then runs.
    early-recompute  the recompute of the next backward is issued right after
                     the forward, so it runs while the gradient is in flight.
    scp              early recompute, plus: the last stage keeps its
                     activations (no recompute), the second to last stage
                     takes a third warm-up forward, and every other stage
                     recomputes two microbatches ahead.

Send/Recv actions are explicit, so a table can be executed by anything that
honours blocking receives.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

from planner.errors import DomainError, PolicyError, SchemaError

logger = logging.getLogger(__name__)


class Policy(str, Enum):
    ONE_F_ONE_B = "1f1b"
    EARLY_RECOMPUTE = "early-recompute"
    SHIFTED_CRITICAL_PATH = "scp"


POLICY_ALIASES = {
    "1f1b": Policy.ONE_F_ONE_B,
    "onefoneb": Policy.ONE_F_ONE_B,
    "early-recompute": Policy.EARLY_RECOMPUTE,
    "earlyrecompute": Policy.EARLY_RECOMPUTE,
    "er": Policy.EARLY_RECOMPUTE,
    "scp": Policy.SHIFTED_CRITICAL_PATH,
    "shiftedcriticalpath": Policy.SHIFTED_CRITICAL_PATH,
}


def parse_policy(name) -> Policy:
    if isinstance(name, Policy):
        return name
    key = str(name).strip().lower().replace("_", "-")
    policy = POLICY_ALIASES.get(key) or POLICY_ALIASES.get(key.replace("-", ""))
    if policy is None:
        raise PolicyError(f"unknown policy {name!r}; expected one of {[p.value for p in Policy]}")
    return policy


class ActionKind(str, Enum):
    FORWARD = "Forward"
    RECOMPUTE = "Recompute"
    BACKWARD = "Backward"
    SEND_ACT = "SendAct"
    RECV_ACT = "RecvAct"
    SEND_GRAD = "SendGrad"
    RECV_GRAD = "RecvGrad"


COMPUTE_KINDS = (ActionKind.FORWARD, ActionKind.RECOMPUTE, ActionKind.BACKWARD)
SHORT = {ActionKind.FORWARD: "F", ActionKind.RECOMPUTE: "R", ActionKind.BACKWARD: "B"}


@dataclass(frozen=True)
class PipelineConfig:
    s: int
    m: int

    def __post_init__(self):
        if self.s < 1 or self.m < 1:
            raise DomainError(f"pipeline needs s >= 1 and m >= 1, got s={self.s}, m={self.m}")


@dataclass(frozen=True)
class ScheduleAction:
    kind: ActionKind
    microbatch: int
    stage: int

    def __str__(self) -> str:
        return f"{SHORT.get(self.kind, self.kind.value)}{self.microbatch}"


@dataclass(frozen=True)
class ScheduleTable:
    policy: Policy
    cfg: PipelineConfig
    per_stage: tuple[tuple[ScheduleAction, ...], ...]

    def compute_order(self, stage: int) -> list[ScheduleAction]:
        return [a for a in self.per_stage[stage] if a.kind in COMPUTE_KINDS]


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

class _StageProgram:
    """Appends compute actions with their send/recv neighbours."""

    def __init__(self, stage: int, cfg: PipelineConfig):
        self.stage = stage
        self.cfg = cfg
        self.actions: list[ScheduleAction] = []

    def _add(self, kind: ActionKind, mb: int) -> None:
        self.actions.append(ScheduleAction(kind, mb, self.stage))

    def forward(self, mb: int) -> None:
        if self.stage > 0:
            self._add(ActionKind.RECV_ACT, mb)
        self._add(ActionKind.FORWARD, mb)
        if self.stage < self.cfg.s - 1:
            self._add(ActionKind.SEND_ACT, mb)

    def recompute(self, mb: int) -> None:
        self._add(ActionKind.RECOMPUTE, mb)

    def backward(self, mb: int, recompute_first: bool = False) -> None:
        if self.stage < self.cfg.s - 1:
            self._add(ActionKind.RECV_GRAD, mb)
        if recompute_first:
            self._add(ActionKind.RECOMPUTE, mb)
        self._add(ActionKind.BACKWARD, mb)
        if self.stage > 0:
            self._add(ActionKind.SEND_GRAD, mb)


def _one_f_one_b(prog: _StageProgram, s: int, m: int) -> None:
    warmup = min(s - prog.stage, m)
    for mb in range(warmup):
        prog.forward(mb)
    for mb in range(m):
        prog.backward(mb, recompute_first=True)
        if mb + warmup < m:
            prog.forward(mb + warmup)


def _early_recompute(prog: _StageProgram, s: int, m: int) -> None:
    warmup = min(s - prog.stage, m)
    for mb in range(warmup):
        prog.forward(mb)
    prog.recompute(0)
    for mb in range(m):
        prog.backward(mb)
        if mb + warmup < m:
            prog.forward(mb + warmup)
        if mb + 1 < m:
            prog.recompute(mb + 1)


def _scp_last(prog: _StageProgram, s: int, m: int) -> None:
    for mb in range(m):
        prog.forward(mb)
        prog.backward(mb)


def _scp_second_to_last(prog: _StageProgram, s: int, m: int) -> None:
    # one extra warm-up forward fills the slot the last stage no longer
    # spends on recomputation
    for mb in range(min(3, m)):
        prog.forward(mb)
    prog.recompute(0)
    if m > 1:
        prog.recompute(1)
    prog.backward(0)
    if m > 2:
        prog.recompute(2)
    if m > 1:
        prog.backward(1)
    for mb in range(2, m):
        if mb + 1 < m:
            prog.forward(mb + 1)
            prog.recompute(mb + 1)
        prog.backward(mb)


def _scp_leading(prog: _StageProgram, s: int, m: int) -> None:
    warmup = min(s - prog.stage, m)
    for mb in range(warmup):
        prog.forward(mb)
    prog.recompute(0)
    if m > 1:
        prog.recompute(1)
    for mb in range(m):
        prog.backward(mb)
        if mb + warmup < m:
            prog.forward(mb + warmup)
        if mb + 2 < m:
            prog.recompute(mb + 2)


def build_schedule(policy, cfg: PipelineConfig) -> ScheduleTable:
    policy = parse_policy(policy)
    s, m = cfg.s, cfg.m
    if policy is Policy.SHIFTED_CRITICAL_PATH and s < 2:
        raise PolicyError("the shifted critical path schedule needs at least two stages")

    per_stage = []
    for stage in range(s):
        prog = _StageProgram(stage, cfg)
        if policy is Policy.ONE_F_ONE_B:
            _one_f_one_b(prog, s, m)
        elif policy is Policy.EARLY_RECOMPUTE:
            _early_recompute(prog, s, m)
        elif stage == s - 1:
            _scp_last(prog, s, m)
        elif stage == s - 2:
            _scp_second_to_last(prog, s, m)
        else:
            _scp_leading(prog, s, m)
        per_stage.append(tuple(prog.actions))

    logger.debug("Built %s schedule for s=%d, m=%d", policy.value, s, m)
    return ScheduleTable(policy=policy, cfg=cfg, per_stage=tuple(per_stage))


# ---------------------------------------------------------------------------
# Analytic metrics (in units of one forward time)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BubbleMetrics:
    bubble_time_units: int
    run_time_units: int

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.bubble_time_units, self.run_time_units)

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.bubble_time_units, self.bubble_time_units + self.run_time_units)

    def to_dict(self) -> dict:
        return {
            "bubble_time_units": self.bubble_time_units,
            "run_time_units": self.run_time_units,
            "ratio": float(self.ratio),
            "fraction": float(self.fraction),
        }


def bubble_metrics(policy, cfg: PipelineConfig) -> BubbleMetrics:
    """
    Bubble per policy: (s-1)(F+R+B) = 4(s-1) for 1f1b, 3(s-1) once recompute
    leaves the critical path, 3(s-2) when the critical path shifts to the
    second to last stage. Run time counts F+R+B = 4 units per microbatch,
    including the last stage under scp even though it skips recompute.
    """
    policy = parse_policy(policy)
    s, m = cfg.s, cfg.m
    if policy is Policy.ONE_F_ONE_B:
        bubble = 4 * (s - 1)
    elif policy is Policy.EARLY_RECOMPUTE:
        bubble = 3 * (s - 1)
    else:
        if s < 2:
            raise PolicyError("the shifted critical path schedule needs at least two stages")
        bubble = 3 * (s - 2)
    return BubbleMetrics(bubble_time_units=bubble, run_time_units=4 * m)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def activation_bound(policy: Policy, cfg: PipelineConfig, stage: int) -> int:
    bound = min(cfg.s - stage, cfg.m)
    if policy is Policy.SHIFTED_CRITICAL_PATH and stage == cfg.s - 2:
        bound += 1
    return bound


def _first_ordering_problem(actions, stage: int, mb: int, cfg: PipelineConfig, policy: Policy) -> str | None:
    pos: dict[ActionKind, list[int]] = {}
    for i, a in enumerate(actions):
        if a.microbatch == mb:
            pos.setdefault(a.kind, []).append(i)

    def one(kind):
        found = pos.get(kind, [])
        return found[0] if len(found) == 1 else None

    f, b = one(ActionKind.FORWARD), one(ActionKind.BACKWARD)
    if f is None:
        return f"stage {stage}: Forward({mb}) must appear exactly once"
    if b is None:
        return f"stage {stage}: Backward({mb}) must appear exactly once"
    if b < f:
        return f"stage {stage}: Backward({mb}) precedes Forward({mb})"
    if stage > 0:
        recv = one(ActionKind.RECV_ACT)
        if recv is None or recv > f:
            return f"stage {stage}: Forward({mb}) lacks a preceding RecvAct({mb})"
    if stage < cfg.s - 1:
        send = one(ActionKind.SEND_ACT)
        if send is None or send < f:
            return f"stage {stage}: Forward({mb}) lacks a following SendAct({mb})"
        recv = one(ActionKind.RECV_GRAD)
        if recv is None or recv > b:
            return f"stage {stage}: Backward({mb}) lacks a preceding RecvGrad({mb})"
    if stage > 0:
        send = one(ActionKind.SEND_GRAD)
        if send is None or send < b:
            return f"stage {stage}: Backward({mb}) lacks a following SendGrad({mb})"

    recomputes = pos.get(ActionKind.RECOMPUTE, [])
    if len(recomputes) > 1:
        return f"stage {stage}: Recompute({mb}) appears {len(recomputes)} times"
    if recomputes:
        r = recomputes[0]
        if not f < r < b:
            return f"stage {stage}: Recompute({mb}) must fall between Forward({mb}) and Backward({mb})"
        if policy is Policy.ONE_F_ONE_B:
            between = [a for a in actions[r + 1:b] if a.kind in COMPUTE_KINDS]
            if between:
                return f"stage {stage}: Backward({mb}) must immediately follow Recompute({mb})"
    return None


def _executable(table: ScheduleTable) -> list[str]:
    """Run every stage left to right with blocking receives, no timing."""
    s = table.cfg.s
    pointers = [0] * s
    done: set[tuple[int, ActionKind, int]] = set()
    progressed = True
    while progressed:
        progressed = False
        for stage in range(s):
            actions = table.per_stage[stage]
            while pointers[stage] < len(actions):
                a = actions[pointers[stage]]
                if a.kind is ActionKind.RECV_ACT and (stage - 1, ActionKind.SEND_ACT, a.microbatch) not in done:
                    break
                if a.kind is ActionKind.RECV_GRAD and (stage + 1, ActionKind.SEND_GRAD, a.microbatch) not in done:
                    break
                done.add((stage, a.kind, a.microbatch))
                pointers[stage] += 1
                progressed = True

    stuck = [
        f"stage {stage}: blocked at {table.per_stage[stage][pointers[stage]]}"
        for stage in range(s)
        if pointers[stage] < len(table.per_stage[stage])
    ]
    return [f"schedule cannot run to completion; {'; '.join(stuck)}"] if stuck else []


def validate_schedule(table: ScheduleTable, cfg: PipelineConfig | None = None) -> list[str]:
    cfg = cfg or table.cfg
    violations = []

    if len(table.per_stage) != cfg.s:
        return [f"table has {len(table.per_stage)} stages, expected {cfg.s}"]

    for stage, actions in enumerate(table.per_stage):
        for a in actions:
            if a.stage != stage or not 0 <= a.microbatch < cfg.m:
                violations.append(f"stage {stage}: misplaced action {a.kind.value}({a.microbatch})")
        for mb in range(cfg.m):
            problem = _first_ordering_problem(actions, stage, mb, cfg, table.policy)
            if problem:
                violations.append(problem)

        if table.policy is Policy.SHIFTED_CRITICAL_PATH and stage == cfg.s - 1:
            for a in actions:
                if a.kind is ActionKind.RECOMPUTE:
                    violations.append(f"stage {stage}: last stage must not recompute (Recompute({a.microbatch}))")

        bound = activation_bound(table.policy, cfg, stage)
        stashed = peak = 0
        for a in actions:
            if a.kind is ActionKind.FORWARD:
                stashed += 1
                peak = max(peak, stashed)
            elif a.kind is ActionKind.BACKWARD:
                stashed -= 1
        if peak > bound:
            violations.append(f"stage {stage}: stashes {peak} activations, bound is {bound}")

    if not violations:
        violations.extend(_executable(table))
    return violations


# ---------------------------------------------------------------------------
# Serialization and rendering
# ---------------------------------------------------------------------------

def table_to_dict(table: ScheduleTable) -> dict:
    return {
        "policy": table.policy.value,
        "stages": table.cfg.s,
        "microbatches": table.cfg.m,
        "per_stage": [
            [{"kind": a.kind.value, "microbatch": a.microbatch, "stage": a.stage} for a in actions]
            for actions in table.per_stage
        ],
    }


def table_from_dict(document: dict) -> ScheduleTable:
    try:
        cfg = PipelineConfig(document["stages"], document["microbatches"])
        per_stage = tuple(
            tuple(ScheduleAction(ActionKind(a["kind"]), a["microbatch"], a["stage"]) for a in actions)
            for actions in document["per_stage"]
        )
        return ScheduleTable(policy=parse_policy(document["policy"]), cfg=cfg, per_stage=per_stage)
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"malformed schedule document: {e}") from e


def table_to_json(table: ScheduleTable) -> str:
    return json.dumps(table_to_dict(table), indent=2)


def render_ascii(table: ScheduleTable) -> str:
    """Compute order per stage, one row each (no timing)."""
    width = len(str(table.cfg.m - 1)) + 1
    lines = [f"{table.policy.value}  s={table.cfg.s} m={table.cfg.m}"]
    for stage in range(table.cfg.s):
        cells = " ".join(str(a).ljust(width) for a in table.compute_order(stage))
        lines.append(f"stage {stage:>2} | {cells}")
    return "\n".join(lines)
