"""
recompute.py — Stage-aware recomputation.

Stage i (1-based here, 0-based everywhere else) stashes up to s-i microbatch
activations under 1F1B-style schedules. Keeping a fraction alpha_i of them
instead of recomputing costs (s-i)*alpha_i*M_a extra bytes on top of the
runtime memory M_r, so choosing

    alpha_i = min(1, (s-1)*alpha_1 / (s-i))        for 2 <= i < s-1
    alpha_{s-1} = alpha_{s-2},  alpha_s = 1

gives every uncapped stage the same footprint M_r + (s-1)*alpha_1*M_a.
alpha_1 itself is the largest grid value whose plan fits the device.
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

from config.settings import ACTIVATION_CONSTANT, BUFFER_BYTES, BYTES_PER_PARAM, RECOMPUTE_STEP
from planner.errors import DomainError, InfeasibleError
from planner.sharder import StageAssignment

logger = logging.getLogger(__name__)


def exact(x) -> Fraction:
    """Fraction from int/Fraction as is, from float via its shortest repr."""
    if isinstance(x, (int, Fraction)):
        return Fraction(x)
    return Fraction(str(x))


@dataclass(frozen=True)
class MemoryModel:
    M_r: float
    M_a: float
    capacity: float | None = None
    bytes_per_param: int = BYTES_PER_PARAM
    per_stage_runtime: tuple = field(default=(), compare=False)
    per_stage_activation: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.M_a < 0:
            raise DomainError("M_a must be nonnegative")
        if self.M_r < self.M_a:
            raise DomainError("M_r includes one microbatch activation, so M_r >= M_a")


@dataclass(frozen=True)
class RecomputePlan:
    alphas: tuple[float, ...]
    per_stage_memory: tuple[float, ...] = ()

    @property
    def stages(self) -> int:
        return len(self.alphas)

    def kept_blocks(self, stage: int, blocks: int) -> int:
        """Whole blocks on 0-based `stage` that skip recomputation."""
        return math.floor(exact(self.alphas[stage]) * blocks)

    @classmethod
    def recompute_all(cls, s: int) -> "RecomputePlan":
        return cls(alphas=tuple([0.0] * s))

    @classmethod
    def last_stage_kept(cls, s: int) -> "RecomputePlan":
        return cls(alphas=tuple([0.0] * (s - 1) + [1.0]))


def alpha_schedule(alpha_1, s: int, exact_values: bool = False) -> list:
    a1 = exact(alpha_1)
    if not 0 <= a1 <= 1:
        raise DomainError(f"alpha_1 must lie in [0, 1], got {alpha_1}")
    if s < 1:
        raise DomainError("need at least one stage")
    if s == 1:
        alphas = [Fraction(1)]
    else:
        alphas = [a1]
        for i in range(2, s - 1):
            alphas.append(min(Fraction(1), (s - 1) * a1 / (s - i)))
        if s >= 3:
            alphas.append(alphas[-1])
        alphas.append(Fraction(1))
    return alphas if exact_values else [float(a) for a in alphas]


def stage_memory(i: int, alphas, model: MemoryModel, s: int):
    """Peak bytes of 1-based stage i: M_r + (s-i)*alpha_i*M_a."""
    if not 1 <= i <= s:
        raise DomainError(f"stage index {i} outside [1, {s}]")
    return exact(model.M_r) + (s - i) * exact(alphas[i - 1]) * exact(model.M_a)


def plan_memory(alphas, model: MemoryModel) -> list[float]:
    s = len(alphas)
    return [float(stage_memory(i, alphas, model, s)) for i in range(1, s + 1)]


def _fits(alphas, model: MemoryModel, capacity: Fraction) -> bool:
    s = len(alphas)
    return all(stage_memory(i, alphas, model, s) <= capacity for i in range(1, s + 1))


def tune_alpha1(model: MemoryModel, s: int, step=RECOMPUTE_STEP) -> float:
    """Largest alpha_1 on the grid {0, step, 2*step, ..., 1} whose plan fits."""
    step = exact(step)
    if not 0 < step <= 1:
        raise DomainError(f"step must lie in (0, 1], got {float(step)}")
    if model.capacity is None:
        raise DomainError("tuning alpha_1 needs a capacity")
    capacity = exact(model.capacity)
    if exact(model.M_r) > capacity:
        raise InfeasibleError(f"runtime memory {model.M_r} exceeds capacity {model.capacity}")

    best = Fraction(0)
    candidate = step
    while candidate <= 1:
        if not _fits(alpha_schedule(candidate, s, exact_values=True), model, capacity):
            # memory grows with alpha_1, so the first miss ends the scan
            break
        best = candidate
        candidate += step
    if best + step > 1 and best < 1 and _fits(alpha_schedule(1, s, exact_values=True), model, capacity):
        best = Fraction(1)

    logger.debug("Tuned alpha_1=%s for s=%d", float(best), s)
    return float(best)


def build_plan(model: MemoryModel, s: int, step=RECOMPUTE_STEP) -> RecomputePlan:
    alpha_1 = tune_alpha1(model, s, step)
    alphas = alpha_schedule(alpha_1, s)
    return RecomputePlan(alphas=tuple(alphas), per_stage_memory=tuple(plan_memory(alphas, model)))


def activation_bytes(layers: int, microbatch_size: int, seq_len: int, hidden: int, tmp_degree: int = 1) -> int:
    return ACTIVATION_CONSTANT * layers * microbatch_size * seq_len * hidden // tmp_degree


def estimate_memory_model(
    assignment: StageAssignment,
    microbatch_size: int,
    hidden: int,
    seq_len: int,
    bytes_per_param: int = BYTES_PER_PARAM,
    tmp_degree: int = 1,
    capacity: float | None = None,
    buffer_bytes: int = BUFFER_BYTES,
) -> MemoryModel:
    """
    Per stage: M_a = 34 bytes * layers * mb * seq * hidden (split across the
    TMP group), M_r = model-state bytes + M_a + buffers. The model keeps the
    worst stage for both and the per-stage values alongside.
    """
    layers = assignment.stage_layer_counts or tuple(0 for _ in assignment.stage_param_counts)
    activation = [activation_bytes(n, microbatch_size, seq_len, hidden, tmp_degree) for n in layers]
    runtime = [
        params * bytes_per_param // tmp_degree + act + buffer_bytes
        for params, act in zip(assignment.stage_param_counts, activation)
    ]
    return MemoryModel(
        M_r=max(runtime),
        M_a=max(activation),
        capacity=capacity,
        bytes_per_param=bytes_per_param,
        per_stage_runtime=tuple(runtime),
        per_stage_activation=tuple(activation),
    )
