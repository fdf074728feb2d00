"""
search.py — Grid search over (dp, tmp, pmp, microbatch size).

For every factorization dp*tmp*pmp = world size and every microbatch size the
search checks the feasibility rules (batch divisibility, tmp >= 2 needs
microbatches of at least 2 samples, TMP divisibility of every split gemm,
enough subgraphs for the pipeline, device memory), binds the cost template to
the stage assignment, simulates the survivors and ranks them.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction

from config.settings import (
    DEFAULT_POLICY,
    DEFAULT_SEQ_LEN,
    DP_BANDWIDTH,
    GPUS_PER_NODE,
    MICROBATCH_CANDIDATES,
    P2P_BANDWIDTH,
    RECOMPUTE_STEP,
    TIME_PER_PARAM_SAMPLE,
    TMP_BANDWIDTH,
)
from planner.errors import (
    CapacityError,
    DomainError,
    IndivisibleError,
    InfeasibleError,
    NoFeasiblePlanError,
    TriPlanError,
)
from planner.graph_core import ModelGraph, graph_fingerprint
from planner.recompute import (
    MemoryModel,
    RecomputePlan,
    alpha_schedule,
    build_plan,
    estimate_memory_model,
    exact,
    plan_memory,
)
from planner.schedule import PipelineConfig, Policy, build_schedule, parse_policy, validate_schedule
from planner.sharder import StageAssignment, SubgraphSequence, assign_stages, input_ownership, shard_graph
from planner.simulator import CostModel, SimResult, ring_allreduce_time, run
from planner.tmp import TmpConfig, speedup, split_graph_nodes
from storage.sequence_cache import cache_sequence, load_cached

logger = logging.getLogger(__name__)

ACTIVATION_BYTES_PER_UNIT = 2    # fp16 activations crossing a stage boundary


def default_tmp_candidates(gpus_per_node: int = GPUS_PER_NODE) -> tuple[int, ...]:
    out, d = [], 1
    while d <= gpus_per_node:
        out.append(d)
        d *= 2
    return tuple(out)


def default_k(graph: ModelGraph) -> int:
    layers = graph.layer_count
    if layers == 0:
        return len(graph.nodes)
    return min(4 * layers, len(graph.nodes))


def infer_hidden(graph: ModelGraph) -> int:
    norms = [n.out_units for n in graph.nodes if n.kind == "norm"]
    if norms:
        return max(norms)
    return max(n.out_units for n in graph.nodes)


@dataclass(frozen=True)
class SearchSpace:
    world_size: int
    global_batch: int
    tmp_candidates: tuple[int, ...] = field(default_factory=default_tmp_candidates)
    microbatch_candidates: tuple[int, ...] = MICROBATCH_CANDIDATES
    capacity: float | None = None
    pmp_candidates: tuple[int, ...] | None = None
    policy: str = DEFAULT_POLICY
    seq_len: int = DEFAULT_SEQ_LEN
    hidden: int | None = None
    recompute_step: float = RECOMPUTE_STEP

    def __post_init__(self):
        if self.world_size < 1 or self.global_batch < 1:
            raise DomainError("world size and global batch must be positive")
        if not self.tmp_candidates or not self.microbatch_candidates:
            raise DomainError("candidate sets must be nonempty")


@dataclass(frozen=True)
class CostTemplate:
    time_per_param_sample: float = TIME_PER_PARAM_SAMPLE
    p2p_bandwidth: float | None = P2P_BANDWIDTH
    dp_bandwidth: float | None = DP_BANDWIDTH
    tmp_bandwidth: float | None = TMP_BANDWIDTH
    head_extra: float = 0.0

    def bind(self, assignment: StageAssignment, mb: int, dp: int, tmp: int, seq_len: int, hidden: int):
        """Stage forward time scales with the stage's share of parameters."""
        tpp = exact(self.time_per_param_sample)
        forward = tuple(Fraction(p, tmp) * mb * tpp for p in assignment.stage_param_counts)

        boundary_bytes = mb * seq_len * hidden * ACTIVATION_BYTES_PER_UNIT
        p2p = exact(boundary_bytes) / exact(self.p2p_bandwidth) if self.p2p_bandwidth else Fraction(0)
        grads = [Fraction(p, tmp) * ACTIVATION_BYTES_PER_UNIT for p in assignment.stage_param_counts]
        dp_allreduce = tuple(ring_allreduce_time(g, dp, self.dp_bandwidth) for g in grads)

        layers = assignment.stage_layer_counts or tuple(0 for _ in forward)
        costs = CostModel(
            forward_per_mb=forward,
            p2p_per_activation=p2p,
            dp_allreduce=dp_allreduce,
            head_extra=exact(self.head_extra),
            blocks_per_stage=tuple(2 * n for n in layers),
            layers_per_stage=tuple(layers),
        )

        tmp_cfg = None
        if tmp > 1 and any(layers):
            # one layer's two AllReduces of the block output
            layer_bytes = 2 * boundary_bytes
            T_a = ring_allreduce_time(layer_bytes, tmp, self.tmp_bandwidth)
            K = max(layers)
            T_m = max(forward) / K or Fraction(1)
            tmp_cfg = TmpConfig(K=K, T_m=T_m, T_a=T_a, tmp_degree=tmp)
        return costs, tmp_cfg


@dataclass(frozen=True)
class ParallelPlan:
    dp: int
    tmp: int
    pmp: int
    microbatch_size: int
    num_microbatches: int
    stage_assignment: StageAssignment
    recompute: RecomputePlan
    input_owner: dict = field(default_factory=dict, compare=False)
    policy: Policy = Policy.SHIFTED_CRITICAL_PATH

    @property
    def key(self) -> tuple[int, int, int, int]:
        return (self.dp, self.tmp, self.pmp, self.microbatch_size)

    def to_dict(self) -> dict:
        return {
            "dp": self.dp,
            "tmp": self.tmp,
            "pmp": self.pmp,
            "microbatch_size": self.microbatch_size,
            "num_microbatches": self.num_microbatches,
            "policy": self.policy.value,
            "stage_of_subgraph": {str(k): v for k, v in self.stage_assignment.stage_of_subgraph.items()},
            "stage_param_counts": list(self.stage_assignment.stage_param_counts),
            "stage_layer_counts": list(self.stage_assignment.stage_layer_counts),
            "alphas": list(self.recompute.alphas),
            "input_owner": dict(self.input_owner),
        }


@dataclass
class PlanResult:
    plan: ParallelPlan
    result: SimResult
    stage_memory: list[float]
    tmp_speedup: float | None = None

    @property
    def makespan(self) -> Fraction:
        return self.result.makespan

    def rank_key(self):
        p = self.plan
        return (self.makespan, p.tmp, p.pmp, -p.microbatch_size)


@dataclass
class SearchOutcome:
    plans: list[PlanResult]
    rejected: dict[tuple, str]
    sequence: SubgraphSequence | None = None

    @property
    def best(self) -> PlanResult:
        return self.plans[0]


# ---------------------------------------------------------------------------
# Enumeration
# ---------------------------------------------------------------------------

def enumerate_configs(space: SearchSpace) -> list[tuple[int, int, int, int]]:
    """All (dp, tmp, pmp, mb) with dp*tmp*pmp = world size, in key order."""
    configs = []
    for tmp in sorted(set(space.tmp_candidates)):
        if space.world_size % tmp:
            continue
        rest = space.world_size // tmp
        for pmp in range(1, rest + 1):
            if rest % pmp:
                continue
            if space.pmp_candidates is not None and pmp not in space.pmp_candidates:
                continue
            dp = rest // pmp
            for mb in sorted(set(space.microbatch_candidates)):
                configs.append((dp, tmp, pmp, mb))
    return sorted(configs)


def _policy_for(policy: Policy, pmp: int) -> Policy:
    # a single stage has no critical path to shift
    if policy is Policy.SHIFTED_CRITICAL_PATH and pmp < 2:
        return Policy.EARLY_RECOMPUTE
    return policy


def _evaluate(graph, seq, space, template, policy, config) -> PlanResult:
    dp, tmp, pmp, mb = config
    if space.global_batch % (dp * mb):
        raise InfeasibleError(f"global batch {space.global_batch} not divisible by dp*mb = {dp * mb}")
    if tmp >= 2 and mb < 2:
        raise InfeasibleError("sub-pipelined TMP needs a microbatch of at least 2 samples")
    if pmp > len(seq):
        raise InfeasibleError(f"only {len(seq)} subgraphs for {pmp} pipeline stages")
    if tmp >= 2:
        split_graph_nodes(graph.nodes, tmp)

    m = space.global_batch // (dp * mb)
    assignment = assign_stages(seq, pmp)
    hidden = space.hidden or infer_hidden(graph)
    memory = estimate_memory_model(
        assignment, mb, hidden, space.seq_len, tmp_degree=tmp, capacity=space.capacity,
    )
    if space.capacity is not None:
        recompute = build_plan(memory, pmp, space.recompute_step)
    else:
        alphas = alpha_schedule(1, pmp)
        recompute = RecomputePlan(alphas=tuple(alphas), per_stage_memory=tuple(plan_memory(alphas, memory)))

    policy = _policy_for(policy, pmp)
    plan = ParallelPlan(
        dp=dp,
        tmp=tmp,
        pmp=pmp,
        microbatch_size=mb,
        num_microbatches=m,
        stage_assignment=assignment,
        recompute=recompute,
        input_owner=input_ownership(seq, assignment),
        policy=policy,
    )

    costs, tmp_cfg = template.bind(assignment, mb, dp, tmp, space.seq_len, hidden)
    table = build_schedule(policy, PipelineConfig(pmp, m))
    violations = validate_schedule(table)
    if violations:
        raise InfeasibleError(f"schedule invalid: {violations[0]}")
    plan, result = _simulate_within_capacity(plan, table, costs, tmp_cfg, memory, space)
    recompute = plan.recompute
    return PlanResult(
        plan=plan,
        result=result,
        stage_memory=list(recompute.per_stage_memory),
        tmp_speedup=speedup(tmp_cfg) if tmp_cfg is not None else None,
    )


def _simulate_within_capacity(plan, table, costs, tmp_cfg, memory: MemoryModel, space: SearchSpace):
    """
    Simulate `plan` against the device capacity. The analytic model misses
    the extra warm-up stash and the early recomputes of the shifted critical
    path schedule, so alpha_1 steps down the grid until the simulated peak
    fits too.
    """
    tracked = MemoryModel(
        M_r=memory.M_r, M_a=memory.M_a,
        capacity=space.capacity,
        per_stage_runtime=memory.per_stage_runtime,
        per_stage_activation=memory.per_stage_activation,
    )
    step = exact(space.recompute_step)
    while True:
        try:
            return plan, run(plan, table, costs, plan.recompute, tmp_cfg, memory=tracked)
        except CapacityError as e:
            alpha_1 = exact(plan.recompute.alphas[0]) - step
            if plan.pmp == 1 or alpha_1 < 0:
                raise InfeasibleError(f"simulated peak memory exceeds capacity: {e}") from e
            alphas = alpha_schedule(alpha_1, plan.pmp)
            logger.debug("Config %s over capacity in simulation, retrying alpha_1=%.2f", plan.key, alphas[0])
            recompute = RecomputePlan(alphas=tuple(alphas), per_stage_memory=tuple(plan_memory(alphas, memory)))
            plan = replace(plan, recompute=recompute)


def plan(
    graph: ModelGraph,
    space: SearchSpace,
    costs: CostTemplate | None = None,
    k: int | None = None,
    seq: SubgraphSequence | None = None,
    cache_dir=None,
    max_workers: int | None = None,
) -> SearchOutcome:
    costs = costs or CostTemplate()
    policy = parse_policy(space.policy)
    k = k or default_k(graph)
    if seq is None:
        seq = _sequence(graph, k, cache_dir)

    configs = enumerate_configs(space)
    logger.info("Evaluating %d configurations for world size %d", len(configs), space.world_size)

    def attempt(config):
        try:
            return config, _evaluate(graph, seq, space, costs, policy, config), None
        except (IndivisibleError, InfeasibleError) as e:
            return config, None, str(e)
        except TriPlanError as e:
            return config, None, f"{type(e).__name__}: {e}"

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        outcomes = list(executor.map(attempt, configs))

    plans, rejected = [], {}
    for config, result, reason in sorted(outcomes, key=lambda o: o[0]):
        if result is None:
            rejected[config] = reason
        else:
            plans.append(result)
    plans.sort(key=PlanResult.rank_key)

    if not plans:
        raise NoFeasiblePlanError(f"none of {len(configs)} configurations is feasible", rejected)
    logger.info(
        "Best plan dp=%d tmp=%d pmp=%d mb=%d, makespan %.6g (%d feasible, %d rejected)",
        *plans[0].plan.key, float(plans[0].makespan), len(plans), len(rejected),
    )
    return SearchOutcome(plans=plans, rejected=rejected, sequence=seq)


def _sequence(graph: ModelGraph, k: int, cache_dir) -> SubgraphSequence:
    if cache_dir is None:
        return shard_graph(graph, k)
    seq = load_cached(graph_fingerprint(graph), k, cache_dir)
    if seq is None:
        seq = shard_graph(graph, k)
        cache_sequence(graph, seq, k, cache_dir)
    return seq

