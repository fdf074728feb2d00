import json
from fractions import Fraction

import pytest

from planner.errors import CapacityError, DeadlockError, DomainError, PolicyError
from planner.recompute import MemoryModel, RecomputePlan
from planner.schedule import ActionKind, PipelineConfig, Policy, ScheduleTable, build_schedule
from planner.simulator import (
    CostModel,
    SimResult,
    compare_policies,
    export_trace,
    render_timeline,
    ring_allreduce_time,
    run,
    simulate_policy,
    trace_document,
)
from planner.tmp import TmpConfig

BUBBLE_UNITS = {
    "1f1b": lambda s: 4 * (s - 1),
    "early-recompute": lambda s: 3 * (s - 1),
    "scp": lambda s: 3 * (s - 2),
}


def test_one_f_one_b_four_by_four():
    result = simulate_policy("1f1b", PipelineConfig(4, 4))
    assert result.makespan == 28
    assert result.bubble_fraction == Fraction(12, 28)
    assert result.critical_stage == 3


def test_scp_four_by_four():
    result = simulate_policy("scp", PipelineConfig(4, 4))
    assert result.makespan == 22
    assert result.critical_stage == 2


def test_early_recompute_four_by_four():
    assert simulate_policy("early-recompute", PipelineConfig(4, 4)).makespan == 25


@pytest.mark.parametrize("s", range(2, 17))
def test_makespan_matches_closed_forms(s):
    for m in range(s, 4 * s + 1):
        makespans = {}
        for policy, bubble in BUBBLE_UNITS.items():
            if policy == "scp" and m < 3:
                continue
            result = simulate_policy(policy, PipelineConfig(s, m))
            assert result.makespan == 4 * m + bubble(s), (policy, s, m)
            makespans[policy] = result.makespan
        if "scp" in makespans:
            assert makespans["scp"] <= makespans["early-recompute"] <= makespans["1f1b"]


@pytest.mark.parametrize("s", [4, 8, 16])
def test_scp_critical_stage_is_second_to_last(s):
    assert simulate_policy("scp", PipelineConfig(s, 2 * s)).critical_stage == s - 2


@pytest.mark.parametrize("h", [Fraction(1, 4), Fraction(1, 2)])
@pytest.mark.parametrize("s", [4, 8])
def test_head_layers_stay_off_the_scp_critical_path(h, s):
    m = 2 * s
    costs = CostModel.uniform(s, head_extra=h)
    assert simulate_policy("scp", PipelineConfig(s, m), costs).makespan == 4 * m + 3 * (s - 2)
    assert simulate_policy("1f1b", PipelineConfig(s, m), costs).makespan > 4 * m + 4 * (s - 1)


def test_single_stage_without_recompute():
    result = simulate_policy("1f1b", PipelineConfig(1, 1), recompute=RecomputePlan(alphas=(1.0,)))
    assert result.makespan == 3


def test_work_is_conserved():
    result = simulate_policy("early-recompute", PipelineConfig(4, 6))
    for stats in result.per_stage:
        assert stats.busy == 4 * 6
        assert stats.idle == result.makespan - stats.busy


def test_scp_trace_counts():
    result = simulate_policy("scp", PipelineConfig(4, 5))
    for stage in range(4):
        assert result.count(stage, "Forward") == 5
        assert result.count(stage, "Backward") == 5
    assert [result.count(stage, "Recompute") for stage in range(4)] == [5, 5, 5, 0]


def test_events_never_overlap_on_a_stream():
    result = simulate_policy("scp", PipelineConfig(4, 8), CostModel.uniform(4, p2p_per_activation=Fraction(1, 3)))
    streams = {}
    for e in result.events:
        streams.setdefault((e.stage, e.stream), []).append(e)
    for events in streams.values():
        events.sort(key=lambda e: e.start)
        assert all(a.end <= b.start for a, b in zip(events, events[1:]))
    assert result.makespan == max(e.end for e in result.events)


def test_trace_document_has_one_process_per_stage(tmp_path):
    result = simulate_policy("1f1b", PipelineConfig(3, 2))
    doc = trace_document(result)
    meta = [e for e in doc["traceEvents"] if e["ph"] == "M"]
    assert sorted(e["pid"] for e in meta) == [0, 1, 2]

    path = export_trace(result, tmp_path / "nested" / "trace.json")
    loaded = json.loads(path.read_text(encoding="utf-8"))
    spans = [e for e in loaded["traceEvents"] if e["ph"] == "X"]
    assert len(spans) == len(result.events)
    assert max(e["ts"] + e["dur"] for e in spans) == pytest.approx(float(result.makespan) * 1000)


def test_empty_result_exports_empty_trace():
    empty = SimResult(Policy.ONE_F_ONE_B, Fraction(0), [], 0, Fraction(0))
    assert trace_document(empty)["traceEvents"] == []


def test_render_timeline():
    result = simulate_policy("1f1b", PipelineConfig(2, 2))
    lines = render_timeline(result).splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("stage  0 |F")
    assert "makespan 12" in lines[-1]


@pytest.mark.parametrize("s", [4, 8, 16])
def test_compare_policies_ratio(s):
    rows = compare_policies(None, CostModel.uniform(s), ["1f1b", "scp"], m=2 * s)
    assert rows[0]["ratio"] == 1
    assert rows[1]["ratio"] == Fraction(11 * s - 6, 12 * s - 4)


def test_scp_beats_early_recompute_on_two_stages():
    rows = compare_policies(None, CostModel.uniform(2), ["scp", "early-recompute"], m=4)
    assert rows[0]["makespan"] == 16
    assert rows[1]["makespan"] == 19


def test_single_microbatch_degenerates_to_a_chain():
    s = 4
    keep_all = RecomputePlan(alphas=(1.0,) * s)
    rows = compare_policies(None, CostModel.uniform(s), ["1f1b", "early-recompute", "scp"], m=1, recompute=keep_all)
    assert {row["makespan"] for row in rows} == {3 * s}


def test_keeping_more_activations_trades_memory_for_time():
    s = 4
    memory = MemoryModel(M_r=10, M_a=2)
    previous_peak, previous_makespan = 0.0, None
    for alpha in (0.0, 0.25, 0.5, 1.0):
        result = simulate_policy("1f1b", PipelineConfig(s, 8), recompute=RecomputePlan(alphas=(alpha,) * s), memory=memory)
        peak = result.per_stage[0].peak_memory_bytes
        assert peak >= previous_peak
        if previous_makespan is not None:
            assert result.makespan <= previous_makespan
        previous_peak, previous_makespan = peak, result.makespan


def test_whole_blocks_round_down():
    costs = CostModel.uniform(2, blocks_per_stage=(4, 4))
    result = simulate_policy("1f1b", PipelineConfig(2, 1), costs, recompute=RecomputePlan(alphas=(0.6, 0.6)))
    recompute = [e for e in result.events if e.kind == "Recompute"]
    # 0.6 of four blocks keeps two, so half the forward is recomputed
    assert all(e.end - e.start == Fraction(1, 2) for e in recompute)


def test_tmp_without_communication_is_neutral():
    cfg = PipelineConfig(4, 6)
    plain = simulate_policy("scp", cfg)
    with_tmp = simulate_policy("scp", cfg, tmp_cfg=TmpConfig(K=2, T_m=1, T_a=0))
    assert with_tmp.makespan == plain.makespan


def test_tmp_overlap_beats_default_tmp():
    cfg = PipelineConfig(4, 6)
    tmp_cfg = TmpConfig(K=4, T_m=1, T_a=1)
    overlapped = simulate_policy("1f1b", cfg, tmp_cfg=tmp_cfg)
    serial = simulate_policy("1f1b", cfg, tmp_cfg=tmp_cfg, subpipelined=False)
    assert overlapped.makespan < serial.makespan


def test_dp_allreduce_closes_the_iteration():
    costs = CostModel.uniform(4, dp_allreduce=(1, 1, 1, 1))
    result = simulate_policy("1f1b", PipelineConfig(4, 4), costs)
    assert result.makespan == 29
    assert sum(1 for e in result.events if e.kind == "AllReduce") == 4


def test_ring_allreduce_time():
    assert ring_allreduce_time(100, 4, 10) == 15
    assert ring_allreduce_time(100, 1, 10) == 0
    assert ring_allreduce_time(100, 4, None) == 0


def test_missing_send_deadlocks():
    table = build_schedule("1f1b", PipelineConfig(2, 1))
    first = tuple(a for a in table.per_stage[0] if a.kind is not ActionKind.SEND_ACT)
    broken = ScheduleTable(table.policy, table.cfg, (first, table.per_stage[1]))
    with pytest.raises(DeadlockError) as info:
        run(None, broken, CostModel.uniform(2))
    assert "stage 1" in str(info.value)


def test_mismatched_stage_counts():
    table = build_schedule("1f1b", PipelineConfig(4, 2))
    with pytest.raises(DomainError):
        run(None, table, CostModel.uniform(3))
    with pytest.raises(DomainError):
        run(None, table, CostModel.uniform(4), recompute=RecomputePlan.recompute_all(3))


def test_scp_requires_kept_last_stage():
    table = build_schedule("scp", PipelineConfig(4, 4))
    with pytest.raises(PolicyError):
        run(None, table, CostModel.uniform(4), recompute=RecomputePlan.recompute_all(4))


@pytest.mark.parametrize("policy", ["1f1b", "early-recompute"])
def test_every_stage_of_uniform_policies_accepts_partial_recompute(policy):
    table = build_schedule(policy, PipelineConfig(4, 4))
    for j in range(4):
        assert any(a.kind is ActionKind.RECOMPUTE for a in table.per_stage[j])
    result = run(None, table, CostModel.uniform(4), recompute=RecomputePlan(alphas=(0.0, 0.3, 0.7, 0.5)))
    assert result.makespan > 0


@pytest.mark.parametrize("policy", ["1f1b", "early-recompute", "scp"])
@pytest.mark.parametrize("alphas", [(-0.1, 0, 0, 1), (0, 0, 0, 1.5)])
def test_recompute_ratios_outside_unit_interval_are_rejected(policy, alphas):
    table = build_schedule(policy, PipelineConfig(4, 4))
    with pytest.raises(DomainError):
        run(None, table, CostModel.uniform(4), recompute=RecomputePlan(alphas=alphas))


@pytest.mark.parametrize("policy", ["1f1b", "early-recompute", "scp"])
def test_trace_bytes_repeat(policy, tmp_path):
    cfg = PipelineConfig(4, 6)
    first = export_trace(simulate_policy(policy, cfg), tmp_path / "a.json")
    second = export_trace(simulate_policy(policy, cfg), tmp_path / "b.json")
    assert first.read_bytes() == second.read_bytes()


def test_capacity_is_enforced():
    memory = MemoryModel(M_r=10, M_a=8, capacity=10.5)
    with pytest.raises(CapacityError):
        simulate_policy("1f1b", PipelineConfig(4, 4), memory=memory)


def test_negative_costs_rejected():
    with pytest.raises(DomainError):
        CostModel(forward_per_mb=(1, -1))


def test_result_dict():
    doc = simulate_policy("scp", PipelineConfig(4, 4)).to_dict()
    assert doc["policy"] == "scp"
    assert doc["makespan"] == 22.0
    assert len(doc["per_stage"]) == 4
