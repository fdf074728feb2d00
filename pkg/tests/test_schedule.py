from fractions import Fraction

import pytest

from planner.errors import DomainError, PolicyError, SchemaError
from planner.schedule import (
    ActionKind,
    PipelineConfig,
    Policy,
    ScheduleAction,
    ScheduleTable,
    bubble_metrics,
    build_schedule,
    parse_policy,
    render_ascii,
    table_from_dict,
    table_to_dict,
    table_to_json,
    validate_schedule,
)


def _order(table, stage):
    return [str(a) for a in table.compute_order(stage)]


def test_policy_aliases():
    assert parse_policy("1F1B") is Policy.ONE_F_ONE_B
    assert parse_policy("early_recompute") is Policy.EARLY_RECOMPUTE
    assert parse_policy("SCP") is Policy.SHIFTED_CRITICAL_PATH
    with pytest.raises(PolicyError):
        parse_policy("gpipe")


def test_pipeline_config_domain():
    with pytest.raises(DomainError):
        PipelineConfig(0, 4)
    with pytest.raises(DomainError):
        PipelineConfig(4, 0)


def test_one_f_one_b_orders():
    table = build_schedule("1f1b", PipelineConfig(4, 4))
    assert _order(table, 0) == ["F0", "F1", "F2", "F3", "R0", "B0", "R1", "B1", "R2", "B2", "R3", "B3"]
    assert _order(table, 3) == ["F0", "R0", "B0", "F1", "R1", "B1", "F2", "R2", "B2", "F3", "R3", "B3"]


def test_early_recompute_issues_next_recompute_after_forward():
    table = build_schedule("early-recompute", PipelineConfig(4, 4))
    assert _order(table, 3) == ["F0", "R0", "B0", "F1", "R1", "B1", "F2", "R2", "B2", "F3", "R3", "B3"]
    assert _order(table, 2) == ["F0", "F1", "R0", "B0", "F2", "R1", "B1", "F3", "R2", "B2", "R3", "B3"]


def test_scp_stage_roles():
    table = build_schedule("scp", PipelineConfig(4, 4))
    assert _order(table, 3) == ["F0", "B0", "F1", "B1", "F2", "B2", "F3", "B3"]
    assert _order(table, 2) == ["F0", "F1", "F2", "R0", "R1", "B0", "R2", "B1", "F3", "R3", "B2", "B3"]
    assert _order(table, 0) == ["F0", "F1", "F2", "F3", "R0", "R1", "B0", "R2", "B1", "R3", "B2", "B3"]


def test_scp_needs_two_stages():
    with pytest.raises(PolicyError):
        build_schedule("scp", PipelineConfig(1, 4))


def test_send_and_receive_frame_compute():
    table = build_schedule("1f1b", PipelineConfig(2, 2))
    first = [f"{a.kind.value}{a.microbatch}" for a in table.per_stage[0]]
    assert first[:2] == ["Forward0", "SendAct0"]
    last = [f"{a.kind.value}{a.microbatch}" for a in table.per_stage[1]]
    assert last[:2] == ["RecvAct0", "Forward0"]
    assert "SendGrad0" in last and "RecvGrad0" in first


@pytest.mark.parametrize("policy", list(Policy))
@pytest.mark.parametrize("s", [2, 3, 4, 8])
@pytest.mark.parametrize("m", [1, 2, 3, 5, 8, 16])
def test_built_schedules_validate(policy, s, m):
    table = build_schedule(policy, PipelineConfig(s, m))
    assert validate_schedule(table) == []


@pytest.mark.parametrize("policy", list(Policy))
@pytest.mark.parametrize("s", range(1, 17))
def test_every_small_grid_schedule_validates(policy, s):
    if policy is Policy.SHIFTED_CRITICAL_PATH and s < 2:
        pytest.skip("needs two stages")
    for m in range(1, 33):
        assert validate_schedule(build_schedule(policy, PipelineConfig(s, m))) == [], (s, m)


def test_single_stage_schedules_validate():
    for policy in ("1f1b", "early-recompute"):
        assert validate_schedule(build_schedule(policy, PipelineConfig(1, 3))) == []


def test_backward_before_forward_is_one_violation():
    cfg = PipelineConfig(1, 1)
    actions = (
        ScheduleAction(ActionKind.BACKWARD, 0, 0),
        ScheduleAction(ActionKind.FORWARD, 0, 0),
        ScheduleAction(ActionKind.RECOMPUTE, 0, 0),
    )
    violations = validate_schedule(ScheduleTable(Policy.ONE_F_ONE_B, cfg, (actions,)))
    assert len(violations) == 1
    assert "precedes" in violations[0]


def test_recompute_on_scp_last_stage_is_one_violation():
    table = build_schedule("scp", PipelineConfig(2, 3))
    last = list(table.per_stage[1])
    b0 = next(i for i, a in enumerate(last) if a.kind is ActionKind.BACKWARD and a.microbatch == 0)
    last.insert(b0, ScheduleAction(ActionKind.RECOMPUTE, 0, 1))
    broken = ScheduleTable(table.policy, table.cfg, (table.per_stage[0], tuple(last)))
    violations = validate_schedule(broken)
    assert len(violations) == 1
    assert "last stage" in violations[0]


def test_missing_send_deadlocks_the_table():
    table = build_schedule("1f1b", PipelineConfig(2, 1))
    first = tuple(a for a in table.per_stage[0] if a.kind is not ActionKind.SEND_ACT)
    violations = validate_schedule(ScheduleTable(table.policy, table.cfg, (first, table.per_stage[1])))
    assert violations
    assert any("SendAct" in v for v in violations)


def test_swapped_forwards_are_flagged():
    table = build_schedule("1f1b", PipelineConfig(2, 2))
    actions = list(table.per_stage[0])
    actions.reverse()
    violations = validate_schedule(ScheduleTable(table.policy, table.cfg, (tuple(actions), table.per_stage[1])))
    assert violations


@pytest.mark.parametrize("policy, bubble", [("1f1b", 12), ("early-recompute", 9), ("scp", 6)])
def test_bubble_metrics_closed_form(policy, bubble):
    metrics = bubble_metrics(policy, PipelineConfig(4, 4))
    assert metrics.bubble_time_units == bubble
    assert metrics.run_time_units == 16
    assert metrics.ratio == Fraction(bubble, 16)
    assert metrics.fraction == Fraction(bubble, bubble + 16)


def test_one_f_one_b_bubble_reaches_forty_three_percent():
    metrics = bubble_metrics("1f1b", PipelineConfig(4, 4))
    assert metrics.fraction == Fraction(12, 28)
    assert round(float(metrics.fraction), 4) == 0.4286


def test_scp_bubble_needs_two_stages():
    with pytest.raises(PolicyError):
        bubble_metrics("scp", PipelineConfig(1, 4))


def test_table_document_round_trip():
    table = build_schedule("scp", PipelineConfig(3, 4))
    assert table_from_dict(table_to_dict(table)) == table
    assert '"policy": "scp"' in table_to_json(table)


def test_malformed_table_document():
    with pytest.raises(SchemaError):
        table_from_dict({"policy": "scp", "stages": 2})
    with pytest.raises(SchemaError):
        table_from_dict({"policy": "scp", "stages": 1, "microbatches": 1,
                         "per_stage": [[{"kind": "Jump", "microbatch": 0, "stage": 0}]]})


def test_render_ascii_lists_every_stage():
    text = render_ascii(build_schedule("1f1b", PipelineConfig(3, 2)))
    lines = text.splitlines()
    assert lines[0].startswith("1f1b")
    assert len(lines) == 4
    assert "F0" in lines[1] and "B1" in lines[3]
