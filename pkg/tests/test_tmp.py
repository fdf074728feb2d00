from fractions import Fraction

import pytest

from planner.errors import DomainError, IndivisibleError
from planner.graph_core import OpNode, generate_gpt_graph
from planner.tmp import (
    TmpConfig,
    audit_trace,
    default_tmp_cost,
    simulate_subpipeline,
    speedup,
    speedup_ceiling,
    split_gemm,
    split_graph_nodes,
    subpipelined_tmp_cost,
)


def test_default_cost_examples():
    assert default_tmp_cost(TmpConfig(K=4, T_m=1, T_a=1)).total == 20
    assert default_tmp_cost(TmpConfig(K=1, T_m=2, T_a=3)).total == 12
    assert default_tmp_cost(TmpConfig(K=5, T_m=2, T_a=0)).total == 30


def test_subpipelined_cost_examples():
    cost = subpipelined_tmp_cost(TmpConfig(K=4, T_m=1, T_a=1))
    assert (cost.fwd, cost.bwd, cost.total) == (Fraction(17, 4), Fraction(33, 4), Fraction(25, 2))
    assert cost.fwd + cost.bwd == cost.total
    assert speedup(TmpConfig(K=4, T_m=1, T_a=1)) == pytest.approx(1.6)

    comm_bound = subpipelined_tmp_cost(TmpConfig(K=8, T_m=1, T_a=3))
    assert comm_bound.total == Fraction(4875, 100)


@pytest.mark.parametrize("K", [1, 2, 4, 8, 24])
@pytest.mark.parametrize("T_m", [0.5, 1, 2])
def test_no_communication_gains_nothing(K, T_m):
    cfg = TmpConfig(K=K, T_m=T_m, T_a=0)
    assert subpipelined_tmp_cost(cfg).total == default_tmp_cost(cfg).total == 3 * K * cfg.T_m


@pytest.mark.parametrize("K", [1, 2, 4, 8, 24])
@pytest.mark.parametrize("T_m", [0.5, 1, 2])
@pytest.mark.parametrize("T_a", [0, 0.5, 1, 2, 4])
def test_micro_simulation_matches_formulas(K, T_m, T_a):
    cfg = TmpConfig(K=K, T_m=T_m, T_a=T_a)
    analytic = subpipelined_tmp_cost(cfg)
    for direction, expected in (("fwd", analytic.fwd), ("bwd", analytic.bwd)):
        trace = simulate_subpipeline(cfg, direction)
        assert float(trace.makespan) == pytest.approx(float(expected), rel=1e-9)
        assert audit_trace(trace) == []
    assert analytic.total <= default_tmp_cost(cfg).total


def test_single_layer_forward():
    trace = simulate_subpipeline(TmpConfig(K=1, T_m=1, T_a=1), "fwd")
    assert trace.makespan == Fraction(5, 4)


def test_no_comm_leaves_comm_stream_empty():
    trace = simulate_subpipeline(TmpConfig(K=3, T_m=1, T_a=0), "fwd")
    assert trace.stream("comm") == []
    assert trace.makespan == 3


def test_bad_direction():
    with pytest.raises(DomainError):
        simulate_subpipeline(TmpConfig(K=1, T_m=1, T_a=1), "sideways")


def test_overlapping_trace_is_caught():
    trace = simulate_subpipeline(TmpConfig(K=2, T_m=1, T_a=1), "fwd")
    first, second = trace.stream("compute")[:2]
    trace.events.append(type(first)("compute", 0, 0, first.start, second.end))
    assert audit_trace(trace)


def test_speedup_ceiling():
    assert speedup_ceiling(1, 1) == pytest.approx(5 / 3)
    assert speedup_ceiling(1, 0) == 1.0
    # the ratio climbs towards the ceiling with more layers
    assert speedup(TmpConfig(K=64, T_m=1, T_a=1)) < speedup_ceiling(1, 1)
    assert speedup(TmpConfig(K=64, T_m=1, T_a=1)) > speedup(TmpConfig(K=4, T_m=1, T_a=1))


def test_small_batch_penalty():
    cfg = TmpConfig(K=4, T_m=1, T_a=1)
    assert cfg.with_penalty(1).T_m == Fraction(6, 5)
    assert cfg.with_penalty(4).T_m == 1
    assert cfg.with_penalty(1, {1: 2}).T_m == 2


def test_config_validation():
    with pytest.raises(DomainError):
        TmpConfig(K=0, T_m=1, T_a=1)
    with pytest.raises(DomainError):
        TmpConfig(K=1, T_m=0, T_a=1)
    with pytest.raises(DomainError):
        TmpConfig(K=1, T_m=1, T_a=-1)


def test_split_gemm():
    h = 8
    fc = OpNode("fc1", "gemm", ("x",), 4 * h * h, 4 * h, "column")
    part = split_gemm(fc, 4)
    assert part.per_rank_params == h * h
    assert (part.forward_allreduces, part.backward_allreduces) == (0, 1)
    assert part.per_rank_out_units == h

    proj = OpNode("proj", "gemm", ("x",), h * h, h, "row")
    assert (split_gemm(proj, 2).forward_allreduces, split_gemm(proj, 2).backward_allreduces) == (1, 0)

    identity = split_gemm(fc, 1)
    assert identity.per_rank_params == fc.param_count
    assert identity.forward_allreduces == identity.backward_allreduces == 0


def test_split_gemm_indivisible():
    graph = generate_gpt_graph(1, 1536)
    with pytest.raises(IndivisibleError):
        split_graph_nodes(graph.nodes, 5)


def test_split_conserves_parameters():
    graph = generate_gpt_graph(2, 64)
    for degree in (2, 4, 8):
        parts = split_graph_nodes(graph.nodes, degree)
        split_total = sum(p.per_rank_params * p.tmp_degree for p in parts)
        assert split_total == sum(n.param_count for n in graph.nodes if n.tmp_attr is not None)
