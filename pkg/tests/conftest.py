import pytest

from planner.graph_core import OpNode, build_graph, generate_gpt_graph


@pytest.fixture
def chain_graph():
    """n1 -> n2 -> n3 -> n4, ten parameters each."""
    nodes = [OpNode("n1", "gemm", ("x",), 10, 4)]
    nodes += [OpNode(f"n{i}", "gemm", (f"n{i - 1}",), 10, 4) for i in range(2, 5)]
    return build_graph(nodes, ["x"])


@pytest.fixture
def skip_graph():
    """n5 reads n2 as well as n4."""
    nodes = [
        OpNode("n1", "gemm", ("x",), 10, 4),
        OpNode("n2", "gemm", ("n1",), 10, 4),
        OpNode("n3", "gemm", ("n2",), 10, 4),
        OpNode("n4", "gemm", ("n3",), 10, 4),
        OpNode("n5", "elementwise", ("n4", "n2"), 0, 4),
        OpNode("n6", "gemm", ("n5",), 10, 4),
    ]
    return build_graph(nodes, ["x"], common_threshold=3)


@pytest.fixture
def gpt_small():
    return generate_gpt_graph(2, 4)
