"""
Command-line entry point:

    python -m scripts shard      --layers 24 --hidden 1536 [--k 96] [--cache-dir DIR]
    python -m scripts schedule   --policy scp --stages 4 --microbatches 8 [--out table.json] [--ascii]
    python -m scripts recompute  --stages 8 --mr 10GiB --ma 2GiB --capacity 16GiB
    python -m scripts tmp        --layers 24 --tm 1 --ta 0.7 --mode both [--trace tmp.json]
    python -m scripts simulate   --plan output/best_plan.json --costs costs.toml --report report.json
    python -m scripts plan       --layers 24 --hidden 1536 --world-size 8 --global-batch 64
    python -m scripts run        config.toml

Exit status: 0 ok, 1 input error, 2 no feasible plan.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import pandas as pd

from app.engine import EXIT_INPUT_ERROR, EXIT_NO_PLAN, EXIT_OK, end_to_end, load_cost_template
from config.settings import DEFAULT_POLICY, DEFAULT_SEQ_LEN, MICROBATCH_CANDIDATES, RECOMPUTE_STEP
from planner.errors import ConfigError, NoFeasiblePlanError, SchemaError, TriPlanError
from planner.graph_core import ModelGraph, generate_gpt_graph, generate_random_graph, graph_fingerprint, load_graph
from planner.recompute import MemoryModel, RecomputePlan, alpha_schedule, build_plan
from planner.report import FORMATS, markdown_table, rejection_rows, report, stage_frame
from planner.schedule import PipelineConfig, bubble_metrics, build_schedule, render_ascii, table_to_dict
from planner.search import CostTemplate, SearchSpace, default_k, default_tmp_candidates, plan
from planner.sharder import StageAssignment, assign_stages, shard_graph
from planner.simulator import (
    CostModel,
    compare_policies,
    export_trace,
    render_timeline,
    run,
    simulate_policy,
)
from planner.tmp import (
    TmpConfig,
    audit_trace,
    default_tmp_cost,
    export_subpipeline_trace,
    simulate_subpipeline,
    speedup,
    speedup_ceiling,
    subpipelined_tmp_cost,
)
from storage.artifacts import write_json_atomic
from storage.sequence_cache import cache_sequence, load_cached

logger = logging.getLogger(__name__)


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


UNITS = {"": 1, "B": 1, "KB": 10**3, "MB": 10**6, "GB": 10**9, "KIB": 2**10, "MIB": 2**20, "GIB": 2**30}


def _bytes(text: str) -> float:
    """A byte count such as `16GiB`, `512MB` or `1.6e10`."""
    number = text.strip().upper().rstrip("BKMGI")
    unit = text.strip().upper()[len(number):]
    try:
        return float(number) * UNITS[unit]
    except (ValueError, KeyError) as e:
        raise argparse.ArgumentTypeError(f"expected a byte count like 16GiB, got {text!r}") from e


def _emit(args, text_out: str, document) -> None:
    if args.format == "json":
        print(json.dumps(document, indent=2))
    else:
        print(text_out)


def _add_graph_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("graph")
    g.add_argument("--graph", type=Path, help="graph JSON document")
    g.add_argument("--layers", type=int, help="generate a GPT graph with this many layers")
    g.add_argument("--hidden", type=int, default=1536)
    g.add_argument("--no-head", action="store_true", help="omit the loss head")
    g.add_argument("--random-nodes", type=int, help="generate a random DAG (uses --seed)")
    g.add_argument("--common-threshold", type=int)
    g.add_argument("--k", type=int, help="subgraph count target (default 4 x layers)")


def _add_cache_arg(p: argparse.ArgumentParser) -> None:
    # SUPPRESS keeps a global --cache-dir when the subcommand omits it
    p.add_argument("--cache-dir", type=Path, default=argparse.SUPPRESS, help="subgraph sequence cache directory")


def _graph(args) -> ModelGraph:
    if args.graph is not None:
        return load_graph(args.graph, args.common_threshold)
    if args.layers is not None:
        return generate_gpt_graph(args.layers, args.hidden, with_head=not args.no_head)
    if args.random_nodes is not None:
        return generate_random_graph(args.random_nodes, seed=args.seed)
    raise ConfigError("give one of --graph, --layers or --random-nodes")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_shard(args) -> int:
    graph = _graph(args)
    k = args.k or default_k(graph)
    seq = None
    if args.cache_dir is not None:
        seq = load_cached(graph_fingerprint(graph), k, args.cache_dir)
    if seq is None:
        seq = shard_graph(graph, k)
        if args.cache_dir is not None:
            cache_sequence(graph, seq, k, args.cache_dir)

    assignment = assign_stages(seq, args.stages) if args.stages else None
    rows = [
        {
            "subgraph": sg.index,
            "stage": assignment.stage_of_subgraph[sg.index] if assignment else None,
            "nodes": len(sg.nodes),
            "first": sg.nodes[0].id,
            "last": sg.nodes[-1].id,
            "param_count": sg.param_count,
            "outputs": ",".join(sg.outputs),
        }
        for sg in seq
    ]
    frame = pd.DataFrame(rows)
    text_out = f"{len(seq)} subgraphs (k={k}, {seq.merges} merges)\n" + (
        markdown_table(frame) if args.format == "markdown" else frame.to_string(index=False)
    )
    _emit(args, text_out, {
        "k": k,
        "merges": seq.merges,
        "subgraphs": [
            {"index": sg.index, "nodes": sg.node_ids, "inputs": list(sg.inputs), "outputs": list(sg.outputs)}
            for sg in seq
        ],
        "stage_param_counts": list(assignment.stage_param_counts) if assignment else None,
    })
    return EXIT_OK


def cmd_schedule(args) -> int:
    cfg = PipelineConfig(args.stages, args.microbatches)
    table = build_schedule(args.policy, cfg)
    metrics = bubble_metrics(table.policy, cfg)
    if args.out is not None:
        write_json_atomic(args.out, table_to_dict(table))
    # --ascii draws the timed run under unit costs instead of the bare order
    picture = render_timeline(simulate_policy(table.policy, cfg)) if args.ascii else render_ascii(table)
    text_out = picture + (
        f"\nbubble {metrics.bubble_time_units} units over {metrics.run_time_units}"
        f" (ratio {float(metrics.ratio):.4f}, fraction {float(metrics.fraction):.4f})"
    )
    _emit(args, text_out, {**table_to_dict(table), "bubble": metrics.to_dict()})
    return EXIT_OK


def cmd_recompute(args) -> int:
    if args.alpha1 is not None:
        alphas = alpha_schedule(args.alpha1, args.stages)
        memory = None
    else:
        if None in (args.mr, args.ma, args.capacity):
            raise ConfigError("give --alpha1, or --mr, --ma and --capacity")
        model = MemoryModel(M_r=args.mr, M_a=args.ma, capacity=args.capacity)
        recompute = build_plan(model, args.stages, args.step)
        alphas, memory = list(recompute.alphas), list(recompute.per_stage_memory)

    frame = pd.DataFrame({"stage": range(1, len(alphas) + 1), "alpha": alphas})
    if memory is not None:
        frame["memory"] = memory
    _emit(args, frame.to_string(index=False), {"alphas": alphas, "per_stage_memory": memory})
    return EXIT_OK


def cmd_tmp(args) -> int:
    cfg = TmpConfig(K=args.layers, T_m=args.tm, T_a=args.ta)
    if args.penalty_sub_batch:
        cfg = cfg.with_penalty(args.penalty_sub_batch)
    default, sub = default_tmp_cost(cfg), subpipelined_tmp_cost(cfg)
    document = {"speedup": speedup(cfg), "speedup_ceiling": speedup_ceiling(cfg.T_m, cfg.T_a)}
    lines = []
    if args.mode in ("default", "both"):
        document["default"] = default.to_dict()
        lines.append(f"default       fwd {float(default.fwd):g}  bwd {float(default.bwd):g}  total {float(default.total):g}")
    if args.mode in ("subpipelined", "both"):
        document["subpipelined"] = sub.to_dict()
        lines.append(f"sub-pipelined fwd {float(sub.fwd):g}  bwd {float(sub.bwd):g}  total {float(sub.total):g}")
    lines.append(f"speedup {document['speedup']:.4f} (ceiling {document['speedup_ceiling']:.4f})")

    if args.trace is not None:
        traces = [simulate_subpipeline(cfg, direction) for direction in ("fwd", "bwd")]
        export_subpipeline_trace(traces, args.trace)
        document["trace"] = {}
        for t in traces:
            problems = audit_trace(t)
            document["trace"][t.direction] = {"makespan": float(t.makespan), "problems": problems}
            lines.append(f"{t.direction} two-stream makespan {float(t.makespan):g}, {len(problems)} problems")
    _emit(args, "\n".join(lines), document)
    return EXIT_OK


def _plan_inputs(path: Path):
    """Stage count, microbatches, policy, stage loads and recompute plan from a best_plan.json."""
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        assignment = StageAssignment(
            stage_of_subgraph={int(k): v for k, v in doc["stage_of_subgraph"].items()},
            stage_param_counts=tuple(doc["stage_param_counts"]),
            stage_layer_counts=tuple(doc["stage_layer_counts"]),
        )
        recompute = RecomputePlan(alphas=tuple(doc["alphas"]))
        key = (doc["microbatch_size"], doc["dp"], doc["tmp"], doc.get("seq_len", DEFAULT_SEQ_LEN), doc["hidden"])
        return doc["pmp"], doc["num_microbatches"], doc["policy"], assignment, recompute, key
    except (OSError, json.JSONDecodeError, KeyError, TypeError, AttributeError) as e:
        logger.exception("Failed to read plan file %s", path)
        raise SchemaError(f"plan file {path} is not a best-plan document: {e}") from e


def cmd_simulate(args) -> int:
    tmp_cfg = None
    recompute = None
    if args.plan is not None:
        s, m, policy, assignment, recompute, key = _plan_inputs(args.plan)
        template = load_cost_template(args.costs) if args.costs else CostTemplate()
        mb, dp, tmp, seq_len, hidden = key
        costs, tmp_cfg = template.bind(assignment, mb, dp, tmp, seq_len, hidden)
        policy = args.policy or policy
    else:
        if args.costs is not None:
            raise ConfigError("--costs binds to a plan; pass --plan as well")
        s, m, policy = args.stages, args.microbatches, args.policy or DEFAULT_POLICY
        costs = CostModel.uniform(s, head_extra=args.head_extra)

    if args.compare:
        rows = [
            {**row, "makespan": float(row["makespan"]), "bubble_fraction": float(row["bubble_fraction"]),
             "ratio": float(row["ratio"])}
            for row in compare_policies(None, costs, ["1f1b", "early-recompute", "scp"], m=m, tmp_cfg=tmp_cfg)
        ]
        _emit(args, pd.DataFrame(rows).to_string(index=False), rows)
        return EXIT_OK

    table = build_schedule(policy, PipelineConfig(s, m))
    result = run(None, table, costs, recompute, tmp_cfg)
    if args.trace is not None:
        export_trace(result, args.trace)
    if args.report is not None:
        write_json_atomic(args.report, result.to_dict())
    _emit(args, render_timeline(result) + "\n" + stage_frame(result).to_string(index=False), result.to_dict())
    return EXIT_OK


def cmd_plan(args) -> int:
    graph = _graph(args)
    space = SearchSpace(
        world_size=args.world_size,
        global_batch=args.global_batch,
        tmp_candidates=args.tmp or default_tmp_candidates(),
        microbatch_candidates=args.microbatch_sizes,
        capacity=args.capacity,
        pmp_candidates=args.pmp,
        policy=args.policy or DEFAULT_POLICY,
        seq_len=args.seq_len,
    )
    template = load_cost_template(args.costs) if args.costs else CostTemplate()
    outcome = plan(graph, space, template, k=args.k, cache_dir=args.cache_dir)
    print(report(outcome.plans[: args.top], args.format, outcome.rejected))
    return EXIT_OK


def cmd_run(args) -> int:
    return end_to_end(args.config, out_dir=args.out_dir, cache_dir=args.cache_dir)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="triplan", description="3D parallel training planner and simulator")
    parser.add_argument("--seed", type=int, default=0, help="seed for randomized graph generation")
    parser.add_argument("--cache-dir", type=Path, help="subgraph sequence cache directory")
    parser.add_argument("--out-dir", type=Path, help="output directory for `run`")
    parser.add_argument("--format", choices=FORMATS, default="text")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("shard", help="split a graph into subgraphs and optionally stages")
    _add_graph_args(p)
    _add_cache_arg(p)
    p.add_argument("--stages", type=int)
    p.set_defaults(func=cmd_shard)

    p = sub.add_parser("schedule", help="print a policy's per-stage schedule")
    p.add_argument("--policy", default=DEFAULT_POLICY)
    p.add_argument("--stages", type=int, required=True)
    p.add_argument("--microbatches", type=int, required=True)
    p.add_argument("--out", type=Path, help="write the schedule table here as JSON")
    p.add_argument("--ascii", action="store_true", help="draw a unit-cost timeline")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("recompute", help="per-stage recomputation ratios")
    p.add_argument("--stages", type=int, required=True)
    p.add_argument("--alpha1", type=float)
    p.add_argument("--mr", type=_bytes, help="runtime memory per stage, e.g. 10GiB")
    p.add_argument("--ma", type=_bytes, help="activation memory of one stage's work, e.g. 2GiB")
    p.add_argument("--capacity", type=_bytes)
    p.add_argument("--step", type=float, default=RECOMPUTE_STEP)
    p.set_defaults(func=cmd_recompute)

    p = sub.add_parser("tmp", help="tensor-parallel cost with and without sub-pipelining")
    p.add_argument("--layers", type=int, required=True, help="transformer layers per stage")
    p.add_argument("--tm", type=float, required=True)
    p.add_argument("--ta", type=float, required=True)
    p.add_argument("--penalty-sub-batch", type=int, help="apply the small-batch penalty for this size")
    p.add_argument("--mode", choices=("default", "subpipelined", "both"), default="both")
    p.add_argument("--trace", type=Path, help="write the two-stream timeline here as a Chrome trace")
    p.set_defaults(func=cmd_tmp)

    p = sub.add_parser("simulate", help="simulate one iteration")
    p.add_argument("--plan", type=Path, help="best_plan.json from `run`")
    p.add_argument("--costs", type=Path, help="TOML file with a [costs] table")
    p.add_argument("--policy")
    p.add_argument("--stages", type=int, default=4)
    p.add_argument("--microbatches", type=int, default=8)
    p.add_argument("--head-extra", type=float, default=0.0)
    p.add_argument("--compare", action="store_true", help="compare all policies under the same costs")
    p.add_argument("--trace", type=Path, help="write a Chrome trace here")
    p.add_argument("--report", type=Path, help="write makespan and per-stage figures here as JSON")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plan", help="grid-search 3D parallel configurations")
    _add_graph_args(p)
    _add_cache_arg(p)
    p.add_argument("--world-size", type=int, required=True)
    p.add_argument("--global-batch", type=int, required=True)
    p.add_argument("--capacity", type=_bytes)
    p.add_argument("--tmp", type=_ints)
    p.add_argument("--pmp", type=_ints)
    p.add_argument("--microbatch-sizes", type=_ints, default=MICROBATCH_CANDIDATES)
    p.add_argument("--policy")
    p.add_argument("--seq-len", type=int, default=DEFAULT_SEQ_LEN)
    p.add_argument("--costs", type=Path)
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="end-to-end run from a TOML config")
    p.add_argument("config", type=Path)
    _add_cache_arg(p)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except NoFeasiblePlanError as e:
        logger.error("No feasible plan: %s", e)
        for row in rejection_rows(e.reasons):
            logger.error("  dp=%(dp)d tmp=%(tmp)d pmp=%(pmp)d mb=%(mb)d: %(reason)s", row)
        return EXIT_NO_PLAN
    except (TriPlanError, FileNotFoundError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
