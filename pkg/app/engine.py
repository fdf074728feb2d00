"""
engine.py — End-to-end planning run driven by a TOML file.

    [graph]   path = "model.json"            or  generator = "gpt", layers, hidden
    [search]  world_size, global_batch, ...  (SearchSpace fields)
    [costs]   time_per_param_sample, p2p_bandwidth, dp_bandwidth, tmp_bandwidth, head_extra
    [output]  dir, cache_dir

Values are type-checked strictly: `world_size = "8"` is an input error, not
a silent conversion. A bandwidth of 0 makes that transfer free.

Artifacts: the sharding cache plus best_plan.json, schedule.json, trace.json
and report.json in the output directory.
"""

import logging

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, ValidationError

from config.settings import (
    BEST_PLAN_FILE,
    CACHE_DIR,
    DEFAULT_POLICY,
    DEFAULT_SEQ_LEN,
    DP_BANDWIDTH,
    MICROBATCH_CANDIDATES,
    OUTPUT_DIR,
    P2P_BANDWIDTH,
    PIPELINE_LOG_NAME,
    RECOMPUTE_STEP,
    REPORT_FILE,
    SCHEDULE_FILE,
    TIME_PER_PARAM_SAMPLE,
    TMP_BANDWIDTH,
    TRACE_FILE,
)
from planner.errors import ConfigError, NoFeasiblePlanError, TriPlanError
from planner.graph_core import ModelGraph, generate_gpt_graph, load_graph
from planner.report import plan_rows, rejection_rows
from planner.schedule import PipelineConfig, build_schedule, table_to_dict
from planner.search import CostTemplate, SearchSpace, infer_hidden, plan
from planner.simulator import trace_document
from storage.artifacts import write_json_atomic

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_NO_PLAN = 2


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)


class GraphSection(_Section):
    path: Optional[str] = None
    generator: Optional[str] = None
    layers: Optional[int] = None
    hidden: Optional[int] = None
    with_head: bool = True
    vocab_size: int = 0
    common_threshold: Optional[int] = None
    k: Optional[int] = None


class SearchSection(_Section):
    world_size: int
    global_batch: int
    tmp_candidates: Optional[list[int]] = None
    microbatch_candidates: list[int] = list(MICROBATCH_CANDIDATES)
    capacity: Optional[float] = None
    pmp_candidates: Optional[list[int]] = None
    policy: str = DEFAULT_POLICY
    seq_len: int = DEFAULT_SEQ_LEN
    hidden: Optional[int] = None
    recompute_step: float = RECOMPUTE_STEP


class CostsSection(_Section):
    time_per_param_sample: float = TIME_PER_PARAM_SAMPLE
    p2p_bandwidth: Optional[float] = P2P_BANDWIDTH
    dp_bandwidth: Optional[float] = DP_BANDWIDTH
    tmp_bandwidth: Optional[float] = TMP_BANDWIDTH
    head_extra: float = 0.0


class OutputSection(_Section):
    dir: Optional[str] = None
    cache_dir: Optional[str] = None


@dataclass
class RunConfig:
    graph: dict
    space: SearchSpace
    costs: CostTemplate
    out_dir: Path
    cache_dir: Path
    base_dir: Path = field(default_factory=Path.cwd)


def _check_keys(section: str, table: dict, allowed) -> None:
    unknown = set(table) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")


def _section(name: str, model: type[_Section], table) -> dict:
    """The keys set in `table`, checked against `model`."""
    if not isinstance(table, dict):
        raise ConfigError(f"[{name}] must be a table")
    try:
        return model.model_validate(table).model_dump(exclude_unset=True)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"invalid [{name}]: {problems}") from e


def _as_tuple(value):
    return tuple(value) if isinstance(value, list) else value


def cost_template_from(table: dict) -> CostTemplate:
    return CostTemplate(**_section("costs", CostsSection, table))


def load_cost_template(path) -> CostTemplate:
    document = _read_toml(path)
    _check_keys("root", document, {"costs"})
    return cost_template_from(document.get("costs", {}))


def _read_toml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found at {path}")
    try:
        with path.open("rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        logger.exception("Failed to parse %s", path)
        raise ConfigError(f"{path} is not valid TOML: {e}") from e


def load_run_config(path, out_dir=None, cache_dir=None) -> RunConfig:
    path = Path(path)
    document = _read_toml(path)
    _check_keys("root", document, {"graph", "search", "costs", "output"})

    graph = _section("graph", GraphSection, document.get("graph", {}))
    if ("path" in graph) == ("generator" in graph):
        raise ConfigError("[graph] needs exactly one of 'path' or 'generator'")

    search = _section("search", SearchSection, document.get("search", {}))
    try:
        space = SearchSpace(**{k: _as_tuple(v) for k, v in search.items()})
    except TriPlanError as e:
        raise ConfigError(f"invalid [search]: {e}") from e

    output = _section("output", OutputSection, document.get("output", {}))
    base = path.parent
    out = Path(out_dir) if out_dir else (base / output["dir"] if "dir" in output else OUTPUT_DIR)
    cache = Path(cache_dir) if cache_dir else (base / output["cache_dir"] if "cache_dir" in output else CACHE_DIR)

    return RunConfig(
        graph=graph,
        space=space,
        costs=cost_template_from(document.get("costs", {})),
        out_dir=out,
        cache_dir=cache,
        base_dir=base,
    )


def resolve_graph(graph_cfg: dict, base_dir: Path) -> ModelGraph:
    threshold = graph_cfg.get("common_threshold")
    if "path" in graph_cfg:
        return load_graph(base_dir / graph_cfg["path"], threshold)
    if graph_cfg["generator"] != "gpt":
        raise ConfigError(f"unknown graph generator {graph_cfg['generator']!r}")
    if "layers" not in graph_cfg or "hidden" not in graph_cfg:
        raise ConfigError("the gpt generator needs layers and hidden")
    return generate_gpt_graph(
        graph_cfg["layers"],
        graph_cfg["hidden"],
        with_head=graph_cfg.get("with_head", True),
        vocab_size=graph_cfg.get("vocab_size", 0),
    )


def run_pipeline(cfg: RunConfig) -> dict[str, Path]:
    logger.info("Pipeline started")

    # ── Step 1: Graph ────────────────────────────────────────────────────
    logger.info("Starting graph step")
    graph = resolve_graph(cfg.graph, cfg.base_dir)
    logger.info("Graph loaded: %d nodes, %d layers", len(graph.nodes), graph.layer_count)

    # ── Step 2: Shard, assign, tune and simulate every configuration ────
    logger.info("Starting search step")
    outcome = plan(graph, cfg.space, cfg.costs, k=cfg.graph.get("k"), cache_dir=cfg.cache_dir)
    best = outcome.best
    logger.info("Search completed successfully")

    # ── Step 3: Artifacts ────────────────────────────────────────────────
    logger.info("Starting artifact step")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    best_plan = best.plan.to_dict()
    best_plan["makespan"] = float(best.makespan)
    best_plan["seq_len"] = cfg.space.seq_len
    best_plan["hidden"] = cfg.space.hidden or infer_hidden(graph)
    table = build_schedule(best.plan.policy, PipelineConfig(best.plan.pmp, best.plan.num_microbatches))

    artifacts = {
        "best_plan": write_json_atomic(cfg.out_dir / BEST_PLAN_FILE, best_plan),
        "schedule": write_json_atomic(cfg.out_dir / SCHEDULE_FILE, table_to_dict(table)),
        "trace": write_json_atomic(cfg.out_dir / TRACE_FILE, trace_document(best.result), indent=None),
        "report": write_json_atomic(cfg.out_dir / REPORT_FILE, {
            "feasible": len(outcome.plans),
            "plans": plan_rows(outcome.plans),
            "rejected": rejection_rows(outcome.rejected),
        }),
    }
    logger.info("Pipeline completed successfully")
    return artifacts


def end_to_end(config_path, out_dir=None, cache_dir=None) -> int:
    """Exit status 0 on success, 1 on bad input, 2 when nothing is feasible."""
    try:
        cfg = load_run_config(config_path, out_dir, cache_dir)
        # a missing graph must leave the output directory untouched
        if "path" in cfg.graph and not (cfg.base_dir / cfg.graph["path"]).exists():
            raise FileNotFoundError(f"graph file not found at {cfg.base_dir / cfg.graph['path']}")

        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(cfg.out_dir / PIPELINE_LOG_NAME, encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger().addHandler(handler)
        try:
            run_pipeline(cfg)
        finally:
            logging.getLogger().removeHandler(handler)
            handler.close()
    except NoFeasiblePlanError as e:
        logger.error("No feasible plan: %s", e)
        for config, reason in sorted(e.reasons.items()):
            logger.error("  dp=%d tmp=%d pmp=%d mb=%d: %s", *config, reason)
        return EXIT_NO_PLAN
    except (TriPlanError, FileNotFoundError) as e:
        logger.error("Run failed: %s", e)
        return EXIT_INPUT_ERROR
    return EXIT_OK
