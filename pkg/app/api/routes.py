'''
Routes over the planner operations. Every handler calls the same functions
the command line uses; domain errors come back as 422, an empty search as 409.
'''

import logging
from typing import Optional

from fastapi import APIRouter, HTTPException, Query
from pydantic import BaseModel, Field

from config.settings import DEFAULT_POLICY, DEFAULT_SEQ_LEN, MICROBATCH_CANDIDATES
from planner.errors import NoFeasiblePlanError, TriPlanError
from planner.graph_core import generate_gpt_graph
from planner.recompute import MemoryModel, alpha_schedule, build_plan
from planner.report import plan_rows, rejection_rows
from planner.schedule import PipelineConfig, bubble_metrics, build_schedule, table_to_dict
from planner.search import CostTemplate, SearchSpace, default_tmp_candidates, plan
from planner.simulator import simulate_policy
from planner.tmp import TmpConfig, default_tmp_cost, speedup, speedup_ceiling, subpipelined_tmp_cost

logger = logging.getLogger(__name__)

router = APIRouter()


class PlanRequest(BaseModel):
    layers: int = Field(gt=0)
    hidden: int = Field(gt=0)
    with_head: bool = True
    world_size: int = Field(gt=0)
    global_batch: int = Field(gt=0)
    capacity: Optional[float] = None
    tmp_candidates: Optional[list[int]] = None
    microbatch_candidates: list[int] = list(MICROBATCH_CANDIDATES)
    policy: str = DEFAULT_POLICY
    seq_len: int = DEFAULT_SEQ_LEN
    k: Optional[int] = None


def _unprocessable(e: TriPlanError) -> HTTPException:
    return HTTPException(status_code=422, detail=f"{type(e).__name__}: {e}")


@router.get("/bubble")
def get_bubble(policy: str = DEFAULT_POLICY, stages: int = Query(4, ge=1), microbatches: int = Query(4, ge=1)):
    try:
        cfg = PipelineConfig(stages, microbatches)
        metrics = bubble_metrics(policy, cfg)
        result = simulate_policy(policy, cfg)
    except TriPlanError as e:
        raise _unprocessable(e)
    return {
        "policy": result.policy.value,
        **metrics.to_dict(),
        "makespan": float(result.makespan),
        "critical_stage": result.critical_stage,
        "bubble_fraction": float(result.bubble_fraction),
    }


@router.get("/schedule")
def get_schedule(policy: str = DEFAULT_POLICY, stages: int = Query(4, ge=1), microbatches: int = Query(4, ge=1)):
    try:
        table = build_schedule(policy, PipelineConfig(stages, microbatches))
    except TriPlanError as e:
        raise _unprocessable(e)
    return table_to_dict(table)


@router.get("/recompute")
def get_recompute(
    stages: int = Query(..., ge=1),
    alpha1: Optional[float] = Query(None, ge=0, le=1),
    runtime_memory: Optional[float] = None,
    activation_memory: Optional[float] = None,
    capacity: Optional[float] = None,
):
    """Either expand a given alpha_1, or tune one against a capacity."""
    try:
        if alpha1 is not None:
            return {"alpha_1": alpha1, "alphas": alpha_schedule(alpha1, stages)}
        if runtime_memory is None or activation_memory is None or capacity is None:
            raise HTTPException(
                status_code=422,
                detail="give alpha1, or runtime_memory, activation_memory and capacity",
            )
        model = MemoryModel(M_r=runtime_memory, M_a=activation_memory, capacity=capacity)
        recompute = build_plan(model, stages)
    except TriPlanError as e:
        raise _unprocessable(e)
    return {
        "alpha_1": recompute.alphas[0],
        "alphas": list(recompute.alphas),
        "per_stage_memory": list(recompute.per_stage_memory),
    }


@router.get("/tmp")
def get_tmp(K: int = Query(..., ge=1), T_m: float = Query(..., gt=0), T_a: float = Query(..., ge=0)):
    try:
        cfg = TmpConfig(K=K, T_m=T_m, T_a=T_a)
    except TriPlanError as e:
        raise _unprocessable(e)
    return {
        "default": default_tmp_cost(cfg).to_dict(),
        "subpipelined": subpipelined_tmp_cost(cfg).to_dict(),
        "speedup": speedup(cfg),
        "speedup_ceiling": speedup_ceiling(T_m, T_a),
    }


@router.post("/plan")
def post_plan(request: PlanRequest):
    try:
        graph = generate_gpt_graph(request.layers, request.hidden, with_head=request.with_head)
        space = SearchSpace(
            world_size=request.world_size,
            global_batch=request.global_batch,
            tmp_candidates=tuple(request.tmp_candidates or default_tmp_candidates()),
            microbatch_candidates=tuple(request.microbatch_candidates),
            capacity=request.capacity,
            policy=request.policy,
            seq_len=request.seq_len,
        )
        outcome = plan(graph, space, CostTemplate(), k=request.k)
    except NoFeasiblePlanError as e:
        raise HTTPException(
            status_code=409,
            detail={"message": str(e), "rejected": rejection_rows(e.reasons)},
        )
    except TriPlanError as e:
        raise _unprocessable(e)
    return {
        "feasible": len(outcome.plans),
        "plans": plan_rows(outcome.plans),
        "rejected": rejection_rows(outcome.rejected),
    }
