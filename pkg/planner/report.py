"""
report.py — Ranked plan tables as text, JSON or markdown.
"""

import json
import logging

import pandas as pd

from planner.errors import DomainError

logger = logging.getLogger(__name__)

FORMATS = ("text", "json", "markdown")

COLUMNS = [
    "rank", "dp", "tmp", "pmp", "mb", "m", "policy", "makespan",
    "bubble_fraction", "critical_stage", "peak_memory", "alphas", "tmp_speedup",
]


def plan_rows(plans) -> list[dict]:
    rows = []
    for rank, entry in enumerate(plans, start=1):
        p, r = entry.plan, entry.result
        rows.append({
            "rank": rank,
            "dp": p.dp,
            "tmp": p.tmp,
            "pmp": p.pmp,
            "mb": p.microbatch_size,
            "m": p.num_microbatches,
            "policy": p.policy.value,
            "makespan": float(r.makespan),
            "bubble_fraction": round(float(r.bubble_fraction), 6),
            "critical_stage": r.critical_stage,
            "peak_memory": [st.peak_memory_bytes for st in r.per_stage],
            "alphas": [round(a, 4) for a in p.recompute.alphas],
            "tmp_speedup": round(entry.tmp_speedup, 4) if entry.tmp_speedup is not None else None,
        })
    return rows


def plans_frame(plans) -> pd.DataFrame:
    return pd.DataFrame(plan_rows(plans), columns=COLUMNS)


def rejection_rows(rejected: dict) -> list[dict]:
    return [
        {"dp": dp, "tmp": tmp, "pmp": pmp, "mb": mb, "reason": reason}
        for (dp, tmp, pmp, mb), reason in sorted(rejected.items())
    ]


def rejections_frame(rejected: dict) -> pd.DataFrame:
    return pd.DataFrame(rejection_rows(rejected), columns=["dp", "tmp", "pmp", "mb", "reason"])


def stage_frame(result) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "stage": j,
                "busy": float(st.busy),
                "idle": float(st.idle),
                "peak_memory_bytes": st.peak_memory_bytes,
            }
            for j, st in enumerate(result.per_stage)
        ],
        columns=["stage", "busy", "idle", "peak_memory_bytes"],
    )


def markdown_table(frame: pd.DataFrame) -> str:
    return frame.to_markdown(index=False, missingval="")


def report(plans, format: str = "text", rejected: dict | None = None) -> str:
    if format not in FORMATS:
        raise DomainError(f"unknown report format {format!r}; expected one of {FORMATS}")
    rejected = rejected or {}
    frame = plans_frame(plans)
    reasons = rejections_frame(rejected)

    if format == "json":
        document = {
            "feasible": len(frame),
            "plans": plan_rows(plans),
            "rejected": rejection_rows(rejected),
        }
        return json.dumps(document, indent=2)

    if format == "markdown":
        parts = [f"## Feasible plans ({len(frame)})", ""]
        parts.append(markdown_table(frame) if len(frame) else "No feasible configuration.")
        if len(reasons):
            parts += ["", f"## Rejected configurations ({len(reasons)})", "", markdown_table(reasons)]
        return "\n".join(parts)

    parts = [f"Feasible plans: {len(frame)}"]
    parts.append(frame.to_string(index=False) if len(frame) else "No feasible configuration.")
    if len(reasons):
        parts += [f"Rejected configurations: {len(reasons)}", reasons.to_string(index=False)]
    return "\n".join(parts)
