"""
Graph building module for the benchmark protocol.
Defines the LangGraph workflow and the driver that runs it over every cell.
"""

import time
from pathlib import Path

import pandas as pd
from langgraph.graph import END, START, StateGraph

from schemas import BenchmarkReport, ReportRow, RunConfig
from state import ProtocolState
from agra.benchmark import write_report
from agra.config import artifact_header, config_hash, dump_config
from agra.errors import ConfigError
from agra.orchestrator import (
    NEXT_KEYS,
    call_evaluate_node,
    call_mmd_node,
    call_plft_node,
    call_stage1_node,
    call_stage2_node,
    manifest_path,
    method_config,
    orchestrator_node,
)


def next_step_router(state: ProtocolState) -> str:
    """
    Route to the worker whose `next_*` key is queued in state.work.

    Returns:
        Next node name or END
    """
    work = state.get("work", {})
    if work.get("error"):
        return END
    for key, node in NEXT_KEYS.items():
        if key in work:
            return node
    return END


def build_graph():
    """
    Builds and compiles the protocol workflow graph.

    Returns:
        Compiled LangGraph application
    """
    builder = StateGraph(ProtocolState)

    builder.add_node("Orchestrator", orchestrator_node)
    builder.add_node("Stage1_Trainer", call_stage1_node)
    builder.add_node("Stage2_Trainer", call_stage2_node)
    builder.add_node("PLFT_Trainer", call_plft_node)
    builder.add_node("Evaluator", call_evaluate_node)
    builder.add_node("MMD_Diagnostics", call_mmd_node)

    builder.add_edge(START, "Orchestrator")
    builder.add_conditional_edges(
        "Orchestrator",
        next_step_router,
        {**{node: node for node in NEXT_KEYS.values()}, END: END},
    )
    # every worker reports back to the orchestrator
    for node in NEXT_KEYS.values():
        builder.add_edge(node, "Orchestrator")

    return builder.compile()


app = build_graph()


def run_cell(cfg: RunConfig, method: str, target: str, work: dict | None = None) -> dict:
    """Run one (method, target) cell; returns the final work dict."""
    state = {
        "config": cfg.model_dump(mode="json"),
        "method": method,
        "target": target,
        "messages": [],
        "work": dict(work or {}),
        "steps": 0,
    }
    try:
        result = app.invoke(state)
    except Exception as e:
        return {"error": True, "message": f"{type(e).__name__}: {e}"}
    return result["work"]


def run_protocol(cfg: RunConfig) -> BenchmarkReport:
    """
    Evaluate every configured method on every target and write the report.

    A failing cell is recorded in its row's `failures` and the run continues.
    """
    for name in [cfg.protocol.source, *cfg.protocol.targets]:
        path = manifest_path(cfg, name)
        if not Path(path).exists():
            raise ConfigError(f"Manifest for '{name}' not found: {path}")

    start = time.perf_counter()
    dump_config(cfg, Path(cfg.output_dir) / "config.yaml")
    print(f"[PROTOCOL] {cfg.protocol.source} -> {cfg.protocol.targets} with methods {cfg.protocol.methods}")

    rows: list[ReportRow] = []
    stage1_checkpoints: dict[str, str] = {}
    for method in cfg.protocol.methods:
        key = config_hash(method_config(cfg, method))
        accuracies, failures, mmd_before, mmd_after = {}, {}, {}, {}
        for target in cfg.protocol.targets:
            seed_work = {"stage1_checkpoint": stage1_checkpoints[key]} if key in stage1_checkpoints else {}
            work = run_cell(cfg, method, target, seed_work)
            if "stage1_checkpoint" in work:
                stage1_checkpoints[key] = work["stage1_checkpoint"]
            if work.get("error"):
                accuracies[target] = None
                failures[target] = work.get("message", "unknown failure")
                print(f"[PROTOCOL] {method} on {target} failed: {failures[target]}")
                continue
            accuracies[target] = work["accuracy"]
            if work.get("mmd_after") is not None:
                mmd_before[target] = work["mmd_before"]
                mmd_after[target] = work["mmd_after"]

        measured = [acc for acc in accuracies.values() if acc is not None]
        rows.append(ReportRow(
            method=method,
            source=cfg.protocol.source,
            backbone=cfg.backbone.name,
            accuracies=accuracies,
            failures=failures,
            mean=sum(measured) / len(measured) if measured else None,
            mmd_before=mmd_before,
            mmd_after=mmd_after,
        ))

    header = artifact_header(cfg)
    report = BenchmarkReport(
        rows=rows,
        targets=list(cfg.protocol.targets),
        config=cfg.model_dump(mode="json"),
        config_hash=header["config_hash"],
        seed=header["seed"],
        wall_clock=time.perf_counter() - start,
    )
    write_report(report, cfg.output_dir)
    return report


def sweep_seeds(cfg: RunConfig, seeds: list[int]) -> pd.DataFrame:
    """
    Run the protocol once per seed.

    Returns:
        One row per (method, target): accuracy mean / std / count over the seeds
        that succeeded, plus the mean MMD before and after adaptation (NaN for
        methods without MMD diagnostics)
    """
    nan = float("nan")
    records = []
    for seed in seeds:
        seeded = cfg.model_copy(update={"seed": seed, "output_dir": str(Path(cfg.output_dir) / f"seed-{seed}")})
        report = run_protocol(seeded)
        for row in report.rows:
            for target, acc in row.accuracies.items():
                records.append({
                    "seed": seed,
                    "method": row.method,
                    "target": target,
                    "accuracy": nan if acc is None else acc,
                    "mmd_before": row.mmd_before.get(target, nan),
                    "mmd_after": row.mmd_after.get(target, nan),
                })
    frame = pd.DataFrame(records)
    return frame.groupby(["method", "target"], sort=False).agg(
        mean=("accuracy", "mean"),
        std=("accuracy", "std"),
        count=("accuracy", "count"),
        mmd_before=("mmd_before", "mean"),
        mmd_after=("mmd_after", "mean"),
    ).reset_index()
