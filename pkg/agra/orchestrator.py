"""
Protocol orchestrator and worker nodes.

One graph run evaluates one (method, target) cell of the benchmark. The
orchestrator inspects state["work"], queues the next step as a `next_*` key,
and the router dispatches to the worker that consumes it. Workers never
raise: a failure is recorded in work and the orchestrator ends the run.
"""

import json
from pathlib import Path

from schemas import DatasetManifest, RunConfig
from state import ProtocolState
from agra.benchmark import baseline_dt, baseline_plft, dt_model, evaluate_accuracy, mmd_by_mode
from agra.config import config_hash
from agra.data import load_manifest, manifest_fingerprint
from agra.errors import ConfigError
from agra.training import load_checkpoint, train_stage1, train_stage2

MAX_STEPS = 10

# work key -> node that consumes it
NEXT_KEYS = {
    "next_stage1": "Stage1_Trainer",
    "next_stage2": "Stage2_Trainer",
    "next_plft": "PLFT_Trainer",
    "next_evaluate": "Evaluator",
    "next_mmd": "MMD_Diagnostics",
}

ADAPTED_METHODS = ("agra", "adversarial_holistic")


# ---------------------------
# Debug Helper
# ---------------------------
def debug_state(node_name: str, state: ProtocolState) -> None:
    print(f"[{node_name}] method={state.get('method')} target={state.get('target')} "
          f"steps={state.get('steps', 0)} work={json.dumps(state.get('work', {}), default=str)}")


# ---------------------------
# Helpers
# ---------------------------
def method_config(cfg: RunConfig, method: str) -> RunConfig:
    """The configuration a method actually trains with."""
    if method == "adversarial_holistic":
        graph = cfg.graph.model_copy(update={"mode": "holistic_only"})
        return cfg.model_copy(update={"graph": graph})
    return cfg


def manifest_path(cfg: RunConfig, name: str) -> str:
    if name not in cfg.protocol.manifests:
        raise ConfigError(f"No manifest configured for dataset '{name}' (protocol.manifests)")
    return cfg.protocol.manifests[name]


def stage1_dir(cfg: RunConfig, source: DatasetManifest | None = None) -> Path:
    """Stage-1 runs are shared by every target and method with the same configuration and source data."""
    key = config_hash(cfg)
    if source is not None:
        key += f"-{manifest_fingerprint(source)}"
    return Path(cfg.output_dir) / f"stage1-{key}"


def run_dir(cfg: RunConfig, method: str, target: str) -> Path:
    return Path(cfg.output_dir) / method / target


def plan_next(method: str, work: dict) -> str | None:
    """The next work key to queue for a method, or None when the cell is complete."""
    if "stage1_checkpoint" not in work:
        return "next_stage1"
    if method in ADAPTED_METHODS and "stage2_checkpoint" not in work:
        return "next_stage2"
    if method == "plft":
        return None if "accuracy" in work else "next_plft"
    if "accuracy" not in work:
        return "next_evaluate"
    if method == "agra" and "mmd_after" not in work:
        return "next_mmd"
    return None


def _context(state: ProtocolState):
    cfg = method_config(RunConfig.model_validate(state["config"]), state["method"])
    source = load_manifest(manifest_path(cfg, cfg.protocol.source), cfg.protocol.source)
    target = load_manifest(manifest_path(cfg, state["target"]), state["target"])
    return cfg, source, target


def _fail(work: dict, key: str, node: str, error: Exception) -> dict:
    message = f"{type(error).__name__}: {error}"
    print(f"[{node}] Failed: {message}")
    work.pop(key, None)
    work["error"] = True
    work["message"] = message
    return work


# ---------------------------
# Orchestrator Node
# ---------------------------
def orchestrator_node(state: ProtocolState) -> dict:
    debug_state("Orchestrator", state)
    work = dict(state.get("work", {}))
    steps = state.get("steps", 0)

    if work.get("error"):
        return {"work": work, "steps": steps, "messages": [f"stopped: {work.get('message')}"]}
    if steps >= MAX_STEPS:
        work.update(error=True, message=f"stopped after {MAX_STEPS} steps")
        return {"work": work, "steps": steps, "messages": [work["message"]]}

    next_key = plan_next(state["method"], work)
    if next_key is None:
        return {"work": work, "steps": steps + 1, "messages": ["finished"]}
    work[next_key] = True
    return {"work": work, "steps": steps + 1, "messages": [f"queued {NEXT_KEYS[next_key]}"]}


# ---------------------------
# Worker Nodes
# ---------------------------
def call_stage1_node(state: ProtocolState) -> dict:
    debug_state("Stage1_Trainer", state)
    work = dict(state.get("work", {}))
    try:
        cfg, source, _ = _context(state)
        out_dir = stage1_dir(cfg, source)
        checkpoint = out_dir / "stage1.pt"
        if checkpoint.exists():
            print(f"[Stage1_Trainer] Reusing {checkpoint}")
        else:
            checkpoint = train_stage1(cfg, source, out_dir).checkpoint
        work["stage1_checkpoint"] = str(checkpoint)
        work.pop("next_stage1", None)
    except Exception as e:
        work = _fail(work, "next_stage1", "Stage1_Trainer", e)
    return {"work": work, "messages": ["stage 1 done" if not work.get("error") else "stage 1 failed"]}


def call_stage2_node(state: ProtocolState) -> dict:
    debug_state("Stage2_Trainer", state)
    work = dict(state.get("work", {}))
    try:
        cfg, source, target = _context(state)
        result = train_stage2(work["stage1_checkpoint"], cfg, source, target,
                              run_dir(cfg, state["method"], state["target"]))
        work["stage2_checkpoint"] = str(result.checkpoint)
        work.pop("next_stage2", None)
    except Exception as e:
        work = _fail(work, "next_stage2", "Stage2_Trainer", e)
    return {"work": work, "messages": ["stage 2 done" if not work.get("error") else "stage 2 failed"]}


def call_plft_node(state: ProtocolState) -> dict:
    debug_state("PLFT_Trainer", state)
    work = dict(state.get("work", {}))
    try:
        cfg, source, target = _context(state)
        work["accuracy"] = baseline_plft(work["stage1_checkpoint"], cfg, source, target,
                                         run_dir(cfg, state["method"], state["target"]))
        work.pop("next_plft", None)
    except Exception as e:
        work = _fail(work, "next_plft", "PLFT_Trainer", e)
    return {"work": work, "messages": ["plft done" if not work.get("error") else "plft failed"]}


def call_evaluate_node(state: ProtocolState) -> dict:
    debug_state("Evaluator", state)
    work = dict(state.get("work", {}))
    try:
        cfg, source, target = _context(state)
        if state["method"] == "dt":
            accuracy = baseline_dt(work["stage1_checkpoint"], cfg, source, target)
        else:
            model, bank, _ = load_checkpoint(work["stage2_checkpoint"], expected_stage=2)
            accuracy = evaluate_accuracy(model, bank, target, "test", cfg.train.batch_size)
        print(f"[Evaluator] {state['method']} {cfg.protocol.source} -> {state['target']}: {accuracy:.2f}%")
        work["accuracy"] = accuracy
        work.pop("next_evaluate", None)
    except Exception as e:
        work = _fail(work, "next_evaluate", "Evaluator", e)
    return {"work": work, "messages": ["evaluated" if not work.get("error") else "evaluation failed"]}


def call_mmd_node(state: ProtocolState) -> dict:
    """MMD of the adapted feature between source and target test sets, before and after stage 2."""
    debug_state("MMD_Diagnostics", state)
    work = dict(state.get("work", {}))
    try:
        cfg, source, target = _context(state)
        before_model, before_bank = dt_model(work["stage1_checkpoint"], cfg, source, target)
        after_model, after_bank, _ = load_checkpoint(work["stage2_checkpoint"], expected_stage=2)
        work["mmd_before"] = mmd_by_mode(before_model, before_bank, source, target, cfg.mmd, modes=("AGRA",))["AGRA"]
        work["mmd_after"] = mmd_by_mode(after_model, after_bank, source, target, cfg.mmd, modes=("AGRA",))["AGRA"]
        work.pop("next_mmd", None)
    except Exception as e:
        # accuracy stays valid when MMD fails
        print(f"[MMD_Diagnostics] Failed: {type(e).__name__}: {e}")
        work.pop("next_mmd", None)
        work["mmd_after"] = None
        work["mmd_error"] = f"{type(e).__name__}: {e}"
    return {"work": work, "messages": ["mmd done" if "mmd_error" not in work else "mmd failed"]}
