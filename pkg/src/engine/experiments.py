"""
Experiment drivers shared by the command line and the tool server.

Every function takes plain arguments and returns a JSON-able dictionary.
"""

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import diag
from .checkpoint import Checkpoint, load_checkpoint
from .config import EvalConfig, RunConfig, ablation_workers
from .errors import InvalidProblem
from .metrics import DiagnosticRecord, MetricsWriter, SummaryRecord
from .oracle import GridSolution, evaluate_on_grid, reference_solution, relative_l2
from .problems import PROBLEMS, ProblemSpec, get_problem
from .train import run_curriculum

logger = logging.getLogger(__name__)

ABLATION_TOGGLES = ("fourier", "rwf", "grad_norm", "ntk", "causal", "modified_mlp", "time_period")
DIAGNOSTICS = ("ntk", "grads", "temporal")


# ========== PROBLEMS ==========


def problem_for(config: RunConfig) -> ProblemSpec:
    """The registered problem with the config's constant overrides and horizon"""
    return get_problem(config.problem.name, config.problem.overrides, config.problem.t_max)


def problem_from_record(record: Dict[str, Any]) -> ProblemSpec:
    """Rebuild a registered problem from its fingerprint; the time span starts at zero"""
    return get_problem(record["name"], record.get("constants"), t_max=record["t_span"][1])


def list_problems() -> List[Dict[str, Any]]:
    out = []
    for name in sorted(PROBLEMS):
        problem = get_problem(name)
        out.append(
            {
                "name": name,
                "x_span": list(problem.x_span),
                "t_span": list(problem.t_span),
                "constants": dict(problem.constants),
                "boundary": problem.bc_kind.value,
                "fields": list(problem.fields),
                "has_exact_solution": problem.exact is not None or name == "advection",
            }
        )
    return out


def _safe_reference(problem: ProblemSpec, eval_config: EvalConfig) -> Optional[GridSolution]:
    try:
        return reference_solution(problem, eval_config)
    except InvalidProblem as e:
        logger.warning(f"No reference solution: {e}")
        return None


# ========== TRAINING ==========


def run_training(
    config: RunConfig, dry_run: bool = False, out_dir: Optional[Union[str, Path]] = None
) -> Dict[str, Any]:
    """
    Train per the config's curriculum and write artifacts under the output directory.

    Artifacts: ``config.yaml`` (resolved), ``metrics.jsonl``, checkpoints and a
    summary record. ``dry_run`` validates and reports without touching files.
    """
    problem = problem_for(config)
    out = Path(out_dir or config.output_dir)
    if dry_run:
        return {
            "status": "ok",
            "dry_run": True,
            "problem": problem.fingerprint(),
            "curriculum": config.curriculum.kind,
            "output_dir": str(out),
        }

    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(config.to_yaml(), encoding="utf-8")
    final_problem = problem
    if config.curriculum.kind == "continuation":
        plan = config.curriculum.continuation
        final_problem = problem.with_constants(**{plan.constant: plan.values[-1]})
    reference = _safe_reference(final_problem, config.eval)

    started = time.perf_counter()
    logger.info(f"Starting run: problem={problem.name} seed={config.seed} out={out}")
    with MetricsWriter(out / "metrics.jsonl") as sink:
        result = run_curriculum(
            problem,
            config,
            sink=sink,
            out_dir=out,
            reference=reference if config.eval.every else None,
        )
        rel_l2 = relative_l2(result.predict_grid(reference), reference) if reference is not None else None
        run_time = time.perf_counter() - started
        last = result.records[-1] if result.records else None
        summary = SummaryRecord(
            final_step=result.state.step,
            final_losses=dict(last.losses) if last else {},
            rel_l2=rel_l2,
            run_time=run_time,
            seed=config.seed,
            problem=problem.name,
            extra={"curriculum": config.curriculum.kind, "parameters": result.network.layout.size},
        )
        sink.write(summary)

    logger.info(f"Run finished in {run_time:.1f}s: rel-L2 = {rel_l2}")
    return {"status": "ok", "output_dir": str(out), **summary.to_dict()}


# ========== EVALUATION ==========


def _window_reference(checkpoint: Checkpoint, eval_config: EvalConfig) -> Tuple[ProblemSpec, GridSolution]:
    record = checkpoint.metadata["problem"]
    problem = problem_from_record(record)
    reference = reference_solution(problem, eval_config)
    t0 = record["t_span"][0]
    if t0 > problem.t_span[0]:
        keep = reference.times >= t0 - 1e-12
        reference = GridSolution(
            times=reference.times[keep],
            xs=reference.xs,
            values=reference.values[keep],
            problem=reference.problem,
            provenance=dict(reference.provenance),
            periodic=reference.periodic,
        )
    return problem, reference


def evaluate_checkpoint(
    checkpoint_path: Union[str, Path],
    out_dir: Optional[Union[str, Path]] = None,
    eval_config: Optional[EvalConfig] = None,
) -> Dict[str, Any]:
    """
    Relative L2 of a checkpoint against its problem's reference, plus grid dumps.

    Writes ``prediction.grid``, ``reference.grid`` and ``error.grid`` (pointwise
    prediction minus reference). A missing spectral reference is generated on
    demand and cached.
    """
    checkpoint = load_checkpoint(checkpoint_path)
    eval_config = eval_config or EvalConfig()
    problem, reference = _window_reference(checkpoint, eval_config)
    prediction = evaluate_on_grid(checkpoint.network, checkpoint.state.params, reference)
    error = reference.with_values(prediction.values - reference.values, provenance={"kind": "error"})
    rel_l2 = relative_l2(prediction, reference)

    out = Path(out_dir) if out_dir else Path(checkpoint_path).parent / "eval"
    paths = {
        "prediction": str(prediction.save(out / "prediction.grid")),
        "reference": str(reference.save(out / "reference.grid")),
        "error": str(error.save(out / "error.grid")),
    }
    logger.info(f"Evaluated {checkpoint_path}: rel-L2 = {rel_l2:.4e}")
    return {"status": "ok", "problem": problem.name, "rel_l2": rel_l2, "step": checkpoint.state.step, "files": paths}


# ========== ABLATION ==========


def apply_toggles(config: RunConfig, disabled: Sequence[str]) -> RunConfig:
    """Copy of ``config`` with every named component switched off"""
    unknown = [t for t in disabled if t not in ABLATION_TOGGLES]
    if unknown:
        raise ValueError(
            f"Unknown ablation toggles: {', '.join(unknown)}.\n"
            f"Available toggles: {', '.join(ABLATION_TOGGLES)}"
        )
    config = config.model_copy(deep=True)
    network, weighting = config.network, config.weighting
    for toggle in disabled:
        if toggle == "fourier":
            network.fourier = None
        elif toggle == "rwf":
            network.rwf = None
        elif toggle in ("grad_norm", "ntk"):
            weighting.mode = "none"
        elif toggle == "causal":
            weighting.causal = False
        elif toggle == "modified_mlp":
            network.arch = "plain"
        elif toggle == "time_period" and network.periodic is not None:
            network.periodic.trainable_time = False
    return RunConfig.model_validate(config.model_dump())


def ablation_rows(toggles: Sequence[str]) -> List[Tuple[str, Tuple[str, ...]]]:
    """(row name, disabled toggles): full, one row per toggle, then all off"""
    toggles = list(dict.fromkeys(toggles))
    if not toggles:
        return [("full", ())]
    rows = [("full", ())]
    rows += [(f"no_{t}", (t,)) for t in toggles]
    rows.append(("plain", tuple(toggles)))
    return rows


def _run_row(args: Tuple[str, Tuple[str, ...], Dict[str, Any], str]) -> Dict[str, Any]:
    name, disabled, config_data, out = args
    row: Dict[str, Any] = {"row": name, "disabled": list(disabled)}
    started = time.perf_counter()
    try:
        config = apply_toggles(RunConfig.model_validate(config_data), disabled)
        config = config.model_copy(update={"output_dir": str(Path(out) / name)})
        result = run_training(config)
        row.update(status="ok", rel_l2=result["rel_l2"], final_step=result["final_step"])
    except Exception as e:
        logger.error(f"Ablation row '{name}' failed: {e}")
        row.update(status="failed", rel_l2=None, error=str(e))
    row["run_time"] = time.perf_counter() - started
    return row


def run_ablation(
    config: RunConfig,
    toggles: Sequence[str],
    out_dir: Optional[Union[str, Path]] = None,
    parallel: bool = False,
    workers: Optional[int] = None,
) -> Dict[str, Any]:
    """
    Run the full pipeline, each single-component removal, and the all-off row.

    Rows run sequentially for fair timings; with ``parallel`` they share a
    process pool and the table marks timings unreliable. Failed rows are
    recorded, not raised. The table is written as ``ablation.csv`` and
    ``ablation.json``.
    """
    apply_toggles(config, toggles)
    out = Path(out_dir or config.output_dir)
    rows = ablation_rows(toggles)
    jobs = [(name, disabled, config.model_dump(mode="json"), str(out)) for name, disabled in rows]
    logger.info(f"Ablation over {len(rows)} rows: {', '.join(name for name, _ in rows)}")
    if parallel and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers or ablation_workers()) as pool:
            table = list(pool.map(_run_row, jobs))
    else:
        table = [_run_row(job) for job in jobs]

    out.mkdir(parents=True, exist_ok=True)
    fields = ["row", "disabled", "status", "rel_l2", "run_time", "error"]
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in table:
            writer.writerow({**row, "disabled": "+".join(row["disabled"]) or "-"})
    payload = {"rows": table, "timings_reliable": not parallel, "toggles": list(toggles)}
    (out / "ablation.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return {"status": "ok", "output_dir": str(out), **payload}


# ========== DIAGNOSTICS ==========


def diagnose_checkpoint(
    checkpoint_path: Union[str, Path],
    which: Sequence[str] = DIAGNOSTICS,
    batch: int = 64,
    metrics_path: Optional[Union[str, Path]] = None,
) -> Dict[str, Any]:
    """Run the requested diagnostics on a checkpoint and append typed records to a metrics file"""
    unknown = [w for w in which if w not in DIAGNOSTICS]
    if unknown:
        raise ValueError(f"Unknown diagnostics: {', '.join(unknown)}. Choose from {', '.join(DIAGNOSTICS)}")
    checkpoint = load_checkpoint(checkpoint_path)
    record = checkpoint.metadata["problem"]
    problem = problem_from_record(record)
    if record["t_span"][0] > problem.t_span[0]:
        problem = problem.window(*record["t_span"])
    config = RunConfig.model_validate(checkpoint.metadata.get("run_config", {}))
    net, params, step = checkpoint.network, checkpoint.state.params, checkpoint.state.step

    payloads: Dict[str, Any] = {}
    for kind in which:
        if kind == "ntk":
            payloads[kind] = diag.term_spectra(problem, net, params, batch, seed=config.seed)
        elif kind == "grads":
            payloads[kind] = diag.term_gradients(problem, net, params, config, seed=config.seed)
        else:
            chunks = max(2, config.weighting.chunks)
            payloads[kind] = {"chunks": diag.temporal_residual_profile(net, params, problem, chunks).tolist()}

    target = Path(metrics_path) if metrics_path else Path(checkpoint_path).parent / "diagnostics.jsonl"
    with MetricsWriter(target, append=True) as sink:
        for kind, payload in payloads.items():
            sink.write(DiagnosticRecord(step=step, kind=kind, payload=payload))
    logger.info(f"Diagnostics {', '.join(which)} for {checkpoint_path} written to {target}")
    return {"status": "ok", "step": step, "metrics_path": str(target), "diagnostics": payloads}


# ========== REFERENCES ==========


def generate_reference(
    name: str,
    overrides: Optional[Dict[str, float]] = None,
    t_max: Optional[float] = None,
    eval_config: Optional[EvalConfig] = None,
    out_path: Optional[Union[str, Path]] = None,
) -> Dict[str, Any]:
    """Compute (or fetch from the cache) a problem's reference grid, optionally saving a copy"""
    problem = get_problem(name, overrides, t_max)
    reference = reference_solution(problem, eval_config or EvalConfig())
    result = {
        "status": "ok",
        "problem": name,
        "shape": list(reference.shape),
        "provenance": reference.provenance,
        "max_abs": float(np.max(np.abs(reference.values))),
    }
    if out_path:
        result["path"] = str(reference.save(out_path))
    return result
