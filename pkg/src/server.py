#!/usr/bin/env python3
"""
PINN Pipeline MCP Server
Exposes training, evaluation, ablation, diagnostics and reference generation as tools
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

from fastmcp import FastMCP
from pydantic import ValidationError

from . import __version__
from .engine import experiments
from .engine.cache import get_default_cache
from .engine.config import (
    EvalConfig,
    RunConfig,
    ablation_workers,
    cache_directory,
    configure_logging,
    load_environment,
    runs_directory,
)

# Load environment variables without overriding existing ones
load_environment(Path(__file__).parent)
configure_logging()
logger = logging.getLogger(__name__)

# Initialize MCP server
mcp = FastMCP(name="PinnPipelineMCP")


def _error(e: Exception) -> Dict[str, Any]:
    if isinstance(e, ValidationError):
        fields = [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()]
        return {"status": "error", "error": "Invalid configuration", "fields": fields}
    return {"status": "error", "error": str(e)}


def _run_config(config: Dict[str, Any], seed: Optional[int], output_dir: Optional[str]) -> RunConfig:
    run_config = RunConfig.model_validate(config)
    updates: Dict[str, Any] = {}
    if seed is not None:
        updates["seed"] = seed
    if output_dir is not None:
        updates["output_dir"] = output_dir
    elif "output_dir" not in config:
        updates["output_dir"] = str(runs_directory() / f"{run_config.problem.name}-seed{updates.get('seed', run_config.seed)}")
    return run_config.model_copy(update=updates) if updates else run_config


# ==================== Server Tools ====================


@mcp.tool(
    name="get_server_status",
    description="""Get the current status of the PINN pipeline server.

## Returns
• Server name and version
• Reference cache directory and entry count
• Runs directory

## Use Cases
• Health check
• Verify the cache and runs locations before a long job

## Related Tools
• Use `get_server_config` for configuration details""",
    title="Server Status",
    annotations={"title": "Server Status"},
)
def get_server_status() -> Dict[str, Any]:
    """Get the status of the pipeline server"""
    status: Dict[str, Any] = {"server": "PinnPipelineMCP", "version": __version__, "services": {}}
    try:
        status["services"]["reference_cache"] = {"status": "active", **get_default_cache().info()}
    except OSError as e:
        status["services"]["reference_cache"] = {"status": "error", "error": str(e)}
    status["services"]["runs"] = {"status": "active", "directory": str(runs_directory())}
    return status


@mcp.tool(
    name="get_server_config",
    description="""Get the current server configuration.

## Returns
• Debug mode status
• Reference cache directory
• Runs directory
• Ablation worker count
• Whether benchmark tests are enabled

## Use Cases
• Check configuration
• Debug environment issues

## Related Tools
• Use `get_server_status` for service health""",
    title="Server Configuration",
    annotations={"title": "Server Configuration"},
)
def get_server_config() -> Dict[str, Any]:
    """Get the current server configuration"""
    return {
        "debug_mode": os.getenv("DEBUG", "false").lower() == "true",
        "cache_dir": str(cache_directory()),
        "runs_dir": str(runs_directory()),
        "ablation_workers": ablation_workers(),
        "run_benchmarks": os.getenv("PINN_RUN_BENCHMARKS", "false").lower() == "true",
    }


# ==================== Problem Tools ====================


@mcp.tool(
    name="list_problems",
    description="""List the registered PDE problems.

## Returns
• Problem name, domain and time span
• Default constants
• Boundary treatment (hard periodic or loss term)
• Whether an analytic solution is available

## Use Cases
• Choose a problem for `train_model`
• Look up constant names for overrides

## Related Tools
• Use `generate_reference` to precompute a reference grid""",
    title="List Problems",
    annotations={"title": "List Problems"},
)
def list_problems() -> Dict[str, Any]:
    """List registered problems"""
    return {"problems": experiments.list_problems()}


@mcp.tool(
    name="generate_reference",
    description="""Compute or fetch a cached reference solution grid.

## Parameters
• name: Problem name (see `list_problems`)
• overrides: Constant overrides, e.g. {"diffusion": 1e-4}
• t_max: Time horizon override
• nt, nx: Grid size (default 101 × 256)
• n_modes: Spectral modes for the solver (default 512)
• out_path: Optional file to save the grid to

## Returns
• Grid shape and provenance
• Maximum absolute value

## Use Cases
• Warm the reference cache before training
• Export a grid for plotting

## Related Tools
• Use `get_cache_stats` to check cache hits""",
    title="Generate Reference",
    annotations={"title": "Generate Reference"},
)
def generate_reference(
    name: str,
    overrides: Optional[Dict[str, float]] = None,
    t_max: Optional[float] = None,
    nt: int = 101,
    nx: int = 256,
    n_modes: int = 512,
    out_path: Optional[str] = None,
) -> Dict[str, Any]:
    """Compute a reference grid"""
    try:
        eval_config = EvalConfig(nt=nt, nx=nx, n_modes=n_modes)
        return experiments.generate_reference(name, overrides, t_max, eval_config, out_path)
    except Exception as e:
        logger.error(f"Error generating reference for {name}: {e}")
        return _error(e)


# ==================== Training Tools ====================


@mcp.tool(
    name="train_model",
    description="""Train a physics-informed network from a run configuration.

## Parameters
• config: Run configuration mapping (same schema as the YAML config files)
• seed: Optional seed override
• output_dir: Optional output directory (defaults under PINN_RUNS_DIR)
• dry_run: Validate the configuration without training

## Returns
• Output directory
• Final step and losses
• Relative L2 error against the reference (when one exists)
• Wall-clock run time

## Use Cases
• Run a single training job
• Validate a configuration before a long run

## Related Tools
• Use `evaluate_checkpoint` to score a saved checkpoint
• Use `run_ablation` to compare component removals

⚠️ **Note**: Training blocks until finished; desk-scale configs take minutes""",
    title="Train Model",
    annotations={"title": "Train Model"},
)
def train_model(
    config: Dict[str, Any],
    seed: Optional[int] = None,
    output_dir: Optional[str] = None,
    dry_run: bool = False,
) -> Dict[str, Any]:
    """Train a model"""
    try:
        run_config = _run_config(config, seed, output_dir)
        return experiments.run_training(run_config, dry_run=dry_run)
    except Exception as e:
        logger.error(f"Training failed: {e}")
        return _error(e)


@mcp.tool(
    name="evaluate_checkpoint",
    description="""Evaluate a checkpoint against its problem's reference solution.

## Parameters
• checkpoint_path: Path to a checkpoint file
• output_dir: Where to write prediction, reference and error grids
• nt, nx: Evaluation grid size

## Returns
• Relative L2 error
• Checkpoint step
• Paths of the written grids

## Use Cases
• Score a finished or interrupted run
• Export prediction and error fields

## Related Tools
• Use `diagnose_checkpoint` for training-pathology diagnostics""",
    title="Evaluate Checkpoint",
    annotations={"title": "Evaluate Checkpoint"},
)
def evaluate_checkpoint(
    checkpoint_path: str, output_dir: Optional[str] = None, nt: int = 101, nx: int = 256
) -> Dict[str, Any]:
    """Evaluate a checkpoint"""
    try:
        return experiments.evaluate_checkpoint(checkpoint_path, output_dir, EvalConfig(nt=nt, nx=nx))
    except Exception as e:
        logger.error(f"Error evaluating {checkpoint_path}: {e}")
        return _error(e)


@mcp.tool(
    name="run_ablation",
    description="""Run an ablation table: full pipeline, each single removal, and all removed.

## Parameters
• config: Run configuration mapping
• toggles: Components to ablate (fourier, rwf, grad_norm, ntk, causal, modified_mlp, time_period)
• output_dir: Where to write ablation.csv and ablation.json
• parallel: Run rows in a process pool (timings marked unreliable)

## Returns
• One row per configuration with status, relative L2 and run time
• Whether timings are comparable

## Use Cases
• Measure each component's contribution

## Related Tools
• Use `train_model` for a single run""",
    title="Run Ablation",
    annotations={"title": "Run Ablation"},
)
def run_ablation(
    config: Dict[str, Any],
    toggles: List[str],
    output_dir: Optional[str] = None,
    parallel: bool = False,
) -> Dict[str, Any]:
    """Run an ablation"""
    try:
        run_config = _run_config(config, None, output_dir)
        return experiments.run_ablation(run_config, toggles, parallel=parallel)
    except Exception as e:
        logger.error(f"Ablation failed: {e}")
        return _error(e)


@mcp.tool(
    name="diagnose_checkpoint",
    description="""Run training-pathology diagnostics on a checkpoint.

## Parameters
• checkpoint_path: Path to a checkpoint file
• which: Any of "ntk", "grads", "temporal" (default all)
• batch: Points per term for NTK spectra (at most 200)

## Returns
• NTK eigenvalues and traces per loss term
• Log-binned gradient histograms per loss term
• Mean residual per temporal chunk
• Path of the metrics file the records were appended to

## Use Cases
• Inspect loss-term imbalance
• Check causality violations in the residual

## Related Tools
• Use `evaluate_checkpoint` for the error against the reference""",
    title="Diagnose Checkpoint",
    annotations={"title": "Diagnose Checkpoint"},
)
def diagnose_checkpoint(
    checkpoint_path: str, which: Optional[List[str]] = None, batch: int = 64
) -> Dict[str, Any]:
    """Diagnose a checkpoint"""
    try:
        return experiments.diagnose_checkpoint(checkpoint_path, which or experiments.DIAGNOSTICS, batch)
    except Exception as e:
        logger.error(f"Error diagnosing {checkpoint_path}: {e}")
        return _error(e)


# ==================== Cache Tools ====================


@mcp.tool(
    name="get_cache_stats",
    description="""Get reference cache statistics.

## Returns
• Hit/miss rates
• Average hit times
• Error counts (corrupt entries)
• Total requests

## Use Cases
• Check that references are reused across runs

## Related Tools
• Use `clear_cache` to clear cache entries""",
    title="Cache Statistics",
    annotations={"title": "Cache Statistics"},
)
def get_cache_stats() -> Dict[str, Any]:
    """Get cache statistics"""
    cache = get_default_cache()
    return {**cache.get_stats().to_dict(), **cache.info()}


@mcp.tool(
    name="clear_cache",
    description="""Clear reference cache entries by pattern or all entries.

## Parameters
• pattern: Pattern to match keys (e.g., "oracle:ks:*"). If not provided, clears ALL entries.

## Use Cases
• Force regeneration of reference solutions

## Related Tools
• Use `get_cache_stats` to view cache metrics""",
    title="Clear Cache",
    annotations={"title": "Clear Cache"},
)
def clear_cache(pattern: Optional[str] = None) -> Dict[str, Any]:
    """Clear cache entries"""
    cache = get_default_cache()
    deleted = cache.delete_pattern(pattern) if pattern else cache.clear()
    cache.reset_stats()
    return {"status": "success", "deleted": deleted, "pattern": pattern or "*"}


if __name__ == "__main__":
    logger.info("Starting PinnPipelineMCP server...")
    logger.info(f"Reference cache: {cache_directory()}")
    mcp.run()
