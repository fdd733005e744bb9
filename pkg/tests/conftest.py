"""Shared fixtures and configuration for tests"""

import math

import numpy as np
import pytest
from unittest.mock import MagicMock

from src.engine.autodiff import ParamVector
from src.engine.config import NetworkConfig, RunConfig
from src.engine.nets import Network, build_network, init_glorot


# ============================================================================
# Environment
# ============================================================================


@pytest.fixture(autouse=True)
def isolated_env(tmp_path, monkeypatch):
    """Point the reference cache and runs directories at a per-test temp dir"""
    monkeypatch.setenv("PINN_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.setenv("PINN_RUNS_DIR", str(tmp_path / "runs"))
    monkeypatch.delenv("DEBUG", raising=False)
    monkeypatch.delenv("PINN_ABLATION_WORKERS", raising=False)
    yield tmp_path


# ============================================================================
# Network Fixtures
# ============================================================================


@pytest.fixture
def network_config():
    """Factory for small network configs; keyword arguments override the defaults"""

    def make(**overrides) -> NetworkConfig:
        data = {"arch": "plain", "depth": 2, "width": 6, "activation": "tanh", "coords": ["t", "x"]}
        data.update(overrides)
        return NetworkConfig.model_validate(data)

    return make


@pytest.fixture
def make_network(network_config):
    """Factory building a seeded small network"""

    def make(seed: int = 0, time_length: float = 1.0, **overrides) -> Network:
        return build_network(network_config(**overrides), seed, time_length=time_length)

    return make


def single_neuron(activation: str = "tanh", weights=(1.0,), bias: float = 0.0, coords=("x",)) -> Network:
    """u = act(w · coords + bias) with a unit output layer"""
    config = NetworkConfig(arch="plain", depth=1, width=1, activation=activation, coords=list(coords))
    net = init_glorot(config, 0)
    params = ParamVector.from_structured(
        net.layout,
        {
            "dense_0/W": np.array(weights, dtype=np.float64).reshape(len(coords), 1),
            "dense_0/b": np.array([bias]),
            "dense_1/W": np.ones((1, 1)),
            "dense_1/b": np.zeros(1),
        },
    )
    return net.with_params(params)


def traveling_sine(c: float) -> Network:
    """Network computing sin(x - c t) exactly on (t, x) inputs"""
    return single_neuron("sin", weights=(-c, 1.0), coords=("t", "x"))


def constant_network(value, coords=("t", "x")) -> Network:
    """All weights zero and output bias ``value``; a sequence gives one output per entry"""
    outputs = np.atleast_1d(np.asarray(value, dtype=np.float64))
    config = NetworkConfig(arch="plain", depth=1, width=3, activation="tanh", coords=list(coords), output_dim=outputs.size)
    net = init_glorot(config, 0)
    tensors = {name: np.zeros(shape) for name, shape in ((s.name, s.shape) for s in net.layout.segments)}
    tensors["dense_1/b"] = outputs
    return net.with_params(ParamVector.from_structured(net.layout, tensors))


@pytest.fixture
def sine_network():
    return traveling_sine


# ============================================================================
# Run Config Fixtures
# ============================================================================


@pytest.fixture
def run_config(tmp_path):
    """Factory for tiny run configs: a few steps on a few points"""

    def make(**overrides) -> RunConfig:
        data = {
            "problem": {"name": "advection", "overrides": {"c": 1.0}},
            "network": {
                "arch": "plain",
                "depth": 2,
                "width": 8,
                "coords": ["t", "x"],
                "periodic": {"periods": {"x": 2.0 * math.pi}},
            },
            "weighting": {"mode": "grad_norm", "causal": True, "chunks": 4, "update_every": 2},
            "optimizer": {"learning_rate": 1e-3, "steps": 4},
            "batch": {"n_ic": 8, "n_bc": 4, "n_r": 16},
            "eval": {"nt": 5, "nx": 16},
            "seed": 0,
            "output_dir": str(tmp_path / "run"),
            "log_every": 1,
        }
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return RunConfig.model_validate(data)

    return make


@pytest.fixture
def heat_config(run_config):
    """Tiny run on the Dirichlet heat problem, which has a boundary loss term"""

    def make(**overrides) -> RunConfig:
        base = {
            "problem": {"name": "heat_dirichlet", "overrides": {}},
            "network": {"arch": "plain", "depth": 2, "width": 8, "coords": ["t", "x"]},
        }
        base.update(overrides)
        return run_config(**base)

    return make


# ============================================================================
# Server Fixtures
# ============================================================================


@pytest.fixture
def mock_fastmcp():
    """Mock FastMCP server"""
    mock_mcp = MagicMock()
    mock_mcp.tool = MagicMock(return_value=lambda func: func)
    return mock_mcp
