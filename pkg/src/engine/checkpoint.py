"""
Checkpoint files.

Layout (little-endian)::

    magic     8 bytes  b"PINNCKPT"
    version   uint32
    hdr_len   uint32
    header    hdr_len bytes of UTF-8 JSON (sorted keys, compact separators)
    arrays    float64 blobs in the order of header["arrays"]

The header holds the network config, parameter layout, optimizer counters,
learning-rate schedule, loss-weight settings, the RNG state and free-form
metadata. Saving the same state twice gives identical bytes.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .autodiff import ParamLayout, ParamVector
from .config import NetworkConfig
from .errors import CheckpointError
from .nets import Network
from .weighting import LossWeights

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PINNCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    network: Network
    state: Any
    metadata: Dict[str, Any] = field(default_factory=dict)


def _encode(network: Network, state, metadata: Optional[Dict[str, Any]]) -> bytes:
    arrays: List[Tuple[str, np.ndarray]] = []
    if network.fourier_matrix is not None:
        arrays.append(("fourier_matrix", network.fourier_matrix))
    arrays += [
        ("params", state.params.flat),
        ("m", state.m.flat),
        ("v", state.v.flat),
        ("w", state.weights.w),
    ]
    header = {
        "network": network.config.model_dump(mode="json"),
        "factorized": network.factorized,
        "layout": state.params.layout.to_dict(),
        "step": int(state.step),
        "adam_count": int(state.adam_count),
        "phase_start": int(state.phase_start),
        "schedule": state.schedule.to_dict(),
        "adam": state.adam.to_dict(),
        "weights": state.weights.to_dict(),
        "rng": state.rng.bit_generator.state,
        "metadata": metadata or {},
        "arrays": [{"name": name, "shape": list(np.shape(a))} for name, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays]
    return b"".join(parts)


def save_checkpoint(
    path: Union[str, Path], network: Network, state, metadata: Optional[Dict[str, Any]] = None
) -> Path:
    """Write ``state`` for ``network`` atomically (temp file + rename)"""
    if state.params.layout.fingerprint() != network.layout.fingerprint():
        raise CheckpointError(
            "Training state layout does not match the network", version=CHECKPOINT_VERSION
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_encode(network, state, metadata))
    os.replace(tmp, path)
    logger.debug(f"Saved checkpoint at step {state.step} to {path}")
    return path


def _read_header(data: bytes) -> Tuple[Dict[str, Any], int]:
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("Not a checkpoint file (bad magic)")
    try:
        version, hdr_len = struct.unpack_from("<II", data, len(CHECKPOINT_MAGIC))
    except struct.error as e:
        raise CheckpointError(f"Truncated checkpoint header: {e}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Unsupported checkpoint version {version}.\n"
            f"This build reads version {CHECKPOINT_VERSION}; re-run training to regenerate it.",
            version=version,
            expected_version=CHECKPOINT_VERSION,
        )
    start = len(CHECKPOINT_MAGIC) + 8
    try:
        header = json.loads(data[start : start + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint header: {e}", version=version)
    return header, start + hdr_len


def load_checkpoint(path: Union[str, Path], expected_layout: Optional[ParamLayout] = None) -> Checkpoint:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Raises CheckpointError on a foreign or truncated file, a version
    mismatch, or when ``expected_layout`` is given and differs.
    """
    from .train import AdamSettings, LearningRateSchedule, TrainState

    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    header, offset = _read_header(data)

    arrays: Dict[str, np.ndarray] = {}
    try:
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            end = offset + 8 * count
            if end > len(data):
                raise CheckpointError(f"Truncated checkpoint: array '{spec['name']}' is incomplete")
            arrays[spec["name"]] = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
            offset = end
        if offset != len(data):
            raise CheckpointError(f"Checkpoint has {len(data) - offset} trailing bytes")

        layout = ParamLayout.from_dict(header["layout"])
        if expected_layout is not None and expected_layout.fingerprint() != layout.fingerprint():
            raise CheckpointError(
                "Checkpoint parameter layout does not match the requested network.\n"
                f"  • checkpoint: {layout.fingerprint()} ({layout.size} parameters)\n"
                f"  • expected:   {expected_layout.fingerprint()} ({expected_layout.size} parameters)\n"
                "Load it with the NetworkConfig it was trained with.",
                version=header.get("layout", {}).get("version"),
                expected_version=expected_layout.version,
            )

        config = NetworkConfig.model_validate(header["network"])
        params = ParamVector(layout, arrays["params"])
        network = Network(
            config=config,
            params=params,
            fourier_matrix=arrays.get("fourier_matrix"),
            factorized=header["factorized"],
        )
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng"]
        state = TrainState(
            params=params,
            m=ParamVector(layout, arrays["m"]),
            v=ParamVector(layout, arrays["v"]),
            weights=LossWeights.from_dict(header["weights"], arrays["w"]),
            rng=rng,
            schedule=LearningRateSchedule.from_dict(header["schedule"]),
            adam=AdamSettings.from_dict(header["adam"]),
            step=header["step"],
            adam_count=header["adam_count"],
            phase_start=header["phase_start"],
        )
    except CheckpointError:
        raise
    except (KeyError, ValueError, TypeError) as e:
        raise CheckpointError(f"Corrupt checkpoint {path}: {e}", version=CHECKPOINT_VERSION)
    return Checkpoint(network=network, state=state, metadata=header.get("metadata", {}))
