"""
Line-delimited metrics stream.

Every line is one JSON object with a ``type`` field: ``train`` records at each
logging interval, ``diagnostic`` records from the diagnostics module, and a
final ``summary``. Steps are monotone within each (type, window, stage)
stream.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, IO, Iterator, List, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


@dataclass
class MetricsRecord:
    """One training-progress sample"""

    step: int
    losses: Dict[str, float]
    lambdas: Dict[str, float]
    w_min: float
    w_mean: float
    learning_rate: float
    wall_clock: float
    window: int = 0
    stage: int = 0
    rel_l2: Optional[float] = None
    diagnostics: Optional[Dict[str, Any]] = None
    type: str = field(default="train", init=False)

    def to_dict(self) -> Dict[str, Any]:
        return _jsonable(asdict(self))


@dataclass
class DiagnosticRecord:
    step: int
    kind: str
    payload: Dict[str, Any]
    window: int = 0
    stage: int = 0
    type: str = field(default="diagnostic", init=False)

    def to_dict(self) -> Dict[str, Any]:
        return _jsonable(asdict(self))


@dataclass
class SummaryRecord:
    final_step: int
    final_losses: Dict[str, float]
    rel_l2: Optional[float]
    run_time: float
    seed: int
    problem: str
    extra: Dict[str, Any] = field(default_factory=dict)
    type: str = field(default="summary", init=False)

    def to_dict(self) -> Dict[str, Any]:
        return _jsonable(asdict(self))


Record = Union[MetricsRecord, DiagnosticRecord, SummaryRecord]


class MetricsWriter:
    """
    Writes records to a JSONL file, or only keeps them in memory when ``path`` is None.

    A fresh writer truncates an existing file; ``append=True`` continues it.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None, append: bool = False):
        self.path = Path(path) if path is not None else None
        self.append = append
        self.records: List[Dict[str, Any]] = []
        self._last_step: Dict[Tuple[str, int, int], int] = {}
        self._fh: Optional[IO[str]] = None

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _stream(self) -> Optional[IO[str]]:
        if self.path is None:
            return None
        if self._fh is None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a" if self.append else "w", encoding="utf-8")
        return self._fh

    def write(self, record: Record) -> Dict[str, Any]:
        data = record.to_dict()
        if data["type"] != "summary":
            key = (data["type"], data.get("window", 0), data.get("stage", 0))
            last = self._last_step.get(key)
            if last is not None and data["step"] < last:
                raise ValueError(
                    f"Non-monotone {data['type']} step {data['step']} after {last} "
                    f"(window {key[1]}, stage {key[2]})"
                )
            self._last_step[key] = data["step"]
        self.records.append(data)
        fh = self._stream()
        if fh is not None:
            fh.write(json.dumps(data, sort_keys=True) + "\n")
            fh.flush()
        return data

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_metrics(path: Union[str, Path], kind: Optional[str] = None) -> Iterator[Dict[str, Any]]:
    """Records from a metrics file, optionally filtered by ``type``"""
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            data = json.loads(line)
            if kind is None or data.get("type") == kind:
                yield data
