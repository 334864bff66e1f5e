# utils.py
import hashlib
import json
import datetime as dt
from typing import Any, Mapping, Sequence, Tuple

import numpy as np


def now_iso() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for a named sub-stream of `seed`, e.g. make_rng(seed, 2) for evaluation."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(stream)))


def config_hash(payload: Mapping[str, Any]) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def params_hash(params: Mapping[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(params[name], dtype=np.float64).tobytes())
    return digest.hexdigest()


def mean_and_se(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / np.sqrt(arr.size))


def loss_slope(steps: Sequence[int], losses: Sequence[float], window: int = 5) -> float:
    """Least-squares slope of the last `window` logged losses (per step)."""
    if len(steps) < 2:
        return 0.0
    x = np.asarray(steps[-window:], dtype=np.float64)
    y = np.asarray(losses[-window:], dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0:
        return 0.0
    return float(np.polyfit(x, y, 1)[0])


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
