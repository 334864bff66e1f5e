# artifacts.py
"""Everything cpc-lab writes to or reads from disk.

  checkpoint.json   model config, init seed, every parameter (shape + row-major values)
  metrics.csv       deterministic MetricRow columns (see training.metric_columns)
  timings.csv       step, wall_clock_seconds
  summary.json      final metrics of a run ("cpc-lab/run")
  report JSON       eval-mi / probe / gradcheck output ("cpc-lab/report")
  <split>.npz       dataset dumps with a JSON header
"""
import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

import config
from errors import CheckpointError, CpcLabError, MissingCheckpointError
from model import CpcModel, ModelConfig, PairCritic
from synthdata import LatentMarkovSequenceTask, SequenceBatch
from utils import now_iso, to_jsonable

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Model = Union[CpcModel, PairCritic]


def setup_output_dir(path: PathLike) -> Path:
    """Create the run directory if it does not exist."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path: PathLike, payload: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(payload), f, indent=2, sort_keys=False)
        f.write("\n")
    logger.info("Wrote %s", path)
    return path


# ==================================
# ===== Checkpoints ================
# ==================================

def checkpoint_payload(model: Model) -> Dict[str, Any]:
    payload: Dict[str, Any] = {
        "format": config.CHECKPOINT_FORMAT,
        "version": config.CHECKPOINT_VERSION,
        "kind": model.kind,
        "seed": int(model.seed),
        "config": model.config.model_dump(mode="json"),
    }
    if isinstance(model, CpcModel):
        payload["in_channels"] = model.in_channels
    else:
        payload["x_dim"], payload["c_dim"] = model.x_dim, model.c_dim
    payload["params"] = {
        name: {"shape": list(value.shape), "values": value.reshape(-1).tolist()}
        for name, value in sorted(model.params.items())
    }
    return payload


def save_checkpoint(model: Model, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(checkpoint_payload(model), f)
    logger.info("Saved %s checkpoint (%d parameters) to %s", model.kind, model.num_parameters(), path)
    return path


def _field(payload: Mapping[str, Any], name: str, kind: type, where: str = ""):
    label = f"{where}.{name}" if where else name
    if name not in payload:
        raise CheckpointError(f"checkpoint is missing field '{label}'")
    value = payload[name]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise CheckpointError(f"checkpoint field '{label}' has type {type(value).__name__}")
    return value


def _params(payload: Mapping[str, Any]) -> Dict[str, np.ndarray]:
    params = {}
    for name, entry in _field(payload, "params", dict).items():
        where = f"params.{name}"
        if not isinstance(entry, dict):
            raise CheckpointError(f"checkpoint field '{where}' must be an object")
        shape = _field(entry, "shape", list, where)
        values = _field(entry, "values", list, where)
        try:
            array = np.asarray(values, dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise CheckpointError(f"checkpoint field '{where}.values' is not a list of numbers") from e
        if any(not isinstance(d, int) or d < 0 for d in shape) or array.ndim != 1 \
                or array.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"checkpoint field '{where}': {array.size} values do not fill shape {shape}")
        params[name] = array.reshape(shape)
    return params


def checkpoint_from_payload(payload: Any) -> Model:
    if not isinstance(payload, dict):
        raise CheckpointError("checkpoint must be a JSON object")
    fmt = _field(payload, "format", str)
    if fmt != config.CHECKPOINT_FORMAT:
        raise CheckpointError(f"checkpoint field 'format' is {fmt!r}, expected {config.CHECKPOINT_FORMAT!r}")
    version = _field(payload, "version", int)
    if version != config.CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kind = _field(payload, "kind", str)
    seed = _field(payload, "seed", int)
    try:
        model_config = ModelConfig.model_validate(_field(payload, "config", dict))
    except ValidationError as e:
        loc = ".".join(str(p) for p in e.errors()[0]["loc"])
        raise CheckpointError(f"checkpoint field 'config.{loc}' is invalid: {e.errors()[0]['msg']}") from e
    params = _params(payload)
    if kind == CpcModel.kind:
        in_channels = _field(payload, "in_channels", int)
        reference = CpcModel.init(model_config, in_channels, 0).params
        model: Model = CpcModel(model_config, in_channels, params, seed)
    elif kind == PairCritic.kind:
        x_dim, c_dim = _field(payload, "x_dim", int), _field(payload, "c_dim", int)
        reference = PairCritic.init(model_config, x_dim, c_dim, 0).params
        model = PairCritic(model_config, x_dim, c_dim, params, seed)
    else:
        raise CheckpointError(f"checkpoint field 'kind' is {kind!r}, expected 'cpc' or 'critic'")
    for name, ref in reference.items():
        if name not in params:
            raise CheckpointError(f"checkpoint is missing field 'params.{name}'")
        if params[name].shape != ref.shape:
            raise CheckpointError(f"checkpoint field 'params.{name}' has shape {list(params[name].shape)}, "
                                  f"expected {list(ref.shape)}")
    return model


def load_checkpoint(path: PathLike) -> Model:
    """Inverse of save_checkpoint. Parse errors name the byte offset or the field."""
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: malformed checkpoint at offset {e.pos} "
                              f"(line {e.lineno}, column {e.colno}): {e.msg}") from e
    model = checkpoint_from_payload(payload)
    logger.info("Loaded %s checkpoint from %s", model.kind, path)
    return model


# ==================================
# ===== Metrics ====================
# ==================================

def write_metrics(path: PathLike, columns: Sequence[str], rows: Iterable) -> Path:
    """metrics.csv: UTF-8, header row, fixed column order. Rows expose as_csv()."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow(row.as_csv())
    logger.info("Wrote %s", path)
    return path


def write_timings(path: PathLike, rows: Iterable) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "wall_clock_seconds"])
        for row in rows:
            writer.writerow([row.step, f"{row.wall_clock:.6f}"])
    return path


def read_csv(path: PathLike) -> Tuple[List[str], List[Dict[str, str]]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        return list(reader.fieldnames or []), list(reader)


def write_table(path: PathLike, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    """Plain CSV table (ablation results), one dict per row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in columns})
    logger.info("Wrote %s", path)
    return path


# ==================================
# ===== Reports ====================
# ==================================

def report(kind: str, body: Mapping[str, Any], config_hash: str = "") -> Dict[str, Any]:
    return {
        "schema": config.REPORT_SCHEMA,
        "version": config.REPORT_VERSION,
        "kind": kind,
        "created_at": now_iso(),
        "config_hash": config_hash,
        **body,
    }


def run_summary(config_hash: str, rows: Sequence, final_slope: float, extra: Mapping[str, Any] = ()) -> Dict[str, Any]:
    """summary.json for a training run; no timestamps so it is reproducible."""
    last = rows[-1] if rows else None
    return {
        "schema": config.RUN_SCHEMA,
        "version": config.REPORT_VERSION,
        "config_hash": config_hash,
        "logged_rows": len(rows),
        "final_step": last.step if last else 0,
        "final_loss": last.loss_mean if last else None,
        "final_mi_bound": last.mi_bound if last else None,
        "final_accuracy": list(last.accuracies) if last else [],
        "final_loss_slope": final_slope,
        **dict(extra),
    }


# ==================================
# ===== Datasets ===================
# ==================================

def save_dataset(path: PathLike, task: LatentMarkovSequenceTask, batch: SequenceBatch, split: str) -> Path:
    """One split as .npz: JSON header, frame-major observations [n*T, D] and parallel label arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, length, dim = batch.observations.shape
    header = {
        "format": config.DATASET_FORMAT,
        "version": 1,
        "split": split,
        "sequences": n,
        "length": length,
        "task": task.model_dump(mode="json"),
    }
    np.savez(
        path,
        header=np.array(json.dumps(header)),
        observations=batch.observations.reshape(n * length, dim),
        states=batch.states.reshape(-1),
        sources=np.repeat(batch.sources, length),
        sequence_ids=np.repeat(np.arange(n), length),
    )
    logger.info("Wrote %s split (%d sequences) to %s", split, n, path)
    return path


def load_dataset(path: PathLike) -> Tuple[Dict[str, Any], SequenceBatch]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != config.DATASET_FORMAT:
            raise CpcLabError(f"{path}: not a cpc-lab dataset")
        n, length = header["sequences"], header["length"]
        observations = data["observations"].reshape(n, length, -1)
        states = data["states"].reshape(n, length)
        sources = data["sources"].reshape(n, length)[:, 0]
    return header, SequenceBatch(observations, states, sources)
