"""Plain-text parameter checkpoints.

A checkpoint is one JSON document::

    {"format_version": 1, "model_kind": "protonet",
     "architecture": {...}, "rng_seed": 7,
     "params": [{"name": "enc.W0", "shape": [16, 64], "values": [...]}, ...]}

Values are row-major and written with 17 significant digits, which round-trips
every float64 exactly.  Output bytes depend only on the inputs.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class MalformedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_kind: str
    architecture: dict
    rng_seed: int
    params: dict  # name -> ndarray


def _fmt(values):
    return "[" + ", ".join(format(float(v), ".17g") for v in values) + "]"


def dumps_params(params, model_kind, architecture=None, rng_seed=0):
    """Render named parameter arrays to checkpoint text."""
    lines = [
        "{",
        f'  "format_version": {FORMAT_VERSION},',
        f'  "model_kind": {json.dumps(model_kind)},',
        f'  "architecture": {json.dumps(architecture or {}, sort_keys=True)},',
        f'  "rng_seed": {int(rng_seed)},',
        '  "params": [',
    ]
    entries = []
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"parameter {name!r} holds non-finite values")
        entries.append(
            f'    {{"name": {json.dumps(name)}, "shape": {json.dumps(list(arr.shape))}, '
            f'"values": {_fmt(arr.ravel())}}}'
        )
    lines.append(",\n".join(entries))
    lines += ["  ]", "}", ""]
    return "\n".join(lines)


def save_params(params, path, model_kind, architecture=None, rng_seed=0):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_params(params, model_kind, architecture, rng_seed), encoding="utf-8")
    return path


def loads_params(text, expected_shapes=None):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedCheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedCheckpointError("checkpoint root must be an object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    for key in ("model_kind", "architecture", "rng_seed", "params"):
        if key not in doc:
            raise MalformedCheckpointError(f"checkpoint is missing {key!r}")

    params = {}
    for entry in doc["params"]:
        try:
            name, shape, values = entry["name"], tuple(entry["shape"]), entry["values"]
        except (KeyError, TypeError):
            raise MalformedCheckpointError("parameter entry lacks name/shape/values") from None
        arr = np.array(values, dtype=np.float64)
        if arr.ndim != 1 or arr.size != int(np.prod(shape, dtype=np.int64)):
            raise MalformedCheckpointError(f"parameter {name!r}: {arr.size} values for shape {shape}")
        params[name] = arr.reshape(shape)

    if expected_shapes is not None:
        if set(expected_shapes) != set(params):
            raise CheckpointShapeError(
                f"parameter names differ: expected {sorted(expected_shapes)}, found {sorted(params)}"
            )
        for name, shape in expected_shapes.items():
            if tuple(shape) != params[name].shape:
                raise CheckpointShapeError(f"{name}: expected shape {tuple(shape)}, found {params[name].shape}")
    return Checkpoint(doc["model_kind"], doc["architecture"], int(doc["rng_seed"]), params)


def load_params(path, expected_shapes=None):
    return loads_params(Path(path).read_text(encoding="utf-8"), expected_shapes)
