"""File formats: simulated batches, CSV export and config hashing.

A batch file is a text header followed by raw little-endian column data::

    VANBAYES-SIMBATCH 1
    {"columns": [...], "meta": {...}}
    <bytes>

The JSON line lists every column with its dtype, shape and byte offset.
Spatial SIR datasets are stored flattened as (series, time, region) with
series order (observed infected, observed recovered).  Output is a pure
function of the batch contents, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .simulators.base import SimBatch

MAGIC = b"VANBAYES-SIMBATCH 1\n"
COLUMNS = ("theta", "gamma", "weights", "data", "summaries")


class FormatError(ValueError):
    """A file is not in the expected format."""


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON form of ``config``."""
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def save_batch(batch: SimBatch, path):
    columns, chunks, offset = [], [], 0
    for name in COLUMNS:
        arr = getattr(batch, name)
        if arr is None:
            continue
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        raw = arr.astype(dtype, copy=False).tobytes(order="C")
        columns.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = canonical_json({"columns": columns, "meta": batch.meta}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header + b"\n")
        for raw in chunks:
            fh.write(raw)


def read_batch_header(path):
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise FormatError(f"{path} is not a simulation batch file")
        return json.loads(fh.readline())


def load_batch(path) -> SimBatch:
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise FormatError(f"{path} is not a simulation batch file")
        header = json.loads(fh.readline())
        body = fh.read()
    arrays = {}
    for col in header["columns"]:
        raw = body[col["offset"] : col["offset"] + col["nbytes"]]
        arrays[col["name"]] = np.frombuffer(raw, dtype=np.dtype(col["dtype"])).reshape(col["shape"]).copy()
    return SimBatch(arrays["theta"], arrays["gamma"], arrays["weights"], arrays.get("data"),
                    arrays.get("summaries"), header["meta"])


def export_batch_csv(batch: SimBatch, path, include_data=False):
    """One row per record: parameters, targets, weight and summaries
    (and the flattened dataset when ``include_data``)."""
    meta = batch.meta
    cols = [batch.theta, batch.gamma, batch.weights[:, None]]
    header = list(meta.get("param_names", [f"theta{j}" for j in range(batch.theta.shape[1])]))
    header += [f"target_{k}" for k in meta.get("target_names", range(batch.gamma.shape[1]))]
    header += ["weight"]
    if batch.summaries is not None:
        cols.append(batch.summaries)
        header += [f"z{j}" for j in range(batch.summaries.shape[1])]
    if include_data and batch.data is not None:
        flat = batch.data.reshape(len(batch), -1)
        cols.append(flat)
        header += [f"y{j}" for j in range(flat.shape[1])]
    table = np.column_stack([np.asarray(c, dtype=float) for c in cols])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in table:
            w.writerow([repr(float(x)) for x in row])


def load_observed(path, data_shape):
    """Observed datasets from ``.npy`` or CSV (one flattened dataset per row),
    reshaped to ``(B, *data_shape)``."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
    elif path.suffix == ".csv":
        arr = np.loadtxt(path, delimiter=",", ndmin=2)
    else:
        try:
            return load_batch(path).data
        except FormatError:
            raise FormatError(f"unsupported observed-data file {path}") from None
    size = int(np.prod(data_shape))
    if arr.size % size:
        raise FormatError(f"observed data has {arr.size} values, not a multiple of the dataset size {size}")
    return arr.reshape((-1,) + tuple(data_shape))


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_json_default)


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
