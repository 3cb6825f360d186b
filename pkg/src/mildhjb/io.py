"""Persistence: TOML model files, CSV tables and JSON run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import sys
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import scipy

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from . import __version__
from .dynamics import PathEnsemble
from .model import ConditionReport, SpectralModel, build_model

__all__ = [
    "MODEL_KEYS",
    "load_config",
    "model_from_dict",
    "load_model",
    "save_model",
    "write_rows",
    "append_rows",
    "write_conditions",
    "write_paths",
    "write_value_field",
    "append_ledger",
    "file_digest",
    "write_manifest",
    "LEDGER_COLUMNS",
]

MODEL_KEYS = ("n_modes", "mu", "sigma_diag", "g_diag", "control_map", "beta", "a_G", "C_G", "lambda", "p",
              "spatial_dim")
LEDGER_COLUMNS = ("check_id", "estimate", "standard_error", "pass", "seed", "model_hash")


def load_config(path) -> dict:
    """Parse a TOML file; malformed files raise ``ValueError``."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ValueError(f"malformed config {path}: {exc}") from exc


def model_from_dict(data: dict) -> SpectralModel:
    """Build a model from the ``[model]`` table (or a flat table with the model keys)."""
    data = data.get("model", data)
    missing = [k for k in ("mu", "sigma_diag", "g_diag", "control_map", "beta") if k not in data]
    if missing:
        raise ValueError(f"model table lacks keys: {', '.join(missing)}")
    model = build_model(
        np.asarray(data["mu"], dtype=float),
        np.asarray(data["sigma_diag"], dtype=float),
        np.asarray(data["g_diag"], dtype=float),
        np.asarray(data["control_map"], dtype=float),
        beta=float(data["beta"]),
        a_G=float(data.get("a_G", 0.0)),
        C_G=data.get("C_G"),
        lam=float(data.get("lambda", 1.0)),
        p=data.get("p"),
        spatial_dim=int(data.get("spatial_dim", 1)),
    )
    if "n_modes" in data and int(data["n_modes"]) != model.n_modes:
        raise ValueError("n_modes disagrees with the length of mu")
    return model


def load_model(path) -> SpectralModel:
    return model_from_dict(load_config(path))


def save_model(model: SpectralModel, path) -> Path:
    path = Path(path)
    path.write_bytes(tomli_w.dumps({"model": model.to_dict()}).encode())
    return path


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def write_rows(path, rows: Iterable[dict], columns: Optional[Iterable[str]] = None) -> Path:
    """Write dict rows to CSV, columns taken from the first row unless given."""
    rows = list(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(columns) if columns is not None else (list(rows[0]) if rows else [])
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in cols})
    return path


def append_rows(path, rows: Iterable[dict], columns: Iterable[str]) -> Path:
    """Append rows to a CSV file, writing the header if the file is new."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(columns)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in cols})
    return path


def write_conditions(path, reports: Iterable[ConditionReport]) -> Path:
    return write_rows(path, (r.to_row() for r in reports), ("condition_id", "satisfied", "witness", "detail"))


def write_paths(path, ens: PathEnsemble) -> Path:
    """Long-format CSV: one row per (path, time)."""
    P, T, N = ens.states.shape
    m = ens.controls.shape[2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["path_id", "t"] + [f"mode_{i}" for i in range(N)] + [f"u_{j}" for j in range(m)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for p in range(P):
            for i in range(T):
                w.writerow([p, repr(float(ens.time_grid[i]))]
                           + [repr(float(v)) for v in ens.states[p, i]]
                           + [repr(float(v)) for v in ens.controls[p, i]])
    return path


def write_value_field(path, v) -> Path:
    """Node coordinates, ``v`` and the G-gradient components at each grid node."""
    nodes = v.nodes()
    vals = v.values.ravel()
    grads = v.gradient.reshape(-1, v.n_state)
    cols = [f"x_{m}" for m in v.modes] + ["v"] + [f"dGv_{i}" for i in range(v.n_state)]
    rows = [dict(zip(cols, list(nodes[i]) + [vals[i]] + list(grads[i]))) for i in range(vals.size)]
    return write_rows(path, rows, cols)


def append_ledger(path, reports) -> Path:
    return append_rows(path, (r.to_row() for r in reports), LEDGER_COLUMNS)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, command: str, argv, seed, model_hash: str, outputs: Iterable, extra: Optional[dict] = None) -> Path:
    """JSON run manifest with input digest, seed, library versions and output hashes."""
    path = Path(path)
    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "model_hash": model_hash,
        "versions": {
            "mildhjb": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "outputs": {Path(o).name: file_digest(o) for o in outputs},
    }
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")
