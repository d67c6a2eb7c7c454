"""Single-file ``.npz`` checkpoints with a plain-text schema alongside."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import TrainingConfig
from .data import PoolingHierarchy
from .model import FMSAM

META_KEY = "meta/json"


class CheckpointError(ValueError):
    pass


def schema_path(path) -> Path:
    return Path(path).with_suffix(".schema.txt")


def write_archive(arrays: dict[str, np.ndarray], path) -> Path:
    """Save ``arrays`` to ``path`` and list ``name shape dtype`` per entry in a sibling schema file."""
    path = Path(path)
    np.savez(path, **arrays)
    lines = [f"{name}\t{tuple(a.shape)}\t{a.dtype}" for name, a in sorted(arrays.items())]
    schema_path(path).write_text("\n".join(lines) + "\n")
    return path


def read_archive(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def _optimizer_arrays(optimizer: torch.optim.Optimizer) -> tuple[dict, list]:
    state = optimizer.state_dict()
    arrays = {}
    for idx, entry in state["state"].items():
        for key, value in entry.items():
            arrays[f"optim/{idx}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    return arrays, state["param_groups"]


def _optimizer_state(arrays: dict, groups: list) -> dict:
    state: dict[int, dict] = {}
    for name, value in arrays.items():
        if name.startswith("optim/"):
            _, idx, key = name.split("/", 2)
            state.setdefault(int(idx), {})[key] = torch.as_tensor(value)
    return {"state": state, "param_groups": groups}


def save_checkpoint(result, config: TrainingConfig, path) -> Path:
    """Parameters, memory, optimiser moments and run metadata of a ``TrainResult``."""
    model = result.model
    arrays = model.state_arrays()
    optim, groups = _optimizer_arrays(result.optimizer)
    arrays.update(optim)
    meta = {
        "version": __version__,
        "config": config.to_dict(),
        "epoch": result.epoch,
        "actions": list(result.actions),
        "subjects": list(result.subjects),
        "hierarchy": model.hierarchy.to_json(),
        "param_groups": groups,
        "log": result.log,
    }
    arrays[META_KEY] = np.array(json.dumps(meta))
    return write_archive(arrays, path)


def load_checkpoint(path, config: TrainingConfig | None = None):
    """Rebuild a ``TrainResult`` and its stored config.

    ``config`` replaces the stored one (architecture fields must agree);
    the optimiser restarts from the stored moments either way.
    """
    from .training import TrainResult

    arrays = read_archive(path)
    if META_KEY not in arrays:
        raise CheckpointError(f"{path} has no metadata entry")
    meta = json.loads(str(arrays[META_KEY]))
    stored = TrainingConfig.from_dict(meta["config"])
    config = config or stored
    hierarchy = PoolingHierarchy.from_json(meta["hierarchy"])
    model = FMSAM(config, hierarchy, len(meta["actions"]))
    try:
        model.load_arrays(arrays)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not fit the configured model: {exc}") from exc
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    optimizer.load_state_dict(_optimizer_state(arrays, meta["param_groups"]))
    result = TrainResult(model, optimizer, list(meta["log"]), int(meta["epoch"]),
                         list(meta["actions"]), list(meta["subjects"]))
    return result, stored
