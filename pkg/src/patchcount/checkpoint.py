"""Self-describing .npz checkpoints.

One zip of named numpy arrays plus a JSON metadata blob: architecture
config, dataset statistic (cc_max), training position (epoch, seed) and the
optimizer momentum buffers — everything needed to rebuild the model from the
file alone and to resume training bit-exactly. No pickled objects.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import CheckpointError
from .network import ArchConfig, CrowdNet

FORMAT_VERSION = 1
_META_KEY = "meta.json"
_STATE = "state/"
_OPT = "opt/"


def save_checkpoint(
    path,
    model: CrowdNet,
    *,
    optimizer: Optional[torch.optim.Optimizer] = None,
    epoch: Optional[int] = None,
    seed: Optional[int] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arch = model.cfg
    meta = {
        "format_version": FORMAT_VERSION,
        "arch": {
            "base_channels": arch.base_channels,
            "num_branches": arch.num_branches,
            "residual_units": arch.residual_units,
            "unit_depth": arch.unit_depth,
            "input_size": arch.input_size,
            "branch_out": list(arch.branch_out),
            "attention": arch.attention,
            "fc_hidden": arch.fc_hidden,
            "detach_aux_heads": arch.detach_aux_heads,
        },
        "cc_max": model.cc_max,
        "epoch": epoch,
        "seed": seed,
    }
    arrays = {_META_KEY: np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    for name, tensor in model.state_dict().items():
        arrays[_STATE + name] = tensor.detach().cpu().numpy()
    if optimizer is not None:
        for name, param in model.named_parameters():
            state = optimizer.state.get(param, {})
            buf = state.get("momentum_buffer")
            if buf is not None:
                arrays[_OPT + name] = buf.detach().cpu().numpy()
    np.savez(path, **arrays)
    return path


def load_checkpoint(path) -> tuple[CrowdNet, dict, dict[str, np.ndarray]]:
    """Rebuild the model from a checkpoint.

    Returns (model, metadata, momentum buffers keyed by parameter name).
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        archive = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    with archive:
        if _META_KEY not in archive.files:
            raise CheckpointError(f"{path}: missing metadata entry")
        meta = json.loads(archive[_META_KEY].tobytes().decode("utf-8"))
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: format version {version} not supported (expected {FORMAT_VERSION})"
            )
        raw = dict(meta["arch"])
        raw["branch_out"] = tuple(raw["branch_out"])
        try:
            arch = ArchConfig(**raw)
        except TypeError as exc:
            raise CheckpointError(f"{path}: bad architecture metadata ({exc})") from exc
        model = CrowdNet(arch)
        state = {}
        momenta = {}
        for key in archive.files:
            if key.startswith(_STATE):
                state[key[len(_STATE) :]] = torch.from_numpy(archive[key].copy())
            elif key.startswith(_OPT):
                momenta[key[len(_OPT) :]] = archive[key].copy()
        try:
            model.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"{path}: state does not match architecture ({exc})") from exc
        model.cc_max = meta.get("cc_max")
    return model, meta, momenta
