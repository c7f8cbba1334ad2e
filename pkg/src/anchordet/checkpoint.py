"""Versioned text checkpoints (`CKPT v1`).

Layout: a header line, `META key value` lines carrying the model
configuration, then per tensor a `TENSOR name dim0 dim1 ...` line followed
by the flattened values (9 significant digits, which round-trips float32).
"""

from __future__ import annotations

import numpy as np
import torch

from .backbone import GridConfig
from .decoder import Detector, DecoderConfig
from .errors import ConfigError

_VALUES_PER_LINE = 8


class CheckpointError(Exception):
    pass


def _meta_from_model(model: Detector) -> dict:
    g, c = model.grid_cfg, model.cfg
    return {
        "extent": ",".join(f"{v:g}" for v in g.extent),
        "cell_size": f"{g.cell_size:g}",
        "max_points_per_pillar": str(g.max_points_per_pillar),
        "d": str(c.d),
        "heads": str(c.heads),
        "k_layers": str(c.k_layers),
        "m_queries": str(c.m_queries),
        "num_classes": str(c.num_classes),
        "ffn_hidden": str(c.ffn_hidden),
        "refine_layers": ",".join(str(i) for i in sorted(c.refine_layers)) or "none",
        "mask_empty_cells": str(int(c.mask_empty_cells)),
    }


def _configs_from_meta(meta: dict) -> tuple[GridConfig, DecoderConfig]:
    try:
        extent = tuple(float(v) for v in meta["extent"].split(","))
        grid = GridConfig(
            extent=extent,
            cell_size=float(meta["cell_size"]),
            d=int(meta["d"]),
            max_points_per_pillar=int(meta["max_points_per_pillar"]),
        )
        refine = meta["refine_layers"]
        s_r = frozenset() if refine == "none" else frozenset(
            int(i) for i in refine.split(",")
        )
        dec = DecoderConfig(
            k_layers=int(meta["k_layers"]),
            d=int(meta["d"]),
            heads=int(meta["heads"]),
            m_queries=int(meta["m_queries"]),
            refine_layers=s_r,
            num_classes=int(meta["num_classes"]),
            ffn_hidden=int(meta["ffn_hidden"]),
            mask_empty_cells=bool(int(meta["mask_empty_cells"])),
        )
    except (KeyError, ValueError, ConfigError) as e:
        raise CheckpointError(f"bad checkpoint metadata: {e}") from None
    return grid, dec


def _write_tensors(fh, state: dict[str, torch.Tensor]) -> None:
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype(np.float64).ravel()
        dims = " ".join(str(s) for s in tensor.shape) or "0"
        fh.write(f"TENSOR {name} {dims}\n")
        for i in range(0, len(arr), _VALUES_PER_LINE):
            fh.write(" ".join(f"{v:.9g}" for v in arr[i:i + _VALUES_PER_LINE]) + "\n")


def save_checkpoint(path, model: Detector) -> None:
    with open(path, "w") as fh:
        fh.write("CKPT v1\n")
        for k, v in _meta_from_model(model).items():
            fh.write(f"META {k} {v}\n")
        _write_tensors(fh, model.state_dict())


def _parse(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "CKPT v1":
            raise CheckpointError(f"not a CKPT v1 file: {header!r}")
        meta: dict[str, str] = {}
        tensors: dict[str, np.ndarray] = {}
        name, shape, buf = None, None, []

        def flush():
            if name is None:
                return
            want = int(np.prod(shape)) if shape else 1
            if len(buf) != want:
                raise CheckpointError(
                    f"tensor {name}: expected {want} values, got {len(buf)}"
                )
            tensors[name] = np.array(buf, dtype=np.float64).reshape(shape)

        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "META":
                meta[parts[1]] = parts[2] if len(parts) > 2 else ""
            elif parts[0] == "TENSOR":
                flush()
                name = parts[1]
                shape = [int(v) for v in parts[2:] if v != "0"]
                buf = []
            else:
                buf.extend(float(v) for v in parts)
        flush()
    return meta, tensors


def load_checkpoint(path) -> Detector:
    """Rebuild a detector from a checkpoint; shapes are validated."""
    meta, tensors = _parse(path)
    grid, dec = _configs_from_meta(meta)
    model = Detector(grid, dec)
    state = model.state_dict()
    if set(state) != set(tensors):
        missing = set(state) - set(tensors)
        extra = set(tensors) - set(state)
        raise CheckpointError(
            f"parameter set mismatch (missing={sorted(missing)}, extra={sorted(extra)})"
        )
    for k, arr in tensors.items():
        if tuple(arr.shape) != tuple(state[k].shape):
            raise CheckpointError(
                f"shape mismatch for {k}: file {arr.shape} vs model {tuple(state[k].shape)}"
            )
        state[k] = torch.from_numpy(arr).to(state[k].dtype)
    model.load_state_dict(state)
    return model


def save_aam_checkpoint(path, model: Detector) -> None:
    """Alignment-module weights only."""
    with open(path, "w") as fh:
        fh.write("CKPT v1\n")
        fh.write(f"META d {model.cfg.d}\n")
        _write_tensors(
            fh, {k: v for k, v in model.aam.state_dict().items()}
        )


def load_aam_checkpoint(path, model: Detector) -> None:
    meta, tensors = _parse(path)
    if int(meta.get("d", -1)) != model.cfg.d:
        raise CheckpointError(
            f"AAM checkpoint d={meta.get('d')} does not match model d={model.cfg.d}"
        )
    state = model.aam.state_dict()
    for k in state:
        if k not in tensors:
            raise CheckpointError(f"AAM checkpoint missing tensor {k}")
        state[k] = torch.from_numpy(tensors[k]).to(state[k].dtype)
    model.aam.load_state_dict(state)
