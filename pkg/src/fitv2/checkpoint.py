"""Checkpoint directories: a JSON ``manifest`` plus one little-endian ``weights.bin``.

Tensor groups are prefixed ``param/``, ``ema/``, ``adam.m/`` and ``adam.v/``.
The manifest also carries the model config, the resolved run config, the
optimizer step, the data RNG state and the loss trace so far.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import FiTv2, ModelConfig
from .flow import TrainState
from .numerics import AdamWState

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    model: FiTv2
    state: TrainState | None
    run_config: str
    meta: dict


def _tensors(model: FiTv2, state: TrainState | None) -> dict[str, np.ndarray]:
    out = {f"param/{k}": v.data for k, v in model.params.items()}
    if state is not None:
        out.update({f"ema/{k}": v for k, v in state.ema.items()})
        out.update({f"adam.m/{k}": v for k, v in state.opt.m.items()})
        out.update({f"adam.v/{k}": v for k, v in state.opt.v.items()})
    return out


def save_checkpoint(
    directory: os.PathLike,
    model: FiTv2,
    state: TrainState | None = None,
    run_config: str = "",
    meta: dict | None = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    tmp = directory / "weights.bin.tmp"
    with open(tmp, "wb") as f:
        for name, arr in _tensors(model, state).items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            f.write(raw)
            entries.append(
                dict(name=name, dtype="float32", shape=list(arr.shape), offset=offset, nbytes=len(raw), crc32=zlib.crc32(raw))
            )
            offset += len(raw)
    os.replace(tmp, directory / "weights.bin")
    manifest = dict(
        format_version=FORMAT_VERSION,
        model_config=model.config.to_dict(),
        run_config=run_config,
        meta=meta or {},
        tensors=entries,
    )
    if state is not None:
        manifest["train"] = dict(
            step=state.step,
            adam_step=state.opt.step,
            rng=state.rng.bit_generator.state,
            losses=state.losses,
            lrs=state.lrs,
        )
    (directory / "manifest").write_text(json.dumps(manifest, indent=1))
    return directory


def load_checkpoint(directory: os.PathLike) -> Checkpoint:
    directory = Path(directory)
    mpath = directory / "manifest"
    if not mpath.exists():
        raise CheckpointError(f"no checkpoint manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{mpath}: {e}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{mpath}: unsupported format version {manifest.get('format_version')}")
    raw = (directory / "weights.bin").read_bytes()
    arrays = {}
    for e in manifest["tensors"]:
        chunk = raw[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"] or zlib.crc32(chunk) != e["crc32"]:
            raise CheckpointError(f"{directory}: tensor {e['name']} is truncated or corrupt")
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).astype(np.float32)

    model = FiTv2(ModelConfig(**manifest["model_config"]))
    model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    state = None
    if "train" in manifest:
        tr = manifest["train"]
        opt = AdamWState()
        opt.step = tr["adam_step"]
        opt.m = {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam.m/")}
        opt.v = {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam.v/")}
        rng = np.random.default_rng()
        rng.bit_generator.state = tr["rng"]
        ema = {k[4:]: v.copy() for k, v in arrays.items() if k.startswith("ema/")}
        state = TrainState(tr["step"], opt, ema, rng, list(tr["losses"]), list(tr["lrs"]))
    return Checkpoint(model, state, manifest.get("run_config", ""), manifest.get("meta", {}))
