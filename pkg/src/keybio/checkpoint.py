"""Versioned, byte-deterministic checkpoint container.

A zip archive holding ``FORMAT`` (magic + version), ``meta.json`` (model
config, seed, counters) and one ``.npy`` member per array. Members carry a
fixed timestamp so identical state gives identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from .learn import AdamState
from .net import BatchNormParams, DenseParams, LstmLayerParams, ModelConfig, ModelParams

MAGIC = "keybio-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    seed: int
    optimizer: AdamState | None = None
    extra: dict = field(default_factory=dict)


def expected_shapes(config: ModelConfig, num_classes: int = 0) -> dict[str, tuple[int, ...]]:
    u, d = config.units, config.input_dim
    shapes = {
        "layer1.W": (4 * u, d),
        "layer1.U": (4 * u, u),
        "layer1.b": (4 * u,),
        "bn.gamma": (u,),
        "bn.beta": (u,),
        "layer2.W": (4 * u, u),
        "layer2.U": (4 * u, u),
        "layer2.b": (4 * u,),
    }
    if num_classes:
        shapes["head.W"] = (num_classes, u)
        shapes["head.b"] = (num_classes,)
    return shapes


def _member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _npy(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a, dtype=np.float64), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, params: ModelParams, seed: int, optimizer: AdamState | None = None, extra: dict | None = None) -> None:
    num_classes = 0 if params.classifier is None else params.classifier.W.shape[0]
    meta = {
        "config": asdict(params.config),
        "seed": int(seed),
        "num_classes": num_classes,
        "bn_updates": params.bn.updates,
        "optimizer_t": None if optimizer is None else optimizer.t,
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _member(zf, "FORMAT", f"{MAGIC}\nversion={VERSION}\n".encode())
        _member(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name, arr in params.trainable().items():
            _member(zf, f"params/{name}.npy", _npy(arr))
        _member(zf, "state/bn.running_mean.npy", _npy(params.bn.running_mean))
        _member(zf, "state/bn.running_var.npy", _npy(params.bn.running_var))
        if optimizer is not None:
            for name in params.trainable():
                _member(zf, f"adam/m/{name}.npy", _npy(optimizer.m[name]))
                _member(zf, f"adam/v/{name}.npy", _npy(optimizer.v[name]))


def _read(zf: zipfile.ZipFile, name: str, shape) -> np.ndarray:
    try:
        raw = zf.read(name)
    except KeyError:
        raise CheckpointError(f"checkpoint is missing {name}") from None
    arr = np.lib.format.read_array(io.BytesIO(raw), allow_pickle=False)
    if arr.shape != tuple(shape):
        raise CheckpointError(f"{name}: shape {arr.shape} does not match config {tuple(shape)}")
    return arr


def load_checkpoint(path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from None
    with zf:
        try:
            fmt = zf.read("FORMAT").decode().split("\n")
        except KeyError:
            raise CheckpointError(f"{path}: missing FORMAT member") from None
        if fmt[0] != MAGIC or fmt[1] != f"version={VERSION}":
            raise CheckpointError(f"{path}: unsupported format {fmt[:2]}")
        meta = json.loads(zf.read("meta.json"))
        config = ModelConfig(**meta["config"])
        config.validate()
        C = int(meta["num_classes"])
        shapes = expected_shapes(config, C)
        names = [n for n in zf.namelist() if n.startswith("params/")]
        if sorted(names) != sorted(f"params/{n}.npy" for n in shapes):
            raise CheckpointError(f"{path}: parameter set does not match config")
        arr = {n: _read(zf, f"params/{n}.npy", s) for n, s in shapes.items()}
        u = config.units
        bn = BatchNormParams(
            arr["bn.gamma"], arr["bn.beta"],
            _read(zf, "state/bn.running_mean.npy", (u,)),
            _read(zf, "state/bn.running_var.npy", (u,)),
            int(meta["bn_updates"]),
        )
        params = ModelParams(
            config,
            LstmLayerParams(arr["layer1.W"], arr["layer1.U"], arr["layer1.b"]),
            bn,
            LstmLayerParams(arr["layer2.W"], arr["layer2.U"], arr["layer2.b"]),
            DenseParams(arr["head.W"], arr["head.b"]) if C else None,
        )
        optimizer = None
        if meta["optimizer_t"] is not None:
            optimizer = AdamState(
                {n: _read(zf, f"adam/m/{n}.npy", s) for n, s in shapes.items()},
                {n: _read(zf, f"adam/v/{n}.npy", s) for n, s in shapes.items()},
                int(meta["optimizer_t"]),
            )
    return Checkpoint(params, int(meta["seed"]), optimizer, meta.get("extra", {}))
