"""Checkpoint directories: a text manifest plus one flat little-endian binary
file per named array.  Round trips are bit-exact, including optimizer moments
and channel statistics, so training can resume at an epoch boundary and
replay identically."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .losses import ClassifierParams
from .network import NetworkConfig, NetworkParams
from .tensor import Tensor
from .training import AdamState, ChannelStats

_MAGIC = "gatereid-checkpoint"
_VERSION = 1
_MANIFEST = "manifest.txt"

_DTYPE_CODES = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8"}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class CheckpointBundle:
    config: NetworkConfig
    params: NetworkParams
    classifier: ClassifierParams | None
    adam: AdamState | None
    stats: ChannelStats | None
    epoch: int


def _file_name(name: str) -> str:
    return name.replace("/", "__") + ".bin"


def _write_array(root: str, name: str, arr: np.ndarray) -> None:
    dt = arr.dtype.newbyteorder("<")
    with open(os.path.join(root, _file_name(name)), "wb") as fh:
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def _read_array(root: str, name: str, code: str, shape) -> np.ndarray:
    path = os.path.join(root, _file_name(name))
    with open(path, "rb") as fh:
        raw = fh.read()
    base = _CODE_DTYPES[code]
    arr = np.frombuffer(raw, dtype=base.newbyteorder("<"))
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"array {name!r} has {arr.size} values, manifest says {shape}")
    return arr.reshape(shape).astype(base)  # native byte order, same bits


def save_checkpoint(path: str, params: NetworkParams,
                    classifier: ClassifierParams | None = None,
                    adam: AdamState | None = None,
                    stats: ChannelStats | None = None,
                    epoch: int = 0) -> None:
    os.makedirs(path, exist_ok=True)
    config = params.config
    precision = _DTYPE_CODES[np.dtype(params.dtype)]
    lines = [
        f"format = {_MAGIC}",
        f"version = {_VERSION}",
        f"precision = {precision}",
        "byte_order = little",
        f"epoch = {int(epoch)}",
        f"adam_step = {adam.step if adam is not None else -1}",
        f"input_height = {params.input_hw[0]}",
        f"input_width = {params.input_hw[1]}",
    ]
    for key, value in config.to_dict().items():
        lines.append(f"config.{key} = {value}")

    arrays: list[tuple[str, np.ndarray]] = []
    for name in params.names():
        arrays.append((f"param/{name}", params[name].data))
    if classifier is not None:
        arrays.append(("classifier/weight", classifier.weight.data))
    if adam is not None:
        for name in sorted(adam.m):
            arrays.append((f"adam_m/{name}", adam.m[name]))
            arrays.append((f"adam_v/{name}", adam.v[name]))
    if stats is not None:
        arrays.append(("stats/mean", stats.mean))
        arrays.append(("stats/std", stats.std))

    for name, arr in arrays:
        code = _DTYPE_CODES[arr.dtype]
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"array = {name} {code} {dims}".rstrip())
        _write_array(path, name, arr)
    with open(os.path.join(path, _MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_value(text: str, target_type):
    if target_type is bool:
        if text not in ("True", "False", "true", "false"):
            raise ValueError(f"bad boolean {text!r}")
        return text in ("True", "true")
    return target_type(text)


def load_checkpoint(path: str) -> CheckpointBundle:
    manifest = os.path.join(path, _MANIFEST)
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"no checkpoint manifest at {manifest!r}")
    fields: dict[str, str] = {}
    array_specs = []
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "array":
                parts = value.split()
                array_specs.append((parts[0], parts[1], tuple(int(d) for d in parts[2:])))
            else:
                fields[key] = value
    if fields.get("format") != _MAGIC:
        raise ValueError(f"{manifest} is not a checkpoint manifest")
    if int(fields.get("version", -1)) != _VERSION:
        raise ValueError(f"unsupported checkpoint version {fields.get('version')}")
    if fields.get("byte_order") != "little":
        raise ValueError("unsupported byte order")

    defaults = NetworkConfig()
    kwargs = {}
    for name in defaults.to_dict():
        raw = fields.get(f"config.{name}")
        if raw is None:
            raise ValueError(f"manifest missing config.{name}")
        kwargs[name] = _parse_value(raw, type(getattr(defaults, name)))
    config = NetworkConfig(**kwargs)
    config.validate()
    input_hw = (int(fields["input_height"]), int(fields["input_width"]))

    arrays = {name: _read_array(path, name, code, shape)
              for name, code, shape in array_specs}

    tensors = {}
    for name, arr in arrays.items():
        if name.startswith("param/"):
            tensors[name[len("param/"):]] = Tensor(arr, requires_grad=True)
    if not tensors:
        raise ValueError("checkpoint holds no network parameters")
    params = NetworkParams(config, input_hw, tensors)

    classifier = None
    if "classifier/weight" in arrays:
        classifier = ClassifierParams(Tensor(arrays["classifier/weight"], requires_grad=True))

    adam = None
    m = {n[len("adam_m/"):]: a for n, a in arrays.items() if n.startswith("adam_m/")}
    v = {n[len("adam_v/"):]: a for n, a in arrays.items() if n.startswith("adam_v/")}
    step = int(fields.get("adam_step", -1))
    if m and step >= 0:
        adam = AdamState(m=m, v=v, step=step)

    stats = None
    if "stats/mean" in arrays:
        stats = ChannelStats(arrays["stats/mean"], arrays["stats/std"])
    return CheckpointBundle(config, params, classifier, adam, stats,
                            int(fields.get("epoch", 0)))
