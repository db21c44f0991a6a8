"""Binary checkpoints and the tab-separated metrics log.

Layout (little-endian)::

    b"SPLM-CK1"
    u32 config length, then that many bytes of ``key=value`` lines (UTF-8)
    u32 array count
    per array: u16 name length, name, u8 rank, rank x u32 dims, float32 data

Arrays are named ``param/<name>``, ``adam.m/<name>`` and ``adam.v/<name>``.
The config block carries every model and training knob plus the optimizer
step, so a checkpoint alone is enough to resume.  Text-to-unit models use
the same container with a ``t2u.*`` config block and ``param/`` arrays only.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import IO, Mapping, Sequence

import numpy as np

from .model import ModelConfig
from .nn import Params
from .numerics import Tensor
from .optim import OptimState
from .tokenizers import T2UConfig, TextToUnitModel
from .tokenizers.t2u import init_t2u
from .training import TrainConfig

MAGIC = b"SPLM-CK1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: ModelConfig
    train: TrainConfig
    params: Params
    state: OptimState


def _format_value(v) -> str:
    return repr(v) if isinstance(v, str) else str(v)


def _parse_value(text: str, kind):
    if kind is bool or kind == "bool":
        if text not in ("True", "False"):
            raise CheckpointError(f"bad boolean {text!r}")
        return text == "True"
    if kind is int or kind == "int":
        return int(text)
    if kind is float or kind == "float":
        return float(text)
    if text.startswith("'") and text.endswith("'"):
        return text[1:-1]
    return text


def config_block(model: ModelConfig, train: TrainConfig, step: int) -> str:
    values = {f"model.{k}": v for k, v in asdict(model).items()}
    values.update({f"train.{k}": v for k, v in asdict(train).items()})
    values["state.step"] = step
    return format_block(values)


def parse_config_block(text: str) -> tuple[ModelConfig, TrainConfig, int]:
    raw = parse_block(text)
    out = {}
    for prefix, cls in (("model", ModelConfig), ("train", TrainConfig)):
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, value in raw.items():
            head, _, name = key.partition(".")
            if head != prefix:
                continue
            if name not in kinds:
                raise CheckpointError(f"unknown config key {key}")
            values[name] = _parse_value(value, kinds[name])
        out[prefix] = cls(**values)
    if "state.step" not in raw:
        raise CheckpointError("config block lacks state.step")
    return out["model"], out["train"], int(raw["state.step"])


def _write_array(f: IO[bytes], name: str, arr: np.ndarray) -> None:
    enc = name.encode("utf-8")
    f.write(struct.pack("<H", len(enc)))
    f.write(enc)
    f.write(struct.pack("<B", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f: IO[bytes], n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def _read_array(f: IO[bytes]) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, n).decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(f, 1))
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    count = int(np.prod(dims, dtype=np.int64))
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").reshape(dims)
    return name, data.astype(np.float32)


def format_block(config: Mapping[str, object]) -> str:
    return "".join(f"{k}={_format_value(v)}\n" for k, v in config.items())


def write_blob(path: str | Path, block: str, arrays: Sequence[tuple[str, np.ndarray]]) -> None:
    """Write the magic, a ``key=value`` text block and named float32 arrays."""
    block = block.encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(block)))
        f.write(block)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            _write_array(f, name, arr)


def read_blob(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    """Inverse of :func:`write_blob`; returns the raw config text and the arrays in file order."""
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic or version)")
        (n,) = struct.unpack("<I", _read_exact(f, 4))
        text = _read_exact(f, n).decode("utf-8")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            name, arr = _read_array(f)
            if name in arrays:
                raise CheckpointError(f"duplicate array {name}")
            arrays[name] = arr
        if f.read(1):
            raise CheckpointError("trailing bytes after last array")
    return text, arrays


def parse_block(text: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}")
        raw[key] = value
    return raw


def save_checkpoint(path: str | Path, model: ModelConfig, train: TrainConfig, params: Params, state: OptimState) -> None:
    arrays = [(f"param/{k}", v.data) for k, v in params.items()]
    for k in params:
        if k in state.m:
            arrays += [(f"adam.m/{k}", state.m[k]), (f"adam.v/{k}", state.v[k])]
    write_blob(path, config_block(model, train, state.step), arrays)


def load_checkpoint(path: str | Path, expect: Mapping[str, Tensor] | None = None) -> Checkpoint:
    """Read a checkpoint.  With ``expect`` (a freshly initialized parameter
    dict), every name and shape must match or :class:`CheckpointError` names
    the offending parameter."""
    text, arrays = read_blob(path)
    model, train, step = parse_config_block(text)
    params: Params = {}
    state = OptimState(step=step)
    for name, arr in arrays.items():
        kind, _, pname = name.partition("/")
        if kind == "param":
            params[pname] = Tensor(arr.copy(), requires_grad=True, name=pname)
        elif kind == "adam.m":
            state.m[pname] = arr.copy()
        elif kind == "adam.v":
            state.v[pname] = arr.copy()
        else:
            raise CheckpointError(f"unknown array {name}")
    if expect is not None:
        check_compatible(params, expect)
    return Checkpoint(model, train, params, state)


def check_compatible(params: Mapping[str, Tensor], expect: Mapping[str, Tensor]) -> None:
    for name in expect:
        if name not in params:
            raise CheckpointError(f"parameter {name} missing from checkpoint")
        if params[name].shape != expect[name].shape:
            raise CheckpointError(
                f"parameter {name} has shape {params[name].shape}, expected {expect[name].shape}"
            )
    for name in params:
        if name not in expect:
            raise CheckpointError(f"unexpected parameter {name} in checkpoint")


def save_t2u(path: str | Path, model: TextToUnitModel) -> None:
    values = {f"t2u.{k}": v for k, v in asdict(model.config).items()}
    values.update({"n_phonemes": model.n_phonemes, "n_units": model.n_units, "trained": model.trained})
    write_blob(path, format_block(values), [(f"param/{k}", v.data) for k, v in model.params.items()])


def load_t2u(path: str | Path) -> TextToUnitModel:
    text, arrays = read_blob(path)
    raw = parse_block(text)
    kinds = {f.name: f.type for f in fields(T2UConfig)}
    cfg_values = {}
    for key, value in raw.items():
        head, _, name = key.partition(".")
        if head == "t2u":
            if name not in kinds:
                raise CheckpointError(f"unknown config key {key}")
            cfg_values[name] = _parse_value(value, kinds[name])
    try:
        n_phonemes, n_units = int(raw["n_phonemes"]), int(raw["n_units"])
        trained = _parse_value(raw["trained"], bool)
    except KeyError as err:
        raise CheckpointError(f"config block lacks {err.args[0]}") from None
    config = T2UConfig(**cfg_values)
    fresh = init_t2u(n_phonemes, n_units, config, seed=0)
    params = {}
    for name, arr in arrays.items():
        kind, _, pname = name.partition("/")
        if kind != "param":
            raise CheckpointError(f"unknown array {name}")
        params[pname] = Tensor(arr.copy(), requires_grad=True, name=pname)
    check_compatible(params, fresh.params)
    return TextToUnitModel(params, n_phonemes, n_units, config, trained)


class MetricsLog:
    """Append-only ``step<TAB>split<TAB>metric<TAB>value`` lines."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.rows: list[tuple[int, str, str, float]] = []

    def log(self, step: int, split: str, metrics: Mapping[str, float]) -> None:
        new = [(int(step), split, k, float(v)) for k, v in metrics.items()]
        self.rows += new
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                for row in new:
                    f.write(format_metric(*row))

    @staticmethod
    def read(path: str | Path) -> list[tuple[int, str, str, float]]:
        rows = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            step, split, metric, value = line.split("\t")
            rows.append((int(step), split, metric, float(value)))
        return rows


def format_metric(step: int, split: str, metric: str, value: float) -> str:
    return f"{step}\t{split}\t{metric}\t{value!r}\n"
