"""Named parameters, module containers, seeded initialization and checkpoints."""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor, get_dtype

INIT_SPECS = ("uniform_kaiming", "normal", "zeros", "ones")
CHECKPOINT_MAGIC = b"FFCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by the seed and the parameter name."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def init_array(init_spec: str, shape: tuple, seed: int, name: str, fan_in: int | None = None) -> np.ndarray:
    """Initial values as a pure function of (init_spec, seed, name)."""
    if init_spec == "zeros":
        return np.zeros(shape)
    if init_spec == "ones":
        return np.ones(shape)
    rng = param_rng(seed, name)
    if init_spec == "normal":
        return rng.normal(0.0, 0.02, size=shape)
    if init_spec == "uniform_kaiming":
        if not fan_in:
            raise ValueError(f"uniform_kaiming init for {name!r} needs fan_in")
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)
    raise ValueError(f"unknown init spec {init_spec!r}; expected one of {INIT_SPECS}")


class Parameter(Tensor):
    __slots__ = ("name", "init_spec", "fan_in")

    def __init__(self, shape, init_spec: str = "uniform_kaiming", fan_in: int | None = None):
        super().__init__(np.zeros(shape), requires_grad=True)
        self.name = ""
        self.init_spec = init_spec
        self.fan_in = fan_in

    def reset(self, seed: int) -> None:
        self.data = init_array(self.init_spec, self.shape, seed, self.name, self.fan_in).astype(get_dtype())
        self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, init={self.init_spec})"


class Module:
    """Attribute-based container. Parameters and sub-modules are discovered by walking
    instance attributes (and lists of modules) in definition order."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def init_parameters(self, seed: int) -> None:
        """Assign hierarchical names and draw initial values."""
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
            p.name = name
            p.reset(seed)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise CheckpointError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(get_dtype())

    def cast(self) -> None:
        """Convert every parameter to the current global precision."""
        for p in self.parameters():
            p.data = p.data.astype(get_dtype())


def save_checkpoint(path, params) -> None:
    """Write ``FFCK`` checkpoint. ``params`` is a Module or an iterable of (name, array)."""
    items = params.named_parameters() if isinstance(params, Module) else params
    chunks = []
    count = 0
    for name, arr in items:
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        count += 1
    header = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, count)
    Path(path).write_bytes(header + b"".join(chunks))


def load_checkpoint(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = buf[pos : pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).copy()
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return state
