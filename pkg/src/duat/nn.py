"""Parameterized layers, the parameter tree, and checkpoint I/O."""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterator, List, Tuple, Union

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, count_macs, get_dtype, no_grad


class Parameter(Tensor):
    """A leaf tensor owned by a :class:`Module`."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Minimal parameter tree: attributes that are Parameters, Modules or
    lists of Modules are walked in definition order."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, buf in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{name}", buf
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, p.data) for k, p in self.named_parameters())
        for k, b in self.named_buffers():
            state[k] = b
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        for k, b in buffers.items():
            arr = np.asarray(state[k])
            if arr.shape != b.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != model shape {b.shape}")
            b[...] = arr


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel=1, stride=1, padding=None, groups=1, bias=True, rng=None):
        if c_in % groups or c_out % groups:
            raise ShapeError(f"channels {c_in}->{c_out} not divisible by groups={groups}")
        rng = _rng(rng)
        self.c_in, self.c_out, self.kernel, self.stride, self.groups = c_in, c_out, kernel, stride, groups
        self.padding = kernel // 2 if padding is None else padding
        fan_in = c_in // groups * kernel * kernel
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (c_out, c_in // groups, kernel, kernel)))
        self.bias = Parameter(np.zeros((1, c_out, 1, 1))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c_in:
            raise ShapeError(f"Conv2d expects {self.c_in} channels, got {x.shape[1]}")
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def zero_init(self) -> "Conv2d":
        self.weight.data[...] = 0
        if self.bias is not None:
            self.bias.data[...] = 0
        return self


class BatchNorm2d(Module):
    eps = 1e-5
    momentum = 0.1

    def __init__(self, channels: int):
        self.channels = channels
        self.scale = Parameter(np.ones((1, channels, 1, 1)))
        self.shift = Parameter(np.zeros((1, channels, 1, 1)))
        self._buffers = OrderedDict(running_mean=np.zeros(channels), running_var=np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.scale, self.shift,
                              self._buffers["running_mean"], self._buffers["running_var"],
                              self.training, self.momentum, self.eps)


class LayerNorm(Module):
    eps = 1e-5

    def __init__(self, channels: int):
        self.channels = channels
        self.scale = Parameter(np.ones((1, channels, 1, 1)))
        self.shift = Parameter(np.zeros((1, channels, 1, 1)))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.scale, self.shift, self.eps)


class ConvBNReLU(Module):
    def __init__(self, c_in, c_out, kernel=3, rng=None):
        self.conv = Conv2d(c_in, c_out, kernel, rng=rng)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))


class ExpandMLP(Module):
    """Two fully connected layers ``c -> 2c -> c`` acting on per-sample
    channel vectors of shape (n, c, 1, 1).

    Order: linear, ReLU, LayerNorm, linear. Where the norm sits is our call;
    the source only says the MLP has one.
    """

    def __init__(self, channels: int, ratio: int = 2, rng=None, zero_init_output: bool = False):
        rng = _rng(rng)
        self.channels = channels
        self.fc1 = Conv2d(channels, channels * ratio, 1, rng=rng)
        self.norm = LayerNorm(channels * ratio)
        self.fc2 = Conv2d(channels * ratio, channels, 1, rng=rng)
        if zero_init_output:
            self.fc2.zero_init()

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"MLP configured for {self.channels} channels, got {x.shape[1]}")
        return self.fc2(self.norm(ops.relu(self.fc1(x))))


# ---------------------------------------------------------------- counting

def count_params_flops(model: Module, input_shape: Tuple[int, int, int, int]) -> Tuple[int, int]:
    """Return (parameter count, multiply-accumulates per sample).

    MACs cover convolutions (k*k*c_in/groups*c_out*h_out*w_out) and the
    attention matrix products; norms, activations, elementwise ops and
    resampling are not counted.
    """
    x = Tensor(np.zeros((1,) + tuple(input_shape[1:]), dtype=get_dtype()))
    was_training = model.training
    model.eval()
    try:
        with no_grad(), count_macs() as box:
            model(x)
    finally:
        model.train(was_training)
    return model.num_parameters(), box[0]


# ---------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian uint32):
#   magic b"DUATCKPT", version, config_len, config utf-8 bytes, record count,
#   then per record: name_len, name utf-8, dtype tag (uint8: 0=f32, 1=f64),
#   ndim, dims..., raw little-endian scalars.

MAGIC = b"DUATCKPT"
VERSION = 1
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: Union[str, Path], state: Dict[str, np.ndarray], config_text: str = "") -> None:
    cfg = config_text.encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<BI", _TAGS[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: Union[str, Path]) -> Tuple["OrderedDict[str, np.ndarray]", str]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_text = take(cfg_len).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        tag, ndim = struct.unpack("<BI", take(5))
        if tag not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[tag]
        size = int(np.prod(shape)) * dt.itemsize
        state[name] = np.frombuffer(take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last record")
    return state, config_text
