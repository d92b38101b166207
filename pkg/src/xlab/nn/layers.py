"""Layer modules and the :class:`Sequential` container used by every model."""
from __future__ import annotations

import contextlib
import copy

import numpy as np

from . import functional as F
from .init import xavier_uniform
from .tensor import Parameter, Tensor, default_dtype, no_grad


class Module:
    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return []

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def reset_parameters(self, rng: np.random.Generator) -> None:
        pass

    def config(self) -> dict:
        return {"type": type(self).__name__}


class Linear(Module):
    def __init__(self, in_features: int, out_features: int):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(np.zeros((in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def reset_parameters(self, rng):
        self.weight.data = xavier_uniform(self.weight.shape, rng)
        self.bias.data = np.zeros(self.bias.shape, dtype=default_dtype())

    def config(self):
        return {"type": "Linear", "in": self.in_features, "out": self.out_features}


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1, padding: int = 0):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(np.zeros((out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def reset_parameters(self, rng):
        self.weight.data = xavier_uniform(self.weight.shape, rng)
        self.bias.data = np.zeros(self.bias.shape, dtype=default_dtype())

    def config(self):
        return {"type": "Conv2d", "in": self.in_channels, "out": self.out_channels,
                "kernel": self.kernel_size, "stride": self.stride, "padding": self.padding}


class MaxPool2d(Module):
    def __init__(self, size: int = 2):
        self.size = size

    def forward(self, x):
        return F.max_pool2d(x, self.size)

    def config(self):
        return {"type": "MaxPool2d", "size": self.size}


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)


class Flatten(Module):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)


_LAYER_TYPES = {cls.__name__: cls for cls in (Linear, Conv2d, MaxPool2d, ReLU, Flatten)}


def layer_from_config(cfg: dict) -> Module:
    kind = cfg["type"]
    if kind == "Linear":
        return Linear(cfg["in"], cfg["out"])
    if kind == "Conv2d":
        return Conv2d(cfg["in"], cfg["out"], cfg["kernel"], cfg.get("stride", 1), cfg.get("padding", 0))
    if kind == "MaxPool2d":
        return MaxPool2d(cfg["size"])
    if kind in _LAYER_TYPES:
        return _LAYER_TYPES[kind]()
    raise ValueError(f"unknown layer type {kind!r}")


class Sequential(Module):
    def __init__(self, *layers: Module, input_shape: tuple[int, ...] | None = None, name: str = ""):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape) if input_shape else None
        self.name = name

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def named_parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"{i}.{n}", p) for n, p in layer.named_parameters())
        return out

    def reset_parameters(self, rng):
        for layer in self.layers:
            layer.reset_parameters(rng)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def config(self):
        return {"type": "Sequential", "name": self.name,
                "input_shape": list(self.input_shape) if self.input_shape else None,
                "layers": [layer.config() for layer in self.layers]}

    @classmethod
    def from_config(cls, cfg: dict) -> "Sequential":
        shape = cfg.get("input_shape")
        return cls(*(layer_from_config(c) for c in cfg["layers"]),
                   input_shape=tuple(shape) if shape else None, name=cfg.get("name", ""))

    @contextlib.contextmanager
    def frozen(self):
        """Stop recording parameter gradients, e.g. while differentiating w.r.t. the input."""
        params = self.parameters()
        saved = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(params, saved):
                p.requires_grad = flag

    def copy(self) -> "Sequential":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Sequential":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def get_weights(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def set_weights(self, weights) -> None:
        params = self.parameters()
        if len(weights) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(weights)}")
        for p, w in zip(params, weights):
            if p.shape != w.shape:
                raise ValueError(f"shape mismatch {p.shape} vs {w.shape}")
            p.data = np.array(w, dtype=p.data.dtype)

    def logits(self, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        """Forward pass without graph recording, batched over the leading axis."""
        dtype = self.parameters()[0].data.dtype if self.parameters() else default_dtype()
        x = np.asarray(x, dtype=dtype)
        with no_grad():
            outs = [self(Tensor(x[i:i + batch_size], dtype=dtype)).data
                    for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    def predict_proba(self, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        return F.softmax_np(self.logits(x, batch_size))
