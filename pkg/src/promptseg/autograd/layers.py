"""Thin layer containers: parameters plus a forward call.

Initialization follows Kaiming-normal fan-in scaling for convolutions
(std = sqrt(2 / fan_in), zero biases) and 1/sqrt(fan_in) for linear maps.
Every initializer takes an explicit numpy Generator so construction is
reproducible from a seed.
"""

import numpy as np

from . import ops
from .tensor import Tensor, current_dtype


def _param(arr, trainable):
    return Tensor(np.asarray(arr, dtype=current_dtype()), requires_grad=trainable)


class Conv2d:
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, trainable=True):
        std = np.sqrt(2.0 / (c_in * kernel * kernel))
        self.weight = _param(rng.normal(0.0, std, (c_out, c_in, kernel, kernel)), trainable)
        self.bias = _param(np.zeros(c_out), trainable)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def tensors(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def trainable_tensors(self, prefix):
        return self.tensors(prefix)


class BatchNorm2d:
    def __init__(self, channels, trainable=True, momentum=0.1, eps=1e-5):
        self.gamma = _param(np.ones(channels), trainable)
        self.beta = _param(np.zeros(channels), trainable)
        self.state = ops.BnState(channels, momentum, eps)

    def __call__(self, x, training):
        return ops.batch_norm2d(x, self.gamma, self.beta, self.state, training)

    def tensors(self, prefix):
        return {
            f"{prefix}.gamma": self.gamma,
            f"{prefix}.beta": self.beta,
            f"{prefix}.running_mean": self.state.running_mean,
            f"{prefix}.running_var": self.state.running_var,
        }

    def trainable_tensors(self, prefix):
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


class Linear:
    def __init__(self, d_in, d_out, rng, trainable=True, std=None):
        if std is None:
            std = 1.0 / np.sqrt(d_in)
        self.weight = _param(rng.normal(0.0, std, (d_in, d_out)), trainable)
        self.bias = _param(np.zeros(d_out), trainable)

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)

    def tensors(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def trainable_tensors(self, prefix):
        return self.tensors(prefix)


def tensor_arrays(tensors):
    """Map a name->Tensor/array dict to plain f32 arrays (for serialization)."""
    out = {}
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else t
        out[name] = np.asarray(arr, dtype=np.float32)
    return out


def load_tensor_arrays(tensors, arrays):
    """Copy named f32 arrays back into a name->Tensor/array dict, in place."""
    for name, t in tensors.items():
        if name not in arrays:
            raise KeyError(f"missing tensor {name!r}")
        src = arrays[name]
        dst = t.data if isinstance(t, Tensor) else t
        if src.shape != dst.shape:
            raise ValueError(f"tensor {name!r} shape {src.shape} != expected {dst.shape}")
        dst[...] = src.astype(dst.dtype)
