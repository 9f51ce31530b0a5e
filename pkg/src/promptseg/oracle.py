"""The frozen segmentation model and its sealed handle.

The model is a small encoder-decoder CNN: three conv-bn-relu stages with
stride 2 (widths 16, 32, 64, 5x5 kernels), a 1x1 conv to class logits at 1/8
resolution, and bilinear upsampling back to the input size.  After
pretraining it is sealed behind ``OracleHandle``, whose surface is prediction
and input-gradient only: both take and return plain numpy arrays, so no
caller tape can reach through the boundary, and internal weights never
receive gradients.
"""

import hashlib
import logging

import numpy as np

from .autograd import Tape, Tensor, no_grad
from .autograd import ops
from .autograd.layers import (
    BatchNorm2d,
    Conv2d,
    load_tensor_arrays,
    tensor_arrays,
)
from .autograd.optim import AdamW
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import stack_images, stack_masks
from .seeding import stream

log = logging.getLogger(__name__)


class SegModel:
    """Encoder-decoder segmentation network over (B, 3, H, W) with H, W % 8 == 0."""

    def __init__(self, class_count, rng, widths=(16, 32, 64), kernel=5):
        self.class_count = class_count
        self.widths = tuple(widths)
        self.kernel = kernel
        pad = kernel // 2
        self.stages = []
        c_in = 3
        for c_out in self.widths:
            conv = Conv2d(c_in, c_out, kernel, rng, stride=2, padding=pad)
            bn = BatchNorm2d(c_out)
            self.stages.append((conv, bn))
            c_in = c_out
        self.head = Conv2d(c_in, class_count, 1, rng)

    def encode(self, x, training):
        h = x
        for conv, bn in self.stages:
            h = ops.relu(bn(conv(h), training))
        return h

    def forward(self, x, training=False):
        _, _, h_in, w_in = x.shape
        if h_in % 8 or w_in % 8:
            raise ValueError(f"spatial dims must be divisible by 8, got {h_in}x{w_in}")
        h = self.encode(x, training)
        logits = self.head(h)
        return ops.bilinear_upsample(logits, h_in, w_in)

    def tensors(self):
        out = {}
        for i, (conv, bn) in enumerate(self.stages):
            out.update(conv.tensors(f"stage{i}.conv"))
            out.update(bn.tensors(f"stage{i}.bn"))
        out.update(self.head.tensors("head"))
        return out

    def trainable(self):
        out = {}
        for i, (conv, bn) in enumerate(self.stages):
            out.update(conv.trainable_tensors(f"stage{i}.conv"))
            out.update(bn.trainable_tensors(f"stage{i}.bn"))
        out.update(self.head.trainable_tensors("head"))
        return out

    def parameter_count(self):
        return sum(t.size for t in self.trainable().values())

    def set_trainable(self, flag):
        for t in self.trainable().values():
            t.requires_grad = flag


def pretrain_oracle(samples, iters, seed, batch_size=8, lr=5e-3, class_count=None,
                    widths=(16, 32, 64), kernel=5):
    """Cross-entropy training of a fresh SegModel on the base domain.

    Returns (model, per-iteration losses).  A non-finite loss aborts
    immediately via the op-level finite guard.
    """
    if not samples:
        raise ValueError("base domain is empty")
    if class_count is None:
        class_count = samples[0].class_count
    model = SegModel(class_count, stream(seed, "oracle-init"), widths, kernel)
    if iters <= 0:
        return model, []
    picker = stream(seed, "oracle-batches")
    opt = AdamW(list(model.trainable().values()), betas=(0.9, 0.999), weight_decay=0.0)
    losses = []
    for it in range(iters):
        idx = picker.integers(0, len(samples), size=batch_size)
        x = Tensor(stack_images(samples, idx))
        y = stack_masks(samples, idx)
        with Tape() as tape:
            logits = model.forward(x, training=True)
            loss = ops.cross_entropy(logits, y)
        tape.backward(loss)
        opt.step(lr)
        opt.zero_grad()
        losses.append(loss.item())
        if it % max(1, iters // 5) == 0:
            log.info("oracle pretrain %d/%d loss %.4f", it, iters, losses[-1])
    return model, losses


def fingerprint_tensors(tensors) -> int:
    """64-bit content hash over named arrays (names, shapes, and bytes)."""
    h = hashlib.blake2b(digest_size=8)
    for name in sorted(tensors):
        arr = tensors[name]
        data = arr.data if isinstance(arr, Tensor) else arr
        a = np.ascontiguousarray(data, dtype="<f4")
        h.update(name.encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return int.from_bytes(h.digest(), "little")


class OracleHandle:
    """Sealed model: exposes prediction and input-gradient, nothing else.

    Inputs and outputs are plain numpy arrays.  Internal parameters have
    requires_grad off, so backward passes reach the input only.
    """

    def __init__(self, model: SegModel):
        model.set_trainable(False)
        self._model = model
        self._fingerprint = fingerprint_tensors(model.tensors())

    @property
    def fingerprint(self) -> int:
        return self._fingerprint

    @property
    def class_count(self) -> int:
        return self._model.class_count

    @property
    def parameter_count(self) -> int:
        return self._model.parameter_count()

    def current_fingerprint(self) -> int:
        """Recompute from live weights; equals ``fingerprint`` while sealed."""
        return fingerprint_tensors(self._model.tensors())

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {x.shape}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ValueError(f"spatial dims must be divisible by 8, got {x.shape[2]}x{x.shape[3]}")
        if not np.all(np.isfinite(x)):
            raise ValueError("input contains non-finite values")
        return x

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode logits (B, K, H, W)."""
        x = self._check_input(x)
        with no_grad():
            return self._model.forward(Tensor(x), training=False).data

    def predict_mask(self, x: np.ndarray) -> np.ndarray:
        return self.predict(x).argmax(axis=1).astype(np.uint8)

    def input_grad(self, x: np.ndarray, target: np.ndarray):
        """Cross-entropy loss and its gradient with respect to the input only."""
        x = self._check_input(x)
        target = np.asarray(target)
        xt = Tensor(x, requires_grad=True)
        with Tape() as tape:
            logits = self._model.forward(xt, training=False)
            loss = ops.cross_entropy(logits, target)
        tape.backward(loss)
        return loss.item(), xt.grad


def seal(model: SegModel) -> OracleHandle:
    return OracleHandle(model)


def save_oracle(path, model: SegModel):
    save_checkpoint(path, "ORCL", tensor_arrays(model.tensors()))


def load_oracle(path) -> SegModel:
    _, arrays = load_checkpoint(path, expect_kind="ORCL")
    widths, kernel, k = _infer_arch(arrays)
    model = SegModel(k, stream(0, "load"), widths, kernel)
    load_tensor_arrays(model.tensors(), arrays)
    return model


def _infer_arch(arrays):
    widths = []
    i = 0
    while f"stage{i}.conv.weight" in arrays:
        widths.append(arrays[f"stage{i}.conv.weight"].shape[0])
        i += 1
    if not widths or "head.weight" not in arrays:
        raise ValueError("checkpoint does not contain a segmentation model")
    kernel = arrays["stage0.conv.weight"].shape[2]
    k = arrays["head.weight"].shape[0]
    return tuple(widths), kernel, k
