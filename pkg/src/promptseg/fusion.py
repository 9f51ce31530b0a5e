"""Adaptive fusion of style prompts.

At inference nobody announces the test style, so the n per-style prompts are
blended: a frozen shared encoder embeds the input and every normalized
prompt, two small linear heads map those embeddings to a query and keys,
and the resulting attention row is squashed through tanh(softmax(.)) into
fusion weights.  Only the two heads ever train; encoder, generators, and
the segmentation oracle stay byte-identical through the whole phase.
"""

import dataclasses
import logging

import numpy as np

from .autograd import Tape, Tensor, no_grad
from .autograd import ops
from .autograd.layers import (
    BatchNorm2d,
    Conv2d,
    Linear,
    load_tensor_arrays,
    tensor_arrays,
)
from .autograd.optim import AdamW, CosineWarmRestarts, lr_at
from .autograd.tensor import ShapeError, reshape
from .checkpoint import load_checkpoint, pack_u64, save_checkpoint, unpack_u64
from .datasets import stack_images, stack_masks
from .oracle import fingerprint_tensors
from .prompts import attach_prompt
from .seeding import stream

log = logging.getLogger(__name__)


class SharedEncoder:
    """Frozen feature extractor: three stride-2 conv-bn-relu stages, then a pool.

    The same weights embed images and prompts.  Batch norm always runs on
    stored running statistics, so encoding is a pure function.
    """

    def __init__(self, rng, widths=(16, 32, 64), kernel=5):
        self.widths = tuple(widths)
        self.kernel = kernel
        pad = kernel // 2
        self.stages = []
        c_in = 3
        for c_out in self.widths:
            conv = Conv2d(c_in, c_out, kernel, rng, stride=2, padding=pad, trainable=False)
            bn = BatchNorm2d(c_out, trainable=False)
            self.stages.append((conv, bn))
            c_in = c_out

    @classmethod
    def from_seg_model(cls, model):
        """Reuse the segmentation model's encoder stages (copied, then frozen)."""
        enc = cls(stream(0, "enc-shell"), model.widths, model.kernel)
        stage_arrays = {
            name: arr
            for name, arr in tensor_arrays(model.tensors()).items()
            if name.startswith("stage")
        }
        load_tensor_arrays(enc.tensors(), stage_arrays)
        return enc

    @classmethod
    def random(cls, seed, widths=(16, 32, 64), kernel=5):
        """Frozen random-weights fallback (ablation baseline)."""
        return cls(stream(seed, "enc-random"), widths, kernel)

    @property
    def feature_dim(self):
        return self.widths[-1]

    def encode(self, x):
        """Feature vector (B, D) for images or prompts alike."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, np.float32))
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"encoder expects (B, 3, H, W), got {x.shape}")
        h = x
        for conv, bn in self.stages:
            h = ops.relu(bn(conv(h), training=False))
        pooled = ops.adaptive_avg_pool_to_1(h)
        return reshape(pooled, (x.shape[0], self.feature_dim))

    def tensors(self):
        out = {}
        for i, (conv, bn) in enumerate(self.stages):
            out.update(conv.tensors(f"stage{i}.conv"))
            out.update(bn.tensors(f"stage{i}.bn"))
        return out

    def fingerprint(self):
        return fingerprint_tensors(self.tensors())


class FusionHeads:
    """The only trainable pieces of the fusion stage: W_x for the input
    embedding, W_p for prompt embeddings."""

    def __init__(self, feature_dim=64, embed_dim=32, seed=0):
        rng = stream(seed, "apf-heads")
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        self.wx = Linear(feature_dim, embed_dim, rng)
        self.wp = Linear(feature_dim, embed_dim, rng)

    def tensors(self):
        out = dict(self.wx.tensors("wx"))
        out.update(self.wp.tensors("wp"))
        return out

    trainable_tensors = tensors

    def parameter_count(self):
        return sum(t.size for t in self.tensors().values())


def collect_prompts(generators, x, per_channel=True):
    """Generate and L2-normalize every style prompt; a plain (B, n, C, H, W) stack.

    Returned as raw data on purpose: downstream gradients flow into the
    fusion weights, never back into the generators.
    """
    if not generators:
        raise ValueError("no generators given")
    x = np.asarray(x, np.float32)
    normalize = ops.l2_normalize_channels if per_channel else ops.l2_normalize_tensor
    stack = []
    with no_grad():
        for gen in generators:
            prompt = gen.generate(x, training=False)
            stack.append(normalize(prompt).data)
    return np.stack(stack, axis=1)


def attention_scores(enc, heads, x, prompts):
    """Cross-attention row per sample: query from x, one key per prompt."""
    b, n = prompts.shape[:2]
    query = heads.wx(enc.encode(x))
    flat = prompts.reshape((b * n,) + prompts.shape[2:])
    keys = reshape(heads.wp(enc.encode(flat)), (b, n, heads.embed_dim))
    return ops.bilinear_scores(query, keys)


def fusion_weights(scores, use_softmax=True, use_tanh=True):
    """w = tanh(softmax(A)) over the prompt axis; flags expose the ablations."""
    w = ops.softmax(scores, axis=1) if use_softmax else scores
    return ops.tanh(w) if use_tanh else w


def fuse_prompts(weights, prompts):
    """P_fused = sum_i w[:, i] * P_i."""
    return ops.weighted_sum(weights, prompts)


def fusion_forward(x, generators, enc, heads, per_channel=True,
                   use_softmax=True, use_tanh=True):
    """The full fusion pass; training and inference share this exact path.

    Returns (prompted input, fusion weights, normalized prompt stack).
    """
    x = np.asarray(x, np.float32)
    prompts = collect_prompts(generators, x, per_channel)
    scores = attention_scores(enc, heads, x, prompts)
    weights = fusion_weights(scores, use_softmax, use_tanh)
    fused = fuse_prompts(weights, prompts)
    return attach_prompt(x, fused), weights, prompts


def infer(x, generators, enc, heads, oracle, per_channel=True,
          use_softmax=True, use_tanh=True, return_weights=False):
    """Fused-prompt prediction: argmax class mask for each input."""
    with no_grad():
        prompted, weights, _ = fusion_forward(
            x, generators, enc, heads, per_channel, use_softmax, use_tanh
        )
    mask = oracle.predict_mask(prompted.data)
    if return_weights:
        return mask, weights.data.copy()
    return mask


@dataclasses.dataclass(frozen=True)
class ApfHyper:
    iters: int = 4000
    batch: int = 8
    lr: float = 1e-4
    betas: tuple = (0.5, 0.999)
    min_lr: float = 1e-5
    # first cosine restart after this fraction of the budget, periods doubling
    restart_frac: float = 1 / 8
    t_mult: int = 2

    def __post_init__(self):
        if self.iters < 0 or self.batch <= 0 or self.lr <= 0:
            raise ValueError("ApfHyper requires iters >= 0, batch > 0, lr > 0")


def _apf_schedule(hyper):
    t0 = max(1, int(hyper.iters * hyper.restart_frac))
    return CosineWarmRestarts(hyper.lr, hyper.min_lr, t0, hyper.t_mult)


def train_apf(heads, samples, generators, enc, oracle, hyper, seed=0,
              per_channel=True, use_softmax=True, use_tanh=True):
    """Optimize W_x and W_p against the sealed oracle on source images.

    Everything else is frozen: prompts enter as constants, the encoder
    records nothing on the tape, and the oracle only hands back input
    gradients.  Returns the per-iteration loss curve.
    """
    if not samples:
        raise ValueError("source domain is empty")
    params = list(heads.trainable_tensors().values())
    opt = AdamW(params, betas=hyper.betas, weight_decay=0.0)
    schedule = _apf_schedule(hyper)
    picker = stream(seed, "apf-batches")
    losses = []
    for it in range(hyper.iters):
        idx = picker.integers(0, len(samples), size=hyper.batch)
        xb = stack_images(samples, idx)
        yb = stack_masks(samples, idx)
        with Tape() as tape:
            prompted, _, _ = fusion_forward(
                xb, generators, enc, heads, per_channel, use_softmax, use_tanh
            )
        loss, grad_x = oracle.input_grad(prompted.data, yb)
        tape.backward(prompted, seed=grad_x)
        opt.step(lr_at(schedule, it))
        opt.zero_grad()
        losses.append(loss)
        if it % max(1, hyper.iters // 5) == 0:
            log.info("apf %d/%d loss %.4f", it, hyper.iters, loss)
    return losses


def save_heads(path, heads, encoder_fingerprint):
    arrays = tensor_arrays(heads.tensors())
    arrays["meta.embed_dim"] = np.array([heads.embed_dim], np.float32)
    arrays["meta.encoder_fp"] = pack_u64(encoder_fingerprint)
    save_checkpoint(path, "APFH", arrays)


def load_heads(path):
    """Returns (heads, fingerprint of the encoder they were trained against)."""
    _, arrays = load_checkpoint(path, expect_kind="APFH")
    feature_dim, embed_dim = arrays["wx.weight"].shape
    heads = FusionHeads(feature_dim, embed_dim)
    load_tensor_arrays(heads.tensors(), arrays)
    return heads, unpack_u64(arrays["meta.encoder_fp"])
