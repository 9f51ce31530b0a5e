"""Per-style visual prompt generators.

Each style owns a generator built from a learnable template plus, in the
adaptive variants, a compact convolutional modulator that rescales the
template per input.  Training never opens the segmentation model: the only
gradient entering a generator is the input gradient handed back by the
sealed handle, chained into the local tape.

Variants:
  border    fixed border template, input-independent
  a_border  border template modulated per side and channel by the input
  full      fixed full-canvas template
  a_full    full-canvas template reweighted by an upsampled pixel map
"""

import dataclasses
import logging

import numpy as np

from .autograd import Tape, Tensor
from .autograd import ops
from .autograd.layers import Conv2d, BatchNorm2d, load_tensor_arrays, tensor_arrays
from .autograd.optim import MultiStepLr, SgdMomentum, lr_at
from .autograd.tensor import ShapeError, add, broadcast_to_batch, mul, reshape
from .checkpoint import load_checkpoint, pack_tag, save_checkpoint, unpack_tag
from .datasets import stack_images, stack_masks
from .seeding import mix_seed, stream

log = logging.getLogger(__name__)

VARIANTS = ("border", "a_border", "full", "a_full")
INIT_STRATEGIES = ("zero", "uniform", "normal", "meta")
SIDES = ("top", "bottom", "left", "right")


def _init_values(shape, strategy, rng):
    if strategy == "zero":
        return np.zeros(shape, np.float32)
    if strategy == "uniform":
        return rng.uniform(0.0, 1.0, shape).astype(np.float32)
    if strategy in ("normal", "meta"):  # meta starts from the normal draw
        return rng.normal(0.0, 0.1, shape).astype(np.float32)
    raise ValueError(f"unknown init strategy {strategy!r}")


class BorderTemplate:
    """Four learnable edge strips; the assembled canvas has an exactly zero center.

    Top and bottom span the full width; left and right cover only the middle
    rows, so the corners belong to the horizontal strips.
    """

    def __init__(self, channels, height, width, pad, strategy, rng):
        if pad <= 0 or 2 * pad >= min(height, width):
            raise ShapeError(f"pad {pad} does not fit a {height}x{width} canvas")
        self.channels = channels
        self.height = height
        self.width = width
        self.pad = pad
        self.sides = {
            name: Tensor(_init_values(shape, strategy, rng), requires_grad=True)
            for name, shape in self.side_shapes(channels, height, width, pad).items()
        }

    @staticmethod
    def side_shapes(channels, height, width, pad):
        mid = height - 2 * pad
        return {
            "top": (channels, pad, width),
            "bottom": (channels, pad, width),
            "left": (channels, mid, pad),
            "right": (channels, mid, pad),
        }

    def _placements(self):
        h, w, p = self.height, self.width, self.pad
        return {"top": (0, 0), "bottom": (h - p, 0), "left": (p, 0), "right": (p, w - p)}

    def assemble(self, alpha=None, batch=1):
        """Canvas (B, C, H, W) from the four strips, optionally side/channel scaled.

        ``alpha`` is a (B, 4, C) tensor of raw modulation coefficients in side
        order top, bottom, left, right; None means the bare template.
        """
        if alpha is not None:
            if alpha.ndim != 3 or alpha.shape[1] != 4 or alpha.shape[2] != self.channels:
                raise ShapeError(f"alpha must be (B, 4, {self.channels}), got {alpha.shape}")
            batch = alpha.shape[0]
        canvas = None
        for i, name in enumerate(SIDES):
            strip = self.sides[name]
            block = reshape(strip, (1,) + strip.shape)
            if alpha is None:
                block = broadcast_to_batch(block, batch)
            else:
                coeff = reshape(ops.slice_axis1(alpha, i, i + 1), (batch, self.channels, 1, 1))
                block = mul(block, coeff)
            row, col = self._placements()[name]
            piece = ops.embed2d(block, self.height, self.width, row, col)
            canvas = piece if canvas is None else add(canvas, piece)
        return canvas

    def tensors(self, prefix="template"):
        return {f"{prefix}.{name}": t for name, t in self.sides.items()}

    trainable_tensors = tensors


class FullTemplate:
    """A single learnable canvas covering the whole image."""

    def __init__(self, channels, height, width, strategy, rng):
        self.channels = channels
        self.height = height
        self.width = width
        self.canvas = Tensor(
            _init_values((channels, height, width), strategy, rng), requires_grad=True
        )

    def assemble(self, batch=1):
        return broadcast_to_batch(reshape(self.canvas, (1,) + self.canvas.shape), batch)

    def tensors(self, prefix="template"):
        return {f"{prefix}.canvas": self.canvas}

    trainable_tensors = tensors


def init_template(strategy, seed, channels=3, height=64, width=64, pad=6):
    """A fresh border template drawn with the named strategy.

    "meta" draws exactly like "normal"; the distinguishing pretraining phase
    is applied later by meta_pretrain.
    """
    if strategy not in INIT_STRATEGIES:
        raise ValueError(f"unknown init strategy {strategy!r}")
    rng = stream(seed, "template", strategy)
    return BorderTemplate(channels, height, width, pad, strategy, rng)


def disassemble_prompt(canvas, pad):
    """Slice an assembled (B, C, H, W) canvas back into its four border blocks."""
    canvas = np.asarray(canvas)
    h, w = canvas.shape[-2:]
    return {
        "top": canvas[..., :pad, :],
        "bottom": canvas[..., h - pad :, :],
        "left": canvas[..., pad : h - pad, :pad],
        "right": canvas[..., pad : h - pad, w - pad :],
    }


class ModulatorBlock:
    """Stride-2 residual block: Conv-BN-ReLU-Conv-BN plus a projection shortcut."""

    def __init__(self, c_in, c_out, rng):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=2, padding=1)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, stride=1, padding=1)
        self.bn2 = BatchNorm2d(c_out)
        self.proj = Conv2d(c_in, c_out, 1, rng, stride=2, padding=0)
        self.proj_bn = BatchNorm2d(c_out)

    def __call__(self, x, training):
        main = self.bn2(self.conv2(ops.relu(self.bn1(self.conv1(x), training))), training)
        return ops.relu(add(main, self.proj_bn(self.proj(x), training)))

    def tensors(self, prefix):
        out = {}
        for name in ("conv1", "bn1", "conv2", "bn2", "proj", "proj_bn"):
            out.update(getattr(self, name).tensors(f"{prefix}.{name}"))
        return out

    def trainable_tensors(self, prefix):
        out = {}
        for name in ("conv1", "bn1", "conv2", "bn2", "proj", "proj_bn"):
            out.update(getattr(self, name).trainable_tensors(f"{prefix}.{name}"))
        return out


class ModulatorNetwork:
    """Three stride-2 blocks (d, 2d, 4d channels) and a 1x1 head.

    mode "coeffs": head emits 4C channels, pooled to per-side per-channel
    coefficients (B, 4, C).  mode "map": head emits C channels, upsampled
    back to the input resolution for pixel-level reweighting.  Coefficients
    are raw linear outputs; no squashing is applied.
    """

    def __init__(self, in_channels, out_channels, depth, mode, rng):
        if mode not in ("coeffs", "map"):
            raise ValueError(f"unknown modulator mode {mode!r}")
        self.mode = mode
        self.out_channels = out_channels
        widths = (depth, 2 * depth, 4 * depth)
        self.blocks = []
        c = in_channels
        for wd in widths:
            self.blocks.append(ModulatorBlock(c, wd, rng))
            c = wd
        head_out = 4 * out_channels if mode == "coeffs" else out_channels
        self.head = Conv2d(c, head_out, 1, rng)

    def backbone(self, x, training):
        """The 1/8-resolution feature map feeding the head."""
        h = x
        for block in self.blocks:
            h = block(h, training)
        return h

    def __call__(self, x, training=False):
        if x.ndim != 4:
            raise ShapeError(f"modulator input must be 4-D, got {x.shape}")
        b, _, h, w = x.shape
        if h % 8 or w % 8:
            raise ShapeError(f"modulator input dims must be divisible by 8, got {h}x{w}")
        feats = self.head(self.backbone(x, training))
        if self.mode == "coeffs":
            pooled = ops.adaptive_avg_pool_to_1(feats)
            return reshape(pooled, (b, 4, self.out_channels))
        return ops.bilinear_upsample(feats, h, w)

    def tensors(self, prefix="modulator"):
        out = {}
        for i, block in enumerate(self.blocks):
            out.update(block.tensors(f"{prefix}.block{i}"))
        out.update(self.head.tensors(f"{prefix}.head"))
        return out

    def trainable_tensors(self, prefix="modulator"):
        out = {}
        for i, block in enumerate(self.blocks):
            out.update(block.trainable_tensors(f"{prefix}.block{i}"))
        out.update(self.head.trainable_tensors(f"{prefix}.head"))
        return out


class StylePromptGenerator:
    """One style's prompt generator: template, variant, and optional modulator."""

    def __init__(self, style, variant="a_border", channels=3, height=64, width=64,
                 pad=6, depth=8, init="normal", seed=0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if init not in INIT_STRATEGIES:
            raise ValueError(f"unknown init strategy {init!r}")
        self.style = style
        self.variant = variant
        self.channels = channels
        self.height = height
        self.width = width
        self.pad = pad
        self.depth = depth
        self.init = init
        rng = stream(seed, "spg", style, variant)
        if variant in ("border", "a_border"):
            self.template = BorderTemplate(channels, height, width, pad, init, rng)
        else:
            self.template = FullTemplate(channels, height, width, init, rng)
        if variant == "a_border":
            self.modulator = ModulatorNetwork(channels, channels, depth, "coeffs", rng)
        elif variant == "a_full":
            self.modulator = ModulatorNetwork(channels, channels, depth, "map", rng)
        else:
            self.modulator = None

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1:] != (self.channels, self.height, self.width):
            raise ShapeError(
                f"generator expects (B, {self.channels}, {self.height}, {self.width}), "
                f"got {x.shape}"
            )

    def generate(self, x, training=False):
        """The style prompt for a batch, shaped like the batch itself."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, np.float32))
        self._check_input(x)
        batch = x.shape[0]
        if self.variant == "border":
            return self.template.assemble(None, batch)
        if self.variant == "a_border":
            return self.template.assemble(self.modulator(x, training), batch)
        if self.variant == "full":
            return self.template.assemble(batch)
        coeff = self.modulator(x, training)
        return mul(reshape(self.template.canvas, (1,) + self.template.canvas.shape), coeff)

    def tensors(self):
        out = dict(self.template.tensors("template"))
        if self.modulator is not None:
            out.update(self.modulator.tensors("modulator"))
        return out

    def trainable_tensors(self):
        out = dict(self.template.trainable_tensors("template"))
        if self.modulator is not None:
            out.update(self.modulator.trainable_tensors("modulator"))
        return out

    def parameter_count(self):
        return sum(t.size for t in self.trainable_tensors().values())


def attach_prompt(x, prompt):
    """x' = x + P.  No clamping: the attachment stays linear in the prompt."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, np.float32))
    if x.shape != prompt.shape:
        raise ShapeError(f"prompt shape {prompt.shape} does not match input {x.shape}")
    return add(x, prompt)


@dataclasses.dataclass(frozen=True)
class SpgHyper:
    iters: int = 2000
    batch: int = 8
    lr: float = 1e-4
    momentum: float = 0.9
    # milestone epochs {150, 180, 210} of a 240-epoch run, kept as fractions
    # so the schedule shape survives any iteration budget
    milestone_fracs: tuple = (150 / 240, 180 / 240, 210 / 240)
    gamma: float = 0.1

    def __post_init__(self):
        if self.iters < 0 or self.batch <= 0 or self.lr <= 0:
            raise ValueError("SpgHyper requires iters >= 0, batch > 0, lr > 0")


def _spg_schedule(hyper):
    milestones = tuple(sorted({int(f * hyper.iters) for f in hyper.milestone_fracs}))
    return MultiStepLr(hyper.lr, milestones, hyper.gamma)


def train_spg(gen, samples, oracle, hyper, seed=0):
    """Optimize one generator against the sealed oracle on its stylized domain.

    Per iteration: batch, generate, attach, ask the oracle for the input
    gradient, chain it into the local tape, momentum step.  Returns the
    per-iteration loss curve.
    """
    if not samples:
        raise ValueError("stylized domain is empty")
    params = list(gen.trainable_tensors().values())
    opt = SgdMomentum(params, hyper.momentum)
    schedule = _spg_schedule(hyper)
    picker = stream(seed, "spg-batches", gen.style)
    losses = []
    for it in range(hyper.iters):
        idx = picker.integers(0, len(samples), size=hyper.batch)
        xb = stack_images(samples, idx)
        yb = stack_masks(samples, idx)
        with Tape() as tape:
            prompt = gen.generate(xb, training=True)
            prompted = attach_prompt(xb, prompt)
        loss, grad_x = oracle.input_grad(prompted.data, yb)
        tape.backward(prompted, seed=grad_x)
        opt.step(lr_at(schedule, it))
        opt.zero_grad()
        losses.append(loss)
        if it % max(1, hyper.iters // 5) == 0:
            log.info("spg[%s] %d/%d loss %.4f", gen.style, it, hyper.iters, loss)
    return losses


def meta_pretrain(generators, style_subsets, oracle, hyper=None, iters=200, seed=0):
    """Short per-style warmup pass shared by all generators before main training.

    Each generator runs the ordinary training loop for a small budget on its
    own style subset.  Zero iterations is a no-op by construction.
    """
    hyper = hyper or SpgHyper()
    warm = dataclasses.replace(hyper, iters=iters)
    for style, gen in generators.items():
        train_spg(gen, style_subsets[style], oracle, warm, seed=mix_seed(seed, "meta"))
    return generators


def save_generator(path, gen):
    arrays = tensor_arrays(gen.tensors())
    arrays["meta.variant"] = pack_tag(gen.variant)
    arrays["meta.init"] = pack_tag(gen.init)
    arrays["meta.style"] = pack_tag(gen.style)
    arrays["meta.dims"] = np.array(
        [gen.channels, gen.height, gen.width, gen.pad, gen.depth], np.float32
    )
    save_checkpoint(path, "SPGN", arrays)


def load_generator(path):
    _, arrays = load_checkpoint(path, expect_kind="SPGN")
    channels, height, width, pad, depth = (int(v) for v in arrays["meta.dims"])
    gen = StylePromptGenerator(
        unpack_tag(arrays["meta.style"]),
        unpack_tag(arrays["meta.variant"]),
        channels, height, width, pad, depth,
        init=unpack_tag(arrays["meta.init"]),
    )
    load_tensor_arrays(gen.tensors(), arrays)
    return gen
