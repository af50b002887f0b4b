"""Masked generative feature distillation: masks, the generative block,
and the distillation losses.

The student's stage feature is channel-aligned by a 1x1 conv, multiplied
by a freshly drawn binary mask, pushed through a small conv block, and
penalized by the raw squared-L2 distance to the teacher's full feature.
A direct feature-mimicking loss and a temperature-softened logit loss are
provided as baselines/add-ons.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Parameter, _result, add, conv2d, mul_const, relu, scale,
                     sq_l2_sum)

MASK_MODES = ("spatial", "channel")


@dataclass(frozen=True)
class MaskConfig:
    """How masks are drawn: spatial (per-pixel) or channel, with masked ratio."""

    mode: str = "spatial"
    ratio: float = 0.5
    rng_seed: int = 0

    def validate(self):
        if self.mode not in MASK_MODES:
            raise ValueError(f"mask mode must be one of {MASK_MODES}, got {self.mode!r}")
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1), got {self.ratio}")
        return self


class Mask:
    """Binary mask: (N, H, W) bits for spatial mode, (N, C) for channel mode."""

    __slots__ = ("mode", "bits")

    def __init__(self, mode, bits):
        self.mode = mode
        self.bits = bits

    @property
    def masked_fraction(self):
        return float(1.0 - self.bits.mean())


def mask_rng(run_seed, stage_index, iteration):
    """Named RNG stream for one stage of one iteration.

    Deriving the stream from (run seed, stage, iteration) keeps mask
    sequences identical across runs that share a seed but differ in other
    hyper-parameters, and isolated from data-order and init streams.
    """
    return np.random.default_rng(np.random.SeedSequence((run_seed, stage_index, iteration)))


def sample_mask(n, c, h, w, cfg, rng):
    """Draw a fresh mask: each position keeps its value iff its uniform
    draw is >= the masked ratio (so ratio 0 masks nothing)."""
    cfg.validate()
    if min(n, c, h, w) < 1:
        raise ValueError(f"mask dims must be >= 1, got {(n, c, h, w)}")
    if cfg.mode == "spatial":
        draws = rng.random((n, h, w))
    else:
        draws = rng.random((n, c))
    return Mask(cfg.mode, (draws >= cfg.ratio).astype(np.float32))


def apply_mask(feature, mask):
    """Multiply an NCHW feature by a mask, broadcast over the unmasked axis."""
    if feature.ndim != 4:
        raise ValueError(f"apply_mask expects an NCHW feature, got {feature.shape}")
    n, c, h, w = feature.shape
    if mask.mode == "spatial":
        if mask.bits.shape != (n, h, w):
            raise ValueError(f"spatial mask {mask.bits.shape} does not match "
                             f"feature {feature.shape}")
        bits = mask.bits[:, None, :, :]
    else:
        if mask.bits.shape != (n, c):
            raise ValueError(f"channel mask {mask.bits.shape} does not match "
                             f"feature {feature.shape}")
        bits = mask.bits[:, :, None, None]
    return mul_const(feature, bits)


def _kaiming_conv(rng, out_ch, in_ch, k):
    bound = np.sqrt(6.0 / (in_ch * k * k))
    return rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))


class AlignConv:
    """1x1 adaptation conv mapping student channels onto teacher channels."""

    def __init__(self, in_channels, out_channels, seed=0, name="align", dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = Parameter(f"{name}.weight",
                                _kaiming_conv(rng, out_channels, in_channels, 1).astype(dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels, dtype=dtype))

    def __call__(self, x):
        return conv2d(x, self.weight.tensor, self.bias.tensor)

    def parameters(self):
        return [self.weight, self.bias]

    def make_identity(self):
        """Set the conv to the identity map (requires equal channel counts)."""
        if self.in_channels != self.out_channels:
            raise ValueError("identity alignment needs matching channel counts")
        w = np.zeros_like(self.weight.data)
        for i in range(self.out_channels):
            w[i, i, 0, 0] = 1.0
        self.weight.tensor.data = w
        self.bias.tensor.data = np.zeros_like(self.bias.data)


class GenerativeBlock:
    """Per-stage trainable unit that rebuilds the teacher feature from the
    masked, channel-aligned student feature.

    The canonical shape is align -> conv3x3 -> ReLU -> conv3x3; `depth`
    (1, 2 or 3 conv layers) and `kernel` (3 or 5) cover the composition
    ablation, and kernel 1 exists for masking-locality diagnostics.
    Padding preserves the spatial size for every variant.
    """

    def __init__(self, student_channels, teacher_channels, depth=2, kernel=3,
                 seed=0, name="gen", dtype=np.float32):
        if depth not in (1, 2, 3):
            raise ValueError(f"generative block depth must be 1, 2 or 3, got {depth}")
        if kernel not in (1, 3, 5):
            raise ValueError(f"generative block kernel must be 1, 3 or 5, got {kernel}")
        if student_channels < 1 or teacher_channels < 1:
            raise ValueError("channel counts must be >= 1")
        self.depth = depth
        self.kernel = kernel
        self.teacher_channels = teacher_channels
        self.f_align = AlignConv(student_channels, teacher_channels,
                                 seed=seed, name=f"{name}.align", dtype=dtype)
        rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
        self.convs = []
        for i in range(1, depth + 1):
            w = Parameter(f"{name}.conv{i}.weight",
                          _kaiming_conv(rng, teacher_channels, teacher_channels, kernel).astype(dtype))
            b = Parameter(f"{name}.conv{i}.bias", np.zeros(teacher_channels, dtype=dtype))
            self.convs.append((w, b))

    def align(self, x):
        return self.f_align(x)

    def parameters(self):
        params = self.f_align.parameters()
        for w, b in self.convs:
            params.extend((w, b))
        return params

    def make_identity(self):
        """Turn every conv into a centered delta kernel with zero bias, so the
        block is the identity map (exact for depth 1; depth >= 2 still clips
        negatives through the ReLUs)."""
        mid = self.kernel // 2
        for w, b in self.convs:
            data = np.zeros_like(w.data)
            for i in range(self.teacher_channels):
                data[i, i, mid, mid] = 1.0
            w.tensor.data = data
            b.tensor.data = np.zeros_like(b.data)


def generate(block, masked_aligned):
    """Run the generative conv stack on an already-aligned (masked) feature."""
    if masked_aligned.ndim != 4:
        raise ValueError(f"generate expects an NCHW tensor, got {masked_aligned.shape}")
    if masked_aligned.shape[1] != block.teacher_channels:
        raise ValueError(f"generate expects {block.teacher_channels} channels "
                         f"(aligned input), got {masked_aligned.shape[1]}")
    pad = block.kernel // 2
    out = masked_aligned
    for i, (w, b) in enumerate(block.convs):
        out = conv2d(out, w.tensor, b.tensor, padding=pad)
        if i < len(block.convs) - 1:
            out = relu(out)
    return out


def _per_stage_rngs(rng, count):
    if isinstance(rng, np.random.Generator):
        return [rng] * count
    rngs = list(rng)
    if len(rngs) != count:
        raise ValueError(f"need {count} per-stage generators, got {len(rngs)}")
    return rngs


def mgd_loss(student_feats, teacher_feats, blocks, cfg, rng, normalize=False):
    """Masked-generative distillation loss, summed over stages.

    Per stage: align the student feature, cover it with a freshly drawn
    mask, generate, and accumulate the squared-L2 distance to the teacher
    feature — a raw sum over channels and space per sample, averaged over
    the batch (the per-sample sum is what the loss formulation defines;
    batch-averaging keeps the loss-balance weight's meaning independent of
    batch size). Gradients flow into the student and the block, never into
    the teacher. `rng` is one generator or a per-stage list.
    """
    cfg.validate()
    if not (len(student_feats) == len(teacher_feats) == len(blocks)) or not student_feats:
        raise ValueError(f"stage lists must have equal non-zero length, got "
                         f"{len(student_feats)}/{len(teacher_feats)}/{len(blocks)}")
    rngs = _per_stage_rngs(rng, len(student_feats))
    total = None
    denom = 0
    for s, t, block, stage_rng in zip(student_feats, teacher_feats, blocks, rngs):
        if s.shape[0] != t.shape[0] or s.shape[2:] != t.shape[2:]:
            raise ValueError(f"student {s.shape} and teacher {t.shape} disagree "
                             "in batch or spatial size; only channels may differ")
        aligned = block.align(s)
        mask = sample_mask(*t.shape, cfg, stage_rng)
        gen = generate(block, apply_mask(aligned, mask))
        term = scale(sq_l2_sum(t.detach(), gen), 1.0 / t.shape[0])
        total = term if total is None else add(total, term)
        denom += int(np.prod(t.shape[1:]))
    if normalize:
        total = scale(total, 1.0 / denom)
    return total


def mimic_loss(student_feat, teacher_feat, f_align):
    """Direct feature-mimicking baseline: squared-L2 between the teacher
    feature and the channel-aligned student feature, with the same
    per-sample-sum / batch-mean reduction as the generative loss."""
    aligned = f_align(student_feat)
    if aligned.shape != teacher_feat.shape:
        raise ValueError(f"aligned student {aligned.shape} does not match "
                         f"teacher {teacher_feat.shape}")
    return scale(sq_l2_sum(teacher_feat.detach(), aligned), 1.0 / teacher_feat.shape[0])


def total_loss(l_original, l_dis, alpha):
    """Combined objective: task loss plus alpha times the distillation loss."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return add(l_original, scale(l_dis, alpha))


def kd_logit_loss(student_logits, teacher_logits, temperature):
    """Temperature-softened KL(teacher || student) on logits, batch-mean,
    scaled by temperature^2."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"logit shapes differ: {student_logits.shape} vs "
                         f"{teacher_logits.shape}")
    tau = float(temperature)
    n = student_logits.shape[0]

    def log_softmax(z):
        z = z / tau
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    logp_s = log_softmax(student_logits.data)
    logp_t = log_softmax(teacher_logits.data)
    p_t = np.exp(logp_t)
    row_kl = (p_t * (logp_t - logp_s)).sum(axis=1)
    loss = tau * tau * row_kl.mean()

    def vjp(g):
        ds = dt = None
        if student_logits.requires_grad:
            ds = g * (tau / n) * (np.exp(logp_s) - p_t)
        if teacher_logits.requires_grad:
            dt = g * (tau / n) * p_t * ((logp_t - logp_s) - row_kl[:, None])
        return ds, dt

    return _result(np.asarray(loss, dtype=student_logits.data.dtype),
                   (student_logits, teacher_logits), vjp)
