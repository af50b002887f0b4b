"""Configurable small CNN backbones exposing named per-stage features.

A model is a flat dict of named parameters plus per-layer batch-norm
running statistics; the forward pass walks a layer plan derived from the
config, so the same code serves teacher and student roles at any width
and depth. Checkpoints use a simple binary format (see save_checkpoint).
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import (BatchNormStats, Parameter, Tensor, add, batch_norm2d,
                     conv2d, global_avg_pool, linear, relu)

BLOCK_KINDS = ("basic_residual", "plain")

CHECKPOINT_MAGIC = b"MGDC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class StageSpec:
    block_count: int
    channels: int
    downsample: bool


@dataclass(frozen=True)
class BackboneConfig:
    """Declarative description of a backbone: stem, stages, block kind, head."""

    stem_channels: int
    stage_blocks: tuple  # of StageSpec or (block_count, channels, downsample)
    block_kind: str
    num_classes: int
    in_channels: int = 3

    def stages(self):
        return tuple(s if isinstance(s, StageSpec) else StageSpec(*s) for s in self.stage_blocks)

    def validate(self):
        if self.stem_channels < 1:
            raise ValueError(f"stem_channels must be >= 1, got {self.stem_channels}")
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        stages = self.stages()
        if len(stages) < 1:
            raise ValueError("stage_blocks must contain at least one stage")
        for i, s in enumerate(stages, 1):
            if s.block_count < 1:
                raise ValueError(f"stage {i}: block_count must be >= 1, got {s.block_count}")
            if s.channels < 1:
                raise ValueError(f"stage {i}: channels must be >= 1, got {s.channels}")
        return self


def parse_backbone_spec(text):
    """Parse a compact backbone string into a BackboneConfig.

    Format: `kind=basic_residual;stem=32;stages=32x2,64x2d,128x2d;classes=10`
    where each stage entry is CHANNELSxBLOCKS with a trailing `d` if the
    stage downsamples. `in=3` overrides the input channel count.
    """
    fields = {"kind": "basic_residual", "in": "3"}
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ValueError(f"bad backbone spec fragment {part!r} in {text!r}")
        key, value = part.split("=", 1)
        fields[key.strip()] = value.strip()
    missing = [k for k in ("stem", "stages", "classes") if k not in fields]
    if missing:
        raise ValueError(f"backbone spec {text!r} is missing {', '.join(missing)}")
    stages = []
    for entry in fields["stages"].split(","):
        entry = entry.strip()
        down = entry.endswith("d")
        if down:
            entry = entry[:-1]
        channels, _, blocks = entry.partition("x")
        stages.append(StageSpec(int(blocks or 1), int(channels), down))
    return BackboneConfig(
        stem_channels=int(fields["stem"]),
        stage_blocks=tuple(stages),
        block_kind=fields["kind"],
        num_classes=int(fields["classes"]),
        in_channels=int(fields["in"]),
    ).validate()


# Desk-scale reference pair: teacher is a 4-stage basic-residual net, the
# student halves every width and uses a single block per stage.
BACKBONE_PRESETS = {
    "desk_teacher": "kind=basic_residual;stem=32;stages=32x2,64x2d,128x2d,256x2d;classes=10",
    "desk_student": "kind=basic_residual;stem=16;stages=16x1,32x1d,64x1d,128x1d;classes=10",
    "tiny_teacher": "kind=basic_residual;stem=8;stages=8x1,16x1d,32x1d;classes=10",
    "tiny_student": "kind=basic_residual;stem=4;stages=4x1,8x1d,16x1d;classes=10",
}


def resolve_backbone(spec):
    """Accept a BackboneConfig, a preset name, or a compact spec string."""
    if isinstance(spec, BackboneConfig):
        return spec.validate()
    return parse_backbone_spec(BACKBONE_PRESETS.get(spec, spec))


class Model:
    """A built backbone: named parameters, BN running stats, and a mode flag."""

    def __init__(self, config):
        self.config = config
        self.mode = "train"
        self.params = {}
        self.bn_stats = {}
        self._plan = _layer_plan(config)

    # -- structure ----------------------------------------------------------

    @property
    def stage_names(self):
        return [f"stage{i}" for i in range(1, len(self.config.stages()) + 1)]

    def stage_channels(self, stage_name):
        stages = self.config.stages()
        idx = self.stage_names.index(stage_name)
        return stages[idx].channels

    def parameters(self):
        return list(self.params.values())

    @property
    def frozen(self):
        return not any(p.tensor.requires_grad for p in self.params.values())

    def set_mode(self, mode):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode

    # -- forward ------------------------------------------------------------

    def _conv(self, x, name, stride, padding):
        return conv2d(x, self.params[name + ".weight"].tensor, stride=stride, padding=padding)

    def _bn(self, x, name, training):
        return batch_norm2d(x, self.params[name + ".gamma"].tensor,
                            self.params[name + ".beta"].tensor,
                            self.bn_stats[name], training)

    def forward_with_features(self, batch):
        """Run the backbone; returns (logits, {stage name: feature tensor})."""
        if not isinstance(batch, Tensor):
            batch = Tensor(batch)
        if batch.ndim != 4:
            raise ValueError(f"expected an NCHW batch, got shape {batch.shape}")
        if batch.shape[1] != self.config.in_channels:
            raise ValueError(f"batch has {batch.shape[1]} channels, model expects "
                             f"{self.config.in_channels}")
        if batch.shape[2] < 1 or batch.shape[3] < 1:
            raise ValueError(f"batch spatial size {batch.shape[2]}x{batch.shape[3]} is invalid")
        training = self.mode == "train"

        x = relu(self._bn(self._conv(batch, "stem.conv", 1, 1), "stem.bn", training))
        features = {}
        for stage_name, blocks in self._plan:
            for blk in blocks:
                x = self._block_forward(x, blk, training)
            features[stage_name] = x
        pooled = global_avg_pool(x)
        logits = linear(pooled, self.params["head.weight"].tensor,
                        self.params["head.bias"].tensor)
        return logits, features

    def _block_forward(self, x, blk, training):
        name, kind, stride, has_proj = blk["name"], blk["kind"], blk["stride"], blk["proj"]
        if kind == "plain":
            return relu(self._bn(self._conv(x, name + ".conv", stride, 1), name + ".bn", training))
        out = relu(self._bn(self._conv(x, name + ".conv1", stride, 1), name + ".bn1", training))
        out = self._bn(self._conv(out, name + ".conv2", 1, 1), name + ".bn2", training)
        if has_proj:
            shortcut = self._bn(self._conv(x, name + ".down.conv", stride, 0),
                                name + ".down.bn", training)
        else:
            shortcut = x
        return relu(add(out, shortcut))


def _layer_plan(config):
    """Per-stage block descriptors: names, strides, channel transitions."""
    plan = []
    in_ch = config.stem_channels
    for si, stage in enumerate(config.stages(), 1):
        blocks = []
        for bi in range(1, stage.block_count + 1):
            stride = 2 if (stage.downsample and bi == 1) else 1
            blocks.append({
                "name": f"stage{si}.block{bi}",
                "kind": config.block_kind,
                "in": in_ch,
                "out": stage.channels,
                "stride": stride,
                "proj": config.block_kind == "basic_residual"
                        and (stride != 1 or in_ch != stage.channels),
            })
            in_ch = stage.channels
        plan.append((f"stage{si}", blocks))
    return plan


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_backbone(config, seed):
    """Instantiate a backbone with deterministic, seed-driven initialization.

    Conv and linear weights are Kaiming-uniform; BN gamma=1, beta=0; all
    biases start at zero. Backbone convs carry no bias (BN follows each).
    """
    config = resolve_backbone(config)
    model = Model(config)
    rng = np.random.default_rng(seed)

    def add_conv(name, out_ch, in_ch, k):
        model.params[name + ".weight"] = Parameter(
            name + ".weight", _kaiming_uniform(rng, (out_ch, in_ch, k, k), in_ch * k * k))

    def add_bn(name, ch):
        model.params[name + ".gamma"] = Parameter(name + ".gamma", np.ones(ch, dtype=np.float32))
        model.params[name + ".beta"] = Parameter(name + ".beta", np.zeros(ch, dtype=np.float32))
        model.bn_stats[name] = BatchNormStats(ch)

    add_conv("stem.conv", config.stem_channels, config.in_channels, 3)
    add_bn("stem.bn", config.stem_channels)
    for _, blocks in model._plan:
        for blk in blocks:
            if blk["kind"] == "plain":
                add_conv(blk["name"] + ".conv", blk["out"], blk["in"], 3)
                add_bn(blk["name"] + ".bn", blk["out"])
            else:
                add_conv(blk["name"] + ".conv1", blk["out"], blk["in"], 3)
                add_bn(blk["name"] + ".bn1", blk["out"])
                add_conv(blk["name"] + ".conv2", blk["out"], blk["out"], 3)
                add_bn(blk["name"] + ".bn2", blk["out"])
                if blk["proj"]:
                    add_conv(blk["name"] + ".down.conv", blk["out"], blk["in"], 1)
                    add_bn(blk["name"] + ".down.bn", blk["out"])
    last_ch = config.stages()[-1].channels
    model.params["head.weight"] = Parameter(
        "head.weight", _kaiming_uniform(rng, (config.num_classes, last_ch), last_ch))
    model.params["head.bias"] = Parameter(
        "head.bias", np.zeros(config.num_classes, dtype=np.float32))
    return model


def forward_with_features(model, batch):
    return model.forward_with_features(batch)


def freeze(model):
    """Detach every parameter from future gradients and switch to eval mode."""
    for p in model.parameters():
        p.tensor.requires_grad = False
        p.tensor.grad = None
    model.set_mode("eval")


def parameter_count(config):
    """Number of scalar parameters, computed from the config alone."""
    config = resolve_backbone(config)
    total = config.stem_channels * config.in_channels * 9 + 2 * config.stem_channels
    in_ch = config.stem_channels
    for stage in config.stages():
        for bi in range(stage.block_count):
            stride = 2 if (stage.downsample and bi == 0) else 1
            out = stage.channels
            if config.block_kind == "plain":
                total += out * in_ch * 9 + 2 * out
            else:
                total += out * in_ch * 9 + 2 * out     # conv1 + bn1
                total += out * out * 9 + 2 * out       # conv2 + bn2
                if stride != 1 or in_ch != out:
                    total += out * in_ch + 2 * out     # 1x1 projection + bn
            in_ch = out
    total += config.num_classes * in_ch + config.num_classes
    return total


# ---------------------------------------------------------------------------
# checkpoint format: magic "MGDC", u32 LE version, u32 LE tensor count, then
# per tensor: u16 LE name length, UTF-8 name, u8 rank, rank x u64 LE dims,
# raw float32 LE data.
# ---------------------------------------------------------------------------

def state_entries(model):
    """Ordered (name, array) pairs: parameters, then BN running stats."""
    entries = [(name, p.tensor.data) for name, p in model.params.items()]
    for name, stats in model.bn_stats.items():
        entries.append((name + ".running_mean", stats.mean))
        entries.append((name + ".running_var", stats.var))
    return entries


def save_checkpoint(model, path):
    entries = state_entries(model)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name, arr in entries:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path):
    """Parse a checkpoint file into an ordered {name: float32 array} dict."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    tensors = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}Q", blob, offset)
            offset += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            data = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
            tensors[name] = data.reshape(dims).copy()
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes after {count} tensors")
    return tensors


def load_checkpoint(model, path):
    """Load a checkpoint into a built model; names and shapes must agree."""
    tensors = read_checkpoint(path)
    expected = dict(state_entries(model))
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise ValueError(f"{path}: checkpoint does not match target config "
                         f"(missing: {missing[:4]}, unexpected: {extra[:4]})")
    for name, arr in tensors.items():
        if arr.shape != expected[name].shape:
            raise ValueError(f"{path}: shape mismatch for {name}: checkpoint "
                             f"{arr.shape} vs model {expected[name].shape}")
    for name, p in model.params.items():
        p.tensor.data = tensors[name].astype(np.float32)
        p.momentum_buffer = np.zeros_like(p.tensor.data)
    for name, stats in model.bn_stats.items():
        stats.mean = tensors[name + ".running_mean"].astype(np.float32)
        stats.var = tensors[name + ".running_var"].astype(np.float32)
    return model


def param_hash(model):
    """SHA-256 over every parameter and running stat, in a fixed order."""
    h = hashlib.sha256()
    for name, arr in state_entries(model):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()
