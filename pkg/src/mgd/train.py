"""Training loops: plain cross-entropy baselines, masked-generative or
feature-mimicking distillation, evaluation, and feature-difference tracking.

One iteration of distillation runs both networks forward, combines the
task loss with the distillation loss, backpropagates, and updates the
student together with the per-stage generative blocks. The teacher is
frozen and never changes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import batches
from .distill import (AlignConv, GenerativeBlock, MaskConfig, kd_logit_loss,
                      mask_rng, mgd_loss, mimic_loss, total_loss)
from .models import save_checkpoint
from .tensor import Tensor, add, backward, scale, sgd_step, softmax_cross_entropy, sq_l2_sum

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,split,top1,top5,loss_task,loss_dis,feature_diff"


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr_init: float = 0.1
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 12
    momentum: float = 0.9
    weight_decay: float = 1e-4
    alpha: float = 7e-5
    mask: MaskConfig = field(default_factory=MaskConfig)
    stages: tuple = ()
    logit_kd: tuple | None = None      # (temperature, weight)
    seed: int = 0
    distill_loss: str = "mgd"          # or "mimic"
    projector_depth: int = 2
    projector_kernel: int = 3
    task_weight: float = 1.0           # 0 trains on the distillation signal alone

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr_init <= 0:
            raise ValueError(f"lr_init must be > 0, got {self.lr_init}")
        if self.lr_decay_every < 1:
            raise ValueError(f"lr_decay_every must be >= 1, got {self.lr_decay_every}")
        if self.distill_loss not in ("mgd", "mimic"):
            raise ValueError(f"distill_loss must be 'mgd' or 'mimic', got {self.distill_loss!r}")
        self.mask.validate()
        return self


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    top1: float
    top5: float
    loss_task: float
    loss_dis: float
    feature_diff: float


def lr_at(cfg, epoch):
    """Step schedule: lr_init * decay_factor ** (epoch // decay_every)."""
    return cfg.lr_init * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def write_metrics_csv(records, path):
    with open(path, "w") as f:
        f.write(METRICS_HEADER + "\n")
        for r in records:
            f.write(f"{r.epoch},{r.split},{r.top1:.4f},{r.top5:.4f},"
                    f"{r.loss_task:.6f},{r.loss_dis:.6f},{r.feature_diff:.6f}\n")


def _topk_hits(logits_data, labels, k):
    topk = np.argpartition(-logits_data, min(k, logits_data.shape[1]) - 1, axis=1)[:, :k]
    return int((topk == labels[:, None]).any(axis=1).sum())


def evaluate(model, ds, batch_size=256):
    """Top-1/top-5 accuracy in percent. Top-5 is 100 when there are fewer
    than five classes (every label is then trivially within the top five)."""
    top1, top5, _ = _eval_stats(model, ds, batch_size)
    return top1, top5


def _eval_stats(model, ds, batch_size=256):
    if len(ds) == 0:
        raise ValueError("evaluate requires a non-empty dataset")
    prev_mode = model.mode
    model.set_mode("eval")
    hits1 = hits5 = 0
    loss_sum = 0.0
    k = ds.class_count
    for x, y in batches(ds, batch_size):
        logits, _ = model.forward_with_features(Tensor(x))
        hits1 += _topk_hits(logits.data, y, 1)
        hits5 += _topk_hits(logits.data, y, 5) if k >= 5 else len(y)
        loss_sum += softmax_cross_entropy(logits, y).item() * len(y)
    model.set_mode(prev_mode)
    n = len(ds)
    return 100.0 * hits1 / n, 100.0 * hits5 / n, loss_sum / n


def track_feature_difference(teacher, student, f_align, sample, stage):
    """Batch-mean squared-L2 distance between the teacher's and the aligned
    student's feature at `stage`, with no masking (the mimicking metric)."""
    x = sample if isinstance(sample, Tensor) else Tensor(sample)
    prev_mode = student.mode
    student.set_mode("eval")
    _, feats_s = student.forward_with_features(x)
    _, feats_t = teacher.forward_with_features(x)
    student.set_mode(prev_mode)
    diff = sq_l2_sum(feats_t[stage].detach(), f_align(feats_s[stage].detach()))
    return diff.item() / x.shape[0]


def _probe_batch(val_ds, batch_size):
    x, _ = next(batches(val_ds, batch_size))
    return Tensor(x)


TEACHER_CACHE_LIMIT_BYTES = 512 << 20


def _cache_teacher_outputs(teacher, train_ds, cfg):
    """Precompute the frozen teacher's stage features (and logits when logit
    KD is on) over the training set, indexed by sample. Returns None when
    the cache would exceed the memory cap; callers then fall back to running
    the teacher every iteration."""
    probe, _ = next(batches(train_ds, 1))
    _, feats = teacher.forward_with_features(Tensor(probe))
    n = len(train_ds)
    shapes = {s: (n,) + feats[s].shape[1:] for s in cfg.stages}
    total = sum(4 * np.prod(shape) for shape in shapes.values())
    if cfg.logit_kd is not None:
        total += 4 * n * train_ds.class_count
    if total > TEACHER_CACHE_LIMIT_BYTES:
        log.info("teacher cache would need %.0f MiB; running the teacher per "
                 "iteration instead", total / 2 ** 20)
        return None
    cache = {s: np.empty(shape, dtype=np.float32) for s, shape in shapes.items()}
    if cfg.logit_kd is not None:
        cache["__logits__"] = np.empty((n, train_ds.class_count), dtype=np.float32)
    for x, _, idx in batches(train_ds, cfg.batch_size, with_indices=True):
        logits, feats = teacher.forward_with_features(Tensor(x))
        for s in cfg.stages:
            cache[s][idx] = feats[s].data
        if cfg.logit_kd is not None:
            cache["__logits__"][idx] = logits.data
    return cache


def train_baseline(model, train_ds, val_ds, cfg, checkpoint_path=None):
    """Train with cross-entropy only (alpha is ignored); returns the model
    and per-epoch train/val metrics."""
    cfg.validate()
    records = []
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        model.set_mode("train")
        hits1 = hits5 = seen = 0
        loss_sum = 0.0
        for x, y in batches(train_ds, cfg.batch_size, shuffle_seed=cfg.seed, epoch=epoch):
            logits, _ = model.forward_with_features(Tensor(x))
            loss = softmax_cross_entropy(logits, y)
            backward(loss)
            sgd_step(model.parameters(), lr, cfg.momentum, cfg.weight_decay)
            hits1 += _topk_hits(logits.data, y, 1)
            hits5 += _topk_hits(logits.data, y, 5) if train_ds.class_count >= 5 else len(y)
            loss_sum += loss.item() * len(y)
            seen += len(y)
        val_top1, val_top5, val_loss = _eval_stats(model, val_ds, cfg.batch_size)
        records.append(MetricsRecord(epoch, "train", 100.0 * hits1 / seen,
                                     100.0 * hits5 / seen, loss_sum / seen, 0.0, 0.0))
        records.append(MetricsRecord(epoch, "val", val_top1, val_top5, val_loss, 0.0, 0.0))
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return model, records


def _stage_index(stage_name):
    return int(stage_name.removeprefix("stage"))


def make_blocks(teacher, student, cfg):
    """One generative block (or plain align layer for mimic mode) per
    distilled stage, seeded independently of the data and init streams."""
    blocks = []
    for stage in cfg.stages:
        child = np.random.SeedSequence((cfg.seed, 0x6D67, _stage_index(stage)))
        block_seed = int(child.generate_state(1)[0])
        cs = student.stage_channels(stage)
        ct = teacher.stage_channels(stage)
        if cfg.distill_loss == "mimic":
            blocks.append(AlignConv(cs, ct, seed=block_seed, name=f"{stage}.align"))
        else:
            blocks.append(GenerativeBlock(cs, ct, depth=cfg.projector_depth,
                                          kernel=cfg.projector_kernel,
                                          seed=block_seed, name=f"{stage}.gen"))
    return blocks


def train_distill(teacher, student, train_ds, val_ds, cfg,
                  checkpoint_path=None, step_hook=None, blocks=None):
    """Distill a frozen teacher into the student (masked-generative by
    default, direct mimicking with distill_loss='mimic').

    Per iteration: forward both models, combine the task loss (cross-entropy
    plus any logit-KD term) with the distillation loss over cfg.stages, and
    update the student and block parameters with one SGD step. Records the
    unmasked teacher/aligned-student feature distance on a fixed probe batch
    every epoch. The exported checkpoint holds the bare student only.
    """
    cfg.validate()
    if not teacher.frozen:
        raise ValueError("teacher must be frozen before distillation")
    if not cfg.stages:
        raise ValueError("distillation requires a non-empty stage list")
    for stage in cfg.stages:
        for model, role in ((teacher, "teacher"), (student, "student")):
            if stage not in model.stage_names:
                raise ValueError(f"unknown stage {stage!r} for {role} "
                                 f"(has {model.stage_names})")
    if blocks is None:
        blocks = make_blocks(teacher, student, cfg)
    block_params = [p for b in blocks for p in b.parameters()]
    trainable = student.parameters() + block_params
    last_stage = cfg.stages[-1]
    last_align = blocks[-1].f_align if cfg.distill_loss == "mgd" else blocks[-1]
    probe = _probe_batch(val_ds, cfg.batch_size)
    stage_indices = [_stage_index(s) for s in cfg.stages]
    cache = _cache_teacher_outputs(teacher, train_ds, cfg)

    records = []
    iteration = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        student.set_mode("train")
        hits1 = hits5 = seen = 0
        task_sum = dis_sum = 0.0
        for x, y, idx in batches(train_ds, cfg.batch_size, shuffle_seed=cfg.seed,
                                 epoch=epoch, with_indices=True):
            xb = Tensor(x)
            if cache is None:
                logits_t, feats_t = teacher.forward_with_features(xb)
                feats_t = {s: feats_t[s] for s in cfg.stages}
                logits_t = logits_t.detach()
            else:
                feats_t = {s: Tensor(cache[s][idx]) for s in cfg.stages}
                logits_t = Tensor(cache["__logits__"][idx]) if cfg.logit_kd else None
            logits_s, feats_s = student.forward_with_features(xb)
            task = softmax_cross_entropy(logits_s, y)
            if cfg.logit_kd is not None:
                temperature, weight = cfg.logit_kd
                task = add(task, scale(kd_logit_loss(logits_s, logits_t, temperature),
                                       weight))
            if cfg.task_weight != 1.0:
                task = scale(task, cfg.task_weight)
            if cfg.distill_loss == "mimic":
                dis = None
                for stage, align in zip(cfg.stages, blocks):
                    term = mimic_loss(feats_s[stage], feats_t[stage], align)
                    dis = term if dis is None else add(dis, term)
            else:
                rngs = [mask_rng(cfg.mask.rng_seed, si, iteration) for si in stage_indices]
                dis = mgd_loss([feats_s[s] for s in cfg.stages],
                               [feats_t[s] for s in cfg.stages],
                               blocks, cfg.mask, rngs)
            loss = total_loss(task, dis, cfg.alpha)
            backward(loss)
            sgd_step(trainable, lr, cfg.momentum, cfg.weight_decay)
            if step_hook is not None:
                step_hook(iteration, task.item(), dis.item(), loss.item())
            hits1 += _topk_hits(logits_s.data, y, 1)
            hits5 += _topk_hits(logits_s.data, y, 5) if train_ds.class_count >= 5 else len(y)
            task_sum += task.item() * len(y)
            dis_sum += dis.item() * len(y)
            seen += len(y)
            iteration += 1
        feature_diff = track_feature_difference(teacher, student, last_align,
                                                probe, last_stage)
        val_top1, val_top5, val_loss = _eval_stats(student, val_ds, cfg.batch_size)
        records.append(MetricsRecord(epoch, "train", 100.0 * hits1 / seen,
                                     100.0 * hits5 / seen, task_sum / seen,
                                     dis_sum / seen, feature_diff))
        records.append(MetricsRecord(epoch, "val", val_top1, val_top5, val_loss,
                                     0.0, feature_diff))
    if checkpoint_path is not None:
        save_checkpoint(student, checkpoint_path)
    return student, records
