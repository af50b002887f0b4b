"""Masked-generative feature distillation at desk scale.

A small, self-contained stack: a numpy-backed autodiff tensor core, CNN
backbones with named stage features, the masked-generation distillation
losses, SGD training loops, dataset loaders, and a reproducible
experiment harness with a CLI.
"""
from .data import LabeledDataset, batches, load_cifar_binary, load_idx, make_synthetic
from .distill import (AlignConv, GenerativeBlock, Mask, MaskConfig, apply_mask,
                      generate, kd_logit_loss, mask_rng, mgd_loss, mimic_loss,
                      sample_mask, total_loss)
from .models import (BackboneConfig, Model, StageSpec, build_backbone,
                     forward_with_features, freeze, load_checkpoint, param_hash,
                     parameter_count, parse_backbone_spec, save_checkpoint)
from .tensor import (BatchNormStats, Parameter, Tensor, add, backward,
                     batch_norm2d, conv2d, global_avg_pool, linear, mul_const,
                     relu, scale, sgd_step, softmax_cross_entropy, sq_l2_sum)
from .train import (MetricsRecord, TrainConfig, evaluate, lr_at,
                    track_feature_difference, train_baseline, train_distill,
                    write_metrics_csv)

__version__ = "0.1.0"
