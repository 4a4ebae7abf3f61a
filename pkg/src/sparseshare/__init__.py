"""Channel-wise group-sparse training of hard-parameter-shared multi-task
convolutional models: penalty, closed-form group prox, proximal optimizers,
uncertainty-weighted loss combination, sparsity analytics, zero-channel
compaction, and an experiment harness."""

from .compact import (BenchmarkResult, CompactPlan, apply_compaction,
                      benchmark_backbone, mac_counts, plan_compaction)
from .config import DEFAULT_LAMBDA_GRID, ExperimentConfig, load_config, make_task_spec
from .data import (Batch, DatasetConfig, SampleRecord, export_dataset,
                   generate_scene, iterate_batches, load_dataset, make_splits)
from .harness import (ComparisonResult, RunResult, SeedResult,
                      compare_structured_unstructured, emit_report,
                      load_checkpoint, restore_checkpoint, run_experiment,
                      run_seed, save_checkpoint, sweep_lambda)
from .losses import UncertaintyWeights, combine_uncertainty, task_loss
from .metrics import (MetricRecord, accuracy, cosine_similarity_mean, iou, mae,
                      task_metric)
from .model import BackboneSpec, BlockSpec, MultiTaskModel, TaskSpec, build_model
from .optim import (EpochStats, ProxAdam, ProxSGD, TrainingDiverged,
                    full_sparsification_lambda, train_epoch)
from .registry import ParamEntry, ParamRegistry
from .sparsity import (GroupPartition, SparsityReport, group_penalty,
                       make_partition, measure_sparsity, prox_all, prox_group)
from .tensor import (ShapeError, Tensor, add, bilinear_upsample, channel_affine,
                     channel_l2_normalize, conv2d, finite_difference_check,
                     global_avg_pool, gradients, linear, mul, relu, scale, sum_all)

__version__ = "0.1.0"
