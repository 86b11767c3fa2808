"""Tensor-train adapter laboratory.

A single tensor train parameterizes low-rank corrections for every
adapted site of a frozen transformer at once; a DMRG-style double sweep
compresses its bond ranks during training. The package bundles the
adapter variants, the sweep, a desk-scale frozen encoder with synthetic
teacher-student tasks, hand-rolled reverse-mode training, and the
serialization and CLI plumbing around them.
"""

from .adapter import (AdapterSpec, AdapterSpecError, MergedAdapter,
                      MetaTTAdapter, adapted_forward, baseline_lora_param_count,
                      build, delta_matrix, merge_for_inference, random_adapter,
                      spec_param_count)
from .config import ConfigError, RunConfig, TaskConfig, parse_config, serialize_config
from .dmrg import (RankSchedule, ScheduleError, default_schedule, dmrg_sweep,
                   merge_adjacent, schedule_lookup)
from .linalg import (ShapeError, SvdConvergenceError, SvdResult, as_tensor,
                     matmul, reshape, svd, truncated_svd)
from .model import (AdaptedModel, BatchError, FrozenTransformer, ModelConfig,
                    SyntheticTask, build_frozen_model, frozen_digest, gelu,
                    inject_adapter, make_orthogonal_teacher_tasks,
                    make_teacher_task, model_forward, softmax)
from .serialization import (CheckpointError, ChecksumMismatchError,
                            TruncatedFileError, UnsupportedVersionError,
                            adapter_tensors, load_checkpoint, merged_tensors,
                            read_metrics, save_checkpoint, write_metrics)
from .training import (MetricsRow, OptimizerConfig, OptimizerState, TrainReport,
                       accuracy, adamw_step, backward, clip_gradients,
                       core_gradient_norms, cross_entropy_loss, evaluate,
                       finite_difference_gradcheck, joint_train_run, mse_loss,
                       reports_equal, train_run)
from .tt import (TensorTrain, param_count, random_train, reconstruct_dense,
                 select_slice, validate_chain)

__version__ = "0.1.0"
