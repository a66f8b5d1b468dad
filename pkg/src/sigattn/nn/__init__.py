"""Toy transformer, synthetic tasks and training loop."""

from .mlp import MLPConfig, init_mlp, matched_hidden, mlp_backward, mlp_forward, mlp_param_count
from .model import ModelConfig, backward, forward, init_params, loss_and_grads, loss_fn, param_count
from .optim import AdamState, adam_step, clip_by_global_norm, global_norm, lr_at
from .tasks import TaskBatch, gen_ksum, gen_pair_repeat, ksum_target, pair_repeat_label
from .train import (
    MetricsRecord,
    TaskSpec,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    attn_metrics,
    eval_length_generalization,
    evaluate,
    falloff_report,
    load_params,
    model_fns,
    predict,
    save_params,
    train,
    write_metrics_csv,
)

__all__ = [
    "AdamState", "MLPConfig", "MetricsRecord", "ModelConfig", "TaskBatch", "TaskSpec", "TrainConfig", "TrainResult",
    "TrainingDiverged", "adam_step", "attn_metrics", "backward", "clip_by_global_norm",
    "eval_length_generalization", "evaluate", "falloff_report", "forward", "gen_ksum", "gen_pair_repeat",
    "global_norm", "init_mlp", "init_params", "ksum_target", "load_params", "loss_and_grads", "loss_fn", "lr_at", "matched_hidden",
    "mlp_backward", "mlp_forward", "mlp_param_count", "model_fns",
    "pair_repeat_label", "param_count", "predict", "save_params", "train", "write_metrics_csv",
]
