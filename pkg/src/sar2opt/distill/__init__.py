from .losses import (
    DistillWeights,
    attn_loss,
    class_weight,
    cls_loss,
    logit_loss,
    task_loss,
    total_student_loss,
    vicreg_loss,
    vicreg_terms,
)
from .metrics import average_precision, classification_metrics
from .training import EncoderTrainConfig, distill_student, evaluate_encoder, init_student, mean_attention_kl, sweep_weights, train_teacher

__all__ = [
    "DistillWeights",
    "EncoderTrainConfig",
    "attn_loss",
    "average_precision",
    "class_weight",
    "classification_metrics",
    "cls_loss",
    "distill_student",
    "evaluate_encoder",
    "init_student",
    "logit_loss",
    "mean_attention_kl",
    "sweep_weights",
    "task_loss",
    "total_student_loss",
    "train_teacher",
    "vicreg_loss",
    "vicreg_terms",
]
