"""Training stack: parameter registry, optimizer, checkpoints, stage loops."""

from .checkpoint import (CheckpointEntry, load_checkpoint, read_table,
                         save_checkpoint)
from .loop import (FINAL_CKPT, METRICS_CSV, PRETRAIN_CKPT, SUMMARY_TXT,
                   build_model, evaluate_cases, evaluate_run, finetune,
                   load_split, peft_trainable, pretrain, pretrain_trainable,
                   train_stage)
from .optim import AdamW
from .registry import ParamRegistry

__all__ = [
    "AdamW", "CheckpointEntry", "FINAL_CKPT", "METRICS_CSV", "ParamRegistry",
    "PRETRAIN_CKPT", "SUMMARY_TXT", "build_model", "evaluate_cases",
    "evaluate_run", "finetune", "load_checkpoint", "load_split",
    "peft_trainable", "pretrain", "pretrain_trainable", "read_table",
    "save_checkpoint", "train_stage",
]
