"""skiplift: lift 2D pose sequences to 3D with a skipped-attention transformer."""

from skiplift.analysis import (
    CostReport,
    analytic_skt,
    analytic_ssa,
    analytic_stt,
    cost_report,
    export_attention,
)
from skiplift.config import ModelConfig
from skiplift.data import (
    PoseDataset,
    PoseSample,
    load_dataset,
    save_dataset,
    synth_generate,
)
from skiplift.model import (
    PoseLifter,
    load_checkpoint,
    loss_full,
    loss_target,
    loss_total,
    mpjpe,
    p_mpjpe,
    param_count,
    save_checkpoint,
)
from skiplift.tensor import FlopCounter, Tape, Tensor, backward, counting
from skiplift.train import TrainSettings, evaluate, train_model

__version__ = "0.1.0"

__all__ = [
    "CostReport",
    "FlopCounter",
    "ModelConfig",
    "PoseDataset",
    "PoseLifter",
    "PoseSample",
    "Tape",
    "Tensor",
    "TrainSettings",
    "analytic_skt",
    "analytic_ssa",
    "analytic_stt",
    "backward",
    "cost_report",
    "counting",
    "evaluate",
    "export_attention",
    "load_checkpoint",
    "load_dataset",
    "loss_full",
    "loss_target",
    "loss_total",
    "mpjpe",
    "p_mpjpe",
    "param_count",
    "save_checkpoint",
    "save_dataset",
    "synth_generate",
    "train_model",
]
