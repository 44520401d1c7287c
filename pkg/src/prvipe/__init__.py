"""View-invariant probabilistic embeddings of 2D human poses.

Submodules: :mod:`skeleton` (normalization, Procrustes, NP-MPJPE),
:mod:`camera` (perspective projection and camera augmentation),
:mod:`model` (residual MLP with a Gaussian head, manual backprop),
:mod:`losses` (matching probability, triplet ratio loss, mining),
:mod:`trainer`, :mod:`retrieval`, :mod:`sequences`, :mod:`data`,
:mod:`config` and :mod:`cli`.
"""

__version__ = "0.1.0"

from .camera import ProjectionConfig, project_pose, synth_view_pair  # noqa: E402
from .data import Dataset, DatasetRecord, load_dataset, save_dataset  # noqa: E402
from .losses import LossConfig, matching_prob_mc, total_loss  # noqa: E402
from .model import ModelConfig, embed, init_params, load_checkpoint, save_checkpoint  # noqa: E402
from .retrieval import evaluate_cross_view, hit_at_k, retrieve_topk  # noqa: E402
from .skeleton import COCO13, H36M17, np_mpjpe, procrustes_align  # noqa: E402
from .trainer import TrainConfig, train_loop  # noqa: E402

__all__ = [
    "COCO13", "H36M17", "Dataset", "DatasetRecord", "LossConfig", "ModelConfig", "ProjectionConfig",
    "TrainConfig", "embed", "evaluate_cross_view", "hit_at_k", "init_params", "load_checkpoint",
    "load_dataset", "matching_prob_mc", "np_mpjpe", "procrustes_align", "project_pose", "retrieve_topk",
    "save_checkpoint", "save_dataset", "synth_view_pair", "total_loss", "train_loop",
]
