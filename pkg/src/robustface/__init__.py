"""Adversarially robust face-embedding training on a small numpy autograd engine."""

from .attacks import AttackConfig, audit_budget, check_budget, fgsm, perturb, pgd
from .augment import AugmentConfig, sample_view
from .dataset import (
    FaceDataset,
    Triplet,
    filter_min_images,
    generate_synthetic,
    load_dataset,
    make_label_mask,
    sample_triplet,
    sample_triplets,
    split_train_val,
    write_dataset,
)
from .evaluation import MetricsReport, evaluate, robust_triplet_accuracy, triplet_accuracy
from .losses import ContrastiveLossConfig, TripletLossConfig, nt_xent, triplet_loss
from .model import (
    Checkpoint,
    EncoderConfig,
    EncoderParams,
    forward_embed,
    forward_project,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .pipeline import (
    BASELINE,
    FINETUNE,
    PRETRAIN,
    STANDARD,
    EpochLog,
    TrainConfig,
    TrainResult,
    finetune_triplet_adversarial,
    pretrain_contrastive_adversarial,
    sgd_step,
    train_standard,
    train_triplet_adversarial_baseline,
)
from .tensor import Tape, Tensor

__version__ = "0.1.0"
