"""Split-latent VAE with contrastive content and anti-contrastive
(pair-switched) style regularization, plus the mutual-information estimators
and out-of-distribution benchmarks needed to evaluate it.

Public surface: sklearn-style estimators (`ClearVaeTransformer`,
`LatentHeadClassifier`, `CnnBaselineClassifier`), the objective pieces in
`clearvae.losses`, MI estimation and disentanglement metrics in `clearvae.mi`,
dataset machinery in `clearvae.datasets`, and a `clearvae` CLI.
"""

from .autodiff import ContractViolation, NumericFault, Tensor
from .datasets import (GaussianMixtureSpec, LabeledImageSet, SplitPlan,
                       apply_style, gen_styled_shapes, load_idx,
                       plan_ood_split, sample_gaussian_mixture, split_dataset,
                       write_idx)
from .estimators import (ClearVaeTransformer, CnnBaselineClassifier,
                         LatentHeadClassifier)
from .losses import (ClearConfig, LossBreakdown, clear_objective,
                     kl_diag_gaussian, ps_snn_loss, recon_loss, snn_loss)
from .mi import GmigReport, MiEstimate, gmig, knn_mi, mig, spearman_rho
from .networks import ClearVae, load_checkpoint, restore_model, save_checkpoint
from .optim import Adam
from .rng import Rng, seeded_normal
from .training import (TrainHistory, run_mi_simulation, train_clear,
                       train_classifier_head, train_cnn_baseline)

__version__ = "0.1.0"

__all__ = [
    "Adam", "ClearConfig", "ClearVae", "ClearVaeTransformer",
    "CnnBaselineClassifier", "ContractViolation", "GaussianMixtureSpec",
    "GmigReport", "LabeledImageSet", "LatentHeadClassifier", "LossBreakdown",
    "MiEstimate", "NumericFault", "Rng", "SplitPlan", "Tensor", "TrainHistory",
    "apply_style", "clear_objective", "gen_styled_shapes", "gmig",
    "kl_diag_gaussian", "knn_mi", "load_checkpoint", "load_idx", "mig",
    "plan_ood_split", "ps_snn_loss", "recon_loss", "restore_model",
    "run_mi_simulation", "sample_gaussian_mixture", "save_checkpoint",
    "seeded_normal", "snn_loss", "spearman_rho", "split_dataset",
    "train_clear", "train_classifier_head", "train_cnn_baseline", "write_idx",
]
