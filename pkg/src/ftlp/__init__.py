"""Fine-tuning with learned priors: PAC-Bayes bounds and an anchoring penalty for
domain generalization, at toy scale in numpy."""
from .core_math import DiagonalGaussian, InvalidArgument, ParamVector, kl_diag_gaussian
from .dg_objectives import DGObjectiveSpec, dg_loss, list_objectives
from .model import Architecture, Batch, Classifier, cross_entropy, forward, grad_check, predict
from .pac_bayes import (BoundConfig, BoundReport, MCConfig, linear_bound, theorem1_bound,
                        theorem2_expected_bound, theorem3_bound, wasserstein_1d)
from .prior_encoder import CovarianceEncoder, ftlp_penalty, induced_posterior
from .synthetic_domains import DomainDataset, ToyEnvSpecA, ToyEnvSpecB, gen_variant_a, gen_variant_b
from .trainer import Checkpoint, TrainConfig, finetune_ftlp, gamma_sweep, pretrain

__version__ = "0.1.0"
