"""Toy-scale scenarios shared by the CLI, the demos and the acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core_math import DiagonalGaussian, ParamVector, kl_diag_gaussian, sample_matrix
from .model import Architecture, gibbs_risks
from .pac_bayes import BoundConfig, MCConfig, linear_bound, prop1_condition, random_split
from .synthetic_domains import DomainDataset, ToyEnvSpecA, gen_pretrain_corpus, gen_variant_a
from .trainer import (GAMMA_EXPONENTS, Checkpoint, TrainConfig, evaluate, feature_weight_ratio,
                      finetune_ftlp, gamma_sweep, make_posterior_rule, pretrain)

LINEAR = Architecture.mlp([2, 2])
BOTTLENECK = Architecture.mlp([2, 1, 2], "tanh")


def concat(datasets: Sequence[DomainDataset], env_id: int = 0) -> DomainDataset:
    return DomainDataset(np.concatenate([d.features for d in datasets]),
                         np.concatenate([d.labels for d in datasets]), env_id,
                         {"variant": "pooled"}, datasets[0].columns)


def bayes_optimal_a(scale: float = 10.0) -> ParamVector:
    """Linear 2-class weights with margin scale * (x_inv - 1/2) and no x_sup weight."""
    # rows are classes; logit difference is scale * (x_inv - 0.5)
    W = np.array([[-scale / 2, 0.0], [scale / 2, 0.0]])
    b = np.array([scale / 4, -scale / 4])
    return ParamVector(np.r_[W.ravel(), b], LINEAR.layout)


def bound_coverage(n_trials: int = 200, m: int = 100, sigma: float = 0.05, beta: float = 0.5,
                   n_holdout: int = 5000, n_samples: int = 100, p_e: float = 0.5,
                   seed: int = 0) -> dict:
    """Fraction of source resamples on which the linear bound covers the held-out Gibbs risk.

    Source and target come from the same variant-A generator. Posterior and
    prior are fixed in advance: the posterior is centred at the Bayes
    classifier, the prior at zero.
    """
    post = DiagonalGaussian(bayes_optimal_a(), 4.0)
    prior = DiagonalGaussian(ParamVector(np.zeros(LINEAR.param_count), LINEAR.layout), 25.0)
    kl = kl_diag_gaussian(post, prior)
    cfg = BoundConfig(beta, sigma, m)
    held = gen_variant_a(ToyEnvSpecA(p_e, n_holdout, seed=10**6 + seed))
    draws = sample_matrix(post, n_samples, seed)
    true_risk = float(np.mean(gibbs_risks(draws, LINEAR, held)))
    covered, bounds = 0, []
    for t in range(n_trials):
        s_m = gen_variant_a(ToyEnvSpecA(p_e, m, seed=seed * 100003 + t))
        emp = float(np.mean(gibbs_risks(draws, LINEAR, s_m)))
        b = linear_bound(emp, kl, cfg)
        bounds.append(b)
        covered += b >= true_risk
    return {"trials": n_trials, "covered": covered, "rate": covered / n_trials,
            "heldout_gibbs_risk": true_risk, "kl": kl, "mean_bound": float(np.mean(bounds))}


@dataclass
class TransferResult:
    seed: int
    selected_gamma: float
    baseline_target_acc: float
    ftlp_target_acc: float
    pretrained_target_acc: float
    baseline_ratio: float
    ftlp_ratio: float


def toy_transfer(seed: int, arch: Architecture = BOTTLENECK, n_envs: int = 20, k: float = 3.0,
                 corpus_per_env: int = 100, source_p: Sequence[float] = (0.1, 0.2),
                 target_p: float = 0.9, n_per_env: int = 200, target_n: int = 1000,
                 pretrain_cfg: TrainConfig | None = None, cfg: TrainConfig | None = None,
                 grid_exponents: Sequence[int] = GAMMA_EXPONENTS, jobs: int = 1) -> TransferResult:
    """Pre-train on variant B, fine-tune on variant A sources, test on a shifted target.

    Compares the gamma = 0 baseline with FT-LP at the gamma picked by
    source-validation, reporting target accuracy and the invariant/spurious
    input-sensitivity ratio of each model.
    """
    pretrain_cfg = pretrain_cfg or TrainConfig(learning_rate=0.05, steps=1000, batch_size=64)
    cfg = cfg or TrainConfig(learning_rate=0.05, steps=300, batch_size=32)
    corpus = gen_pretrain_corpus(n_envs, corpus_per_env, k, list(np.linspace(0, 1, n_envs)), seed)
    h0 = pretrain(arch, corpus, replace(pretrain_cfg, seed=seed))
    sources = [gen_variant_a(ToyEnvSpecA(p, n_per_env, seed * 10 + i, env_id=i))
               for i, p in enumerate(source_p)]
    target = gen_variant_a(ToyEnvSpecA(target_p, target_n, seed * 10 + 9, env_id=len(source_p)))
    run_cfg = replace(cfg, seed=seed)
    # the baseline sees the same training splits as every sweep cell
    base = gamma_sweep(h0, sources, run_cfg, gammas=[0.0]).selected
    sweep = gamma_sweep(h0, sources, run_cfg, grid_exponents, target=target, jobs=jobs)
    ft = sweep.selected
    return TransferResult(seed, sweep.selected_gamma, evaluate(base, target)[0],
                          evaluate(ft, target)[0], evaluate(h0, target)[0],
                          feature_weight_ratio(base, target), feature_weight_ratio(ft, target))


def prop1_instance(seed: int, m: int = 60, split_fraction: float = 0.5, beta: float = 0.5,
                   sigma: float = 0.05, n_resamples: int = 2, p_e: float = 0.2,
                   target_p: float = 0.9, dist_kind: str = "variation", prior_scale: float = 10.0,
                   prior_variance: float = 1.0, posterior_variance: float = 1.0,
                   steps: int = 60, mc_samples: int = 50, finetune_from_prior: bool = True):
    """The split-prior condition on variant A with a pre-trained prior at the Bayes-optimal weights.

    The split prior is learned from scratch on S^J. The posterior is
    fine-tuned from the pre-trained prior mean (``finetune_from_prior``) or
    trained from scratch like the split prior.
    """
    q0 = DiagonalGaussian(bayes_optimal_a(prior_scale), prior_variance)
    train_cfg = TrainConfig(learning_rate=0.1, steps=steps, batch_size=16)
    scratch = make_posterior_rule(LINEAR, train_cfg, posterior_variance)
    rule = make_posterior_rule(LINEAR, train_cfg, posterior_variance,
                               init=q0.mean) if finetune_from_prior else scratch
    target = gen_variant_a(ToyEnvSpecA(target_p, 300, seed=7919 + seed))
    sampler = lambda s: gen_variant_a(ToyEnvSpecA(p_e, m, seed=s))  # noqa: E731
    split = lambda data, rng: random_split(data, split_fraction, rng)  # noqa: E731
    return prop1_condition([q0], split, rule, sampler, target, LINEAR,
                           BoundConfig(beta, sigma, m), n_resamples, seed, dist_kind,
                           MCConfig(n_samples=mc_samples, seed=seed), prior_rule=scratch)
