"""Command-line front end: ``ftlp <command> [options]``.

Every command writes into its output directory (``--out``, else ``$FTLP_OUT``,
else ``[output].dir``, else ``./ftlp_out``) together with the resolved
configuration (``config.resolved.toml``) and the tool version (``VERSION``).
Failures print one JSON object to stderr. Exit codes: 2 for a malformed
configuration, 3 for a missing file, 4 for invalid arguments or data, 5 for a
diverged run.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, ExperimentConfig
from .core_math import InvalidArgument
from .experiments import concat, prop1_instance
from .pac_bayes import (BoundConfig, prop2_remainder_table, prop3_check, theorem2_expected_bound,
                        theorem3_bound, wasserstein_1d)
from .prior_encoder import induced_posterior
from .report import build_report
from .synthetic_domains import (ToyEnvSpecA, ToyEnvSpecB, gen_pretrain_corpus, gen_variant_a,
                                gen_variant_b, read_csv, split_holdout, write_csv)
from .trainer import (Checkpoint, TrainingDivergence, evaluate, finetune_ftlp, gamma_sweep,
                      make_posterior_rule, pretrain)

EXIT_CONFIG, EXIT_MISSING, EXIT_INVALID, EXIT_DIVERGED = 2, 3, 4, 5
OUT_ENV = "FTLP_OUT"
SWEEP_COLUMNS = ["gamma", "val_acc", "val_ce", "final_total", "selected"]
PROP2_COLUMNS = ["instance", "delta_norm", "remainder", "remainder_half", "ratio"]


def version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


class CliError(Exception):
    def __init__(self, code: int, payload: dict):
        super().__init__(payload.get("message", ""))
        self.code, self.payload = code, payload


# ------------------------------------------------------------------- data

def parse_data_spec(text: str):
    """A CSV path, or ``A:p_e=0.9,n=500,seed=1`` / ``B:k=3,e=1,n_envs=20,p_e=0.5,n=100,seed=0``."""
    head, sep, rest = text.partition(":")
    if sep and head in ("A", "B") and not Path(text).exists():
        fields = {}
        for item in filter(None, rest.split(",")):
            key, eq, value = item.partition("=")
            if not eq:
                raise InvalidArgument(f"bad data spec item {item!r}")
            fields[key.strip()] = value.strip()
        floats = {"p_e", "k"}
        try:
            kw = {k: float(v) if k in floats else int(v) for k, v in fields.items()}
            if head == "A":
                return gen_variant_a(ToyEnvSpecA(**kw))
            return gen_variant_b(ToyEnvSpecB(**kw))
        except TypeError as exc:
            raise InvalidArgument(f"bad data spec {text!r}: {exc}") from None
    path = Path(text)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return read_csv(path)


def make_sources(cfg: ExperimentConfig):
    d = cfg["data"]
    return [gen_variant_a(ToyEnvSpecA(p, d["n_per_env"], d["seed"] * 10 + i, env_id=i))
            for i, p in enumerate(d["source_p"])]


def make_target(cfg: ExperimentConfig):
    d = cfg["data"]
    return gen_variant_a(ToyEnvSpecA(d["target_p"], d["target_n"], d["seed"] * 10 + 9,
                                     env_id=len(d["source_p"])))


def source_splits(cfg: ExperimentConfig, sources):
    """The train/validation split shared by ``finetune`` and every ``sweep`` cell."""
    frac, seed = cfg["sweep"]["holdout_fraction"], cfg["data"]["seed"]
    return [split_holdout(s, frac, seed + i) for i, s in enumerate(sources)]


# ---------------------------------------------------------------- outputs

def formats(args, cfg: ExperimentConfig) -> list[str]:
    return [args.format] if args.format else list(cfg["output"]["formats"])


def write_table(rows: list[dict], directory: Path, stem: str, columns: list[str], fmts) -> None:
    if "csv" in fmts:
        io.write_csv(rows, directory / f"{stem}.csv", columns)
    if "json" in fmts:
        io.write_json([{c: r[c] for c in columns} for r in rows], directory / f"{stem}.json")


def prepare_out(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or cfg["output"]["dir"] or "ftlp_out")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.toml").write_text(cfg.to_toml())
    (out / "VERSION").write_text(version() + "\n")
    return out


def load_checkpoint(path) -> Checkpoint:
    if not Path(path).exists():
        raise FileNotFoundError(str(path))
    return Checkpoint.load(path)


# --------------------------------------------------------------- commands

def cmd_pretrain(args, cfg):
    out = prepare_out(args, cfg)
    d = cfg["data"]
    corpus = gen_pretrain_corpus(d["corpus_envs"], d["corpus_per_env"], d["corpus_k"],
                                 cfg.corpus_p(), d["seed"])
    ckpt = pretrain(cfg.arch(), corpus, cfg.pretrain_config())
    ckpt.save(out / "checkpoint.json")
    acc, ce = evaluate(ckpt, concat(corpus))
    log = {"command": "pretrain", "corpus_envs": len(corpus), "corpus_size": sum(map(len, corpus)),
           "corpus_accuracy": acc, "corpus_cross_entropy": ce, "meta": ckpt.meta}
    io.write_json(log, out / "log.json")
    return log


def _write_data(out: Path, splits, target):
    (out / "data").mkdir(parents=True, exist_ok=True)
    for i, (train, val) in enumerate(splits):
        write_csv(train, out / "data" / f"source_{i}.csv")
        write_csv(val, out / "data" / f"source_{i}_val.csv")
    write_csv(target, out / "data" / "target.csv")


def cmd_finetune(args, cfg):
    out = prepare_out(args, cfg)
    h0 = load_checkpoint(args.prior)
    splits = source_splits(cfg, make_sources(cfg))
    target = make_target(cfg)
    _write_data(out, splits, target)
    ckpt, run = finetune_ftlp(h0, [t for t, _ in splits], cfg.train_config())
    ckpt.save(out / "checkpoint.json")
    write_table(run.rows(), out, "run", ["step", "dg_loss", "penalty", "total"], formats(args, cfg))
    val = [evaluate(ckpt, v) for _, v in splits]
    summary = run.summary()
    summary.update({
        "command": "finetune", "gamma": cfg["penalty"]["gamma"],
        "val_acc": float(np.mean([a for a, _ in val])),
        "val_ce": float(np.mean([c for _, c in val])),
        "final_total": run.records[-1].total if run.records else None,
    })
    summary["target_acc"], summary["target_ce"] = evaluate(ckpt, target)
    io.write_json(summary, out / "summary.json")
    return summary


def cmd_eval(args, cfg):
    out = prepare_out(args, cfg)
    ckpt = load_checkpoint(args.checkpoint)
    results = []
    for spec in args.data:
        data = parse_data_spec(spec)
        acc, ce = evaluate(ckpt, data)
        results.append({"data": spec, "n": len(data), "accuracy": acc, "cross_entropy": ce})
    metrics = {"command": "eval", "checkpoint": str(args.checkpoint), "results": results}
    io.write_json(metrics, out / "metrics.json")
    return metrics


def cmd_bound(args, cfg):
    out = prepare_out(args, cfg)
    post_ckpt = load_checkpoint(args.checkpoint)
    priors = [load_checkpoint(p) for p in args.prior]
    if not priors:
        raise InvalidArgument("bound needs at least one --prior checkpoint")
    arch = post_ckpt.arch
    source = (concat([parse_data_spec(s) for s in args.source]) if args.source
              else concat(make_sources(cfg)))
    target = parse_data_spec(args.target) if args.target else make_target(cfg)
    b = cfg["bounds"]
    theorem = args.theorem or b["theorem"]
    bcfg = BoundConfig(b["beta"], b["sigma"], len(source))
    mc = cfg.mc_config()
    posterior = induced_posterior(post_ckpt.params, post_ckpt.encoder)
    if theorem in (1, 3):
        ensemble = [induced_posterior(p.params, p.encoder) for p in priors]
        if theorem == 1:
            ensemble = ensemble[:1]
        report = theorem3_bound(posterior, ensemble, arch, source, target, bcfg,
                                b["dist_kind"], mc).to_dict()
        report["theorem"] = f"theorem{theorem}"
    elif theorem == 2:
        rule = make_posterior_rule(arch, cfg.train_config(), b["posterior_variance"],
                                   init=post_ckpt.params)
        value, reports = theorem2_expected_bound(rule, source, target, arch, bcfg,
                                                 b["split_fraction"], b["n_splits"],
                                                 cfg["data"]["seed"], b["dist_kind"], mc,
                                                 return_reports=True)
        report = {"theorem": "theorem2", "total": value, "n_splits": b["n_splits"],
                  "split_fraction": b["split_fraction"],
                  "splits": [r.to_dict() for r in reports],
                  "lambda_p_included": False, "note": reports[0].note}
    else:
        raise InvalidArgument("theorem must be 1, 2 or 3")
    io.write_json(report, out / "bound.json")
    return report


def cmd_props(args, cfg):
    out = prepare_out(args, cfg)
    b, seed = cfg["bounds"], cfg["data"]["seed"]
    prop1 = [prop1_instance(seed + i, beta=b["beta"], sigma=b["sigma"],
                            n_resamples=b["prop1_resamples"], dist_kind=b["dist_kind"])
             for i in range(b["prop1_instances"])]
    table = prop2_remainder_table(b["prop2_instances"], seed=seed)
    rng = np.random.default_rng(seed)
    triples, violations = [], 0
    for _ in range(b["prop3_triples"]):
        d1, d2, t = (rng.uniform(-1, 1, rng.integers(1, 30)) * rng.uniform(0.1, 5) for _ in range(3))
        lhs, rhs, ok = prop3_check(d1, d2, t)
        violations += not ok
        triples.append({"lhs": lhs, "rhs": rhs, "holds": ok,
                        "w_d1_t": wasserstein_1d(d1, t), "w_d2_t": wasserstein_1d(d2, t)})
    ratios = np.array([r["ratio"] for r in table])
    result = {
        "command": "props",
        "prop1": [r.to_dict() for r in prop1],
        "prop2": {"instances": len(table),
                  "ratio_in_band": int(np.sum((ratios >= 0.2) & (ratios <= 0.3))),
                  "median_ratio": float(np.median(ratios))},
        "prop3": {"triples": len(triples), "violations": violations,
                  "max_lhs_over_rhs": max(t["lhs"] / t["rhs"] for t in triples if t["rhs"] > 0)},
    }
    write_table(table, out, "prop2", PROP2_COLUMNS, formats(args, cfg))
    io.write_json(result, out / "props.json")
    return result


def cmd_sweep(args, cfg):
    out = prepare_out(args, cfg)
    if args.prior:
        h0 = load_checkpoint(args.prior)
    else:
        d = cfg["data"]
        corpus = gen_pretrain_corpus(d["corpus_envs"], d["corpus_per_env"], d["corpus_k"],
                                     cfg.corpus_p(), d["seed"])
        h0 = pretrain(cfg.arch(), corpus, cfg.pretrain_config())
        h0.save(out / "prior.json")
    sources, target = make_sources(cfg), make_target(cfg)
    _write_data(out, source_splits(cfg, sources), target)
    result = gamma_sweep(h0, sources, cfg.train_config(), cfg["sweep"]["exponents"],
                         gammas=cfg.gammas(), target=target,
                         holdout_fraction=cfg["sweep"]["holdout_fraction"], jobs=args.jobs)
    fmts = formats(args, cfg)
    for i, (ckpt, run) in enumerate(zip(result.checkpoints, result.runs)):
        cell = out / "cells" / f"cell_{i:03d}"
        ckpt.save(cell / "checkpoint.json")
        write_table(run.rows(), cell, "run", ["step", "dg_loss", "penalty", "total"], fmts)
    write_table(result.rows, out, "sweep", SWEEP_COLUMNS + ["target_acc", "target_ce"], fmts)
    sel = result.rows[result.selected_index]
    summary = {"command": "sweep", "cells": len(result.rows), "selected_index": result.selected_index,
               "selected_gamma": result.selected_gamma, "selected_val_acc": sel["val_acc"],
               "selected_target_acc": sel["target_acc"], "selected_target_ce": sel["target_ce"]}
    io.write_json(summary, out / "summary.json")
    return summary


def cmd_report(args, cfg):
    root = Path(args.results_dir)
    if not root.is_dir():
        raise FileNotFoundError(str(root))
    out = Path(args.out) if args.out else root / "report"
    summary = build_report(root, out)
    (out / "config.resolved.toml").write_text(cfg.to_toml())
    (out / "VERSION").write_text(version() + "\n")
    return summary


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval,
            "bound": cmd_bound, "props": cmd_props, "sweep": cmd_sweep, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment configuration")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or [output].dir)")
    common.add_argument("--seed", type=int, help="override [data].seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    common.add_argument("--format", choices=["csv", "json"], help="table format")

    parser = argparse.ArgumentParser(prog="ftlp", description=__doc__.splitlines()[0],
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="pre-train h0 on the variant-B corpus")
    p = sub.add_parser("finetune", parents=[common], help="fine-tune from a prior checkpoint")
    p.add_argument("--prior", required=True)
    p = sub.add_parser("eval", parents=[common], help="accuracy and cross-entropy on data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", action="append", required=True,
                   help="CSV path or spec like A:p_e=0.9,n=500,seed=1 (repeatable)")
    p = sub.add_parser("bound", parents=[common], help="PAC-Bayes bound for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prior", action="append", default=[], help="prior checkpoint (repeatable)")
    p.add_argument("--theorem", type=int, choices=[1, 2, 3])
    p.add_argument("--source", action="append", help="source data (default: config sources)")
    p.add_argument("--target", help="target data (default: config target)")
    sub.add_parser("props", parents=[common], help="numerical checks of the three propositions")
    p = sub.add_parser("sweep", parents=[common], help="gamma sweep with source validation")
    p.add_argument("--prior", help="prior checkpoint (default: pre-train from the config)")
    p = sub.add_parser("report", parents=[common], help="aggregate tables and SVG charts")
    p.add_argument("results_dir")
    return parser


def _fail(code: int, kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            if not Path(args.config).exists():
                raise FileNotFoundError(args.config)
            cfg = ExperimentConfig.load(args.config)
        else:
            cfg = ExperimentConfig()
        if args.seed is not None:
            cfg.override_seed(args.seed)
        if args.jobs < 1:
            raise InvalidArgument("--jobs must be >= 1")
        result = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        sys.stderr.write(json.dumps(exc.to_dict()) + "\n")
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing_file", str(exc), path=exc.filename or str(exc))
    except TrainingDivergence as exc:
        return _fail(EXIT_DIVERGED, "diverged", str(exc))
    except (InvalidArgument, ValueError, KeyError) as exc:
        return _fail(EXIT_INVALID, "invalid", str(exc))
    sys.stdout.write(io.dumps(result) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
