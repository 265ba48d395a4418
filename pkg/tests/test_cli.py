import csv
import json
from pathlib import Path

import pytest

from ftlp import io
from ftlp.cli import main
from ftlp.report import embedded_data
from ftlp.trainer import Checkpoint

SMALL = """\
[data]
seed = 3
n_per_env = 60
target_n = 100
corpus_envs = 4
corpus_per_env = 30

[train]
steps = 20
pretrain_steps = 30

[bounds]
n_samples = 20
dist_draws = 3
dist_pairs = 3
prop1_instances = 1
prop1_resamples = 1
prop2_instances = 5
prop3_triples = 20

[sweep]
gammas = [0.0]
"""

# documented CSV headers, by file name
SCHEMAS = {
    "run.csv": ["step", "dg_loss", "penalty", "total"],
    "sweep.csv": ["gamma", "val_acc", "val_ce", "final_total", "selected", "target_acc",
                  "target_ce"],
    "prop2.csv": ["instance", "delta_norm", "remainder", "remainder_half", "ratio"],
    "runs.csv": ["run", "step", "dg_loss", "penalty", "total"],
    "sweeps.csv": ["sweep", "gamma", "val_acc", "val_ce", "final_total", "selected",
                   "target_acc", "target_ce"],
}
DATA_HEADER = ["x_inv", "x_sup", "label", "env_id"]
TEXT_COLUMNS = {"run", "sweep"}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.toml"
    cfg.write_text(SMALL)
    assert run("pretrain", "--config", cfg, "--out", root / "pre") == 0
    prior = root / "pre" / "checkpoint.json"
    assert run("finetune", "--config", cfg, "--out", root / "ft", "--prior", prior) == 0
    assert run("sweep", "--config", cfg, "--out", root / "sw", "--prior", prior) == 0
    assert run("props", "--config", cfg, "--out", root / "props") == 0
    assert run("report", root, "--out", root / "rep") == 0
    return root


def read_json(path):
    return json.loads(Path(path).read_text())


# ------------------------------------------------------------------ outputs

@pytest.mark.parametrize("sub", ["pre", "ft", "sw", "props", "rep"])
def test_every_output_dir_echoes_config_and_version(workspace, sub):
    out = workspace / sub
    assert (out / "config.resolved.toml").is_file()
    assert (out / "VERSION").read_text().strip()


def test_eval_reproduces_training_accuracy(workspace, capsys):
    ft = workspace / "ft"
    capsys.readouterr()
    assert run("eval", "--checkpoint", ft / "checkpoint.json", "--data", ft / "data" / "source_0.csv",
               "--data", ft / "data" / "source_1.csv", "--out", workspace / "ev") == 0
    metrics = read_json(workspace / "ev" / "metrics.json")
    summary = read_json(ft / "summary.json")
    got = [r["accuracy"] for r in metrics["results"]]
    assert got == [summary["accuracies"]["source_0"], summary["accuracies"]["source_1"]]
    assert json.loads(capsys.readouterr().out) == metrics


def test_bound_with_self_prior_has_zero_kl(workspace):
    ck = workspace / "ft" / "checkpoint.json"
    assert run("bound", "--config", workspace / "small.toml", "--checkpoint", ck, "--prior", ck,
               "--out", workspace / "bd") == 0
    report = read_json(workspace / "bd" / "bound.json")
    assert report["kl_term"] == 0.0
    assert report["lambda_p_included"] is False
    parts = ("empirical_term", "kl_term", "confidence_term", "dist_term")
    assert report["total"] == sum(report[k] for k in parts)


@pytest.mark.parametrize("theorem", [2, 3])
def test_bound_other_theorems(workspace, theorem):
    ck = workspace / "ft" / "checkpoint.json"
    prior = workspace / "pre" / "checkpoint.json"
    out = workspace / f"bd{theorem}"
    assert run("bound", "--config", workspace / "small.toml", "--checkpoint", ck, "--prior", prior,
               "--prior", ck, "--theorem", theorem, "--out", out) == 0
    report = read_json(out / "bound.json")
    assert report["theorem"] == f"theorem{theorem}"
    assert report["total"] > 0


def test_sweep_of_zero_equals_finetune_at_zero(workspace):
    rows = io.read_json(workspace / "sw" / "sweep.json")
    ft = read_json(workspace / "ft" / "summary.json")
    assert len(rows) == 1
    (row,) = rows
    for key in ("val_acc", "val_ce", "final_total", "target_acc", "target_ce"):
        assert row[key] == ft[key], key
    cell = Checkpoint.load(workspace / "sw" / "cells" / "cell_000" / "checkpoint.json")
    assert cell == Checkpoint.load(workspace / "ft" / "checkpoint.json")
    assert read_json(workspace / "sw" / "summary.json")["selected_gamma"] == 0.0


def test_echoed_config_reproduces_outputs_bit_identically(workspace):
    again = workspace / "ft_again"
    assert run("finetune", "--config", workspace / "ft" / "config.resolved.toml", "--out", again,
               "--prior", workspace / "pre" / "checkpoint.json") == 0
    first = sorted(p.relative_to(workspace / "ft") for p in (workspace / "ft").rglob("*")
                   if p.is_file())
    second = sorted(p.relative_to(again) for p in again.rglob("*") if p.is_file())
    assert first == second
    for rel in first:
        assert (workspace / "ft" / rel).read_bytes() == (again / rel).read_bytes(), rel


def test_props_outputs(workspace):
    props = read_json(workspace / "props" / "props.json")
    assert props["prop3"]["violations"] == 0
    assert props["prop2"]["instances"] == 5
    assert len(props["prop1"]) == 1 and props["prop1"][0]["phi_agrees"]


def test_output_directory_from_environment(tmp_path, monkeypatch):
    cfg = tmp_path / "c.toml"
    cfg.write_text(SMALL)
    monkeypatch.setenv("FTLP_OUT", str(tmp_path / "env_out"))
    assert run("props", "--config", cfg) == 0
    assert (tmp_path / "env_out" / "props.json").is_file()


def test_format_flag_selects_table_format(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(SMALL)
    assert run("props", "--config", cfg, "--format", "json", "--out", tmp_path / "o") == 0
    assert (tmp_path / "o" / "prop2.json").is_file()
    assert not (tmp_path / "o" / "prop2.csv").exists()


def test_seed_flag_overrides_config(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(SMALL)
    assert run("props", "--config", cfg, "--seed", 11, "--out", tmp_path / "o") == 0
    assert "seed = 11" in (tmp_path / "o" / "config.resolved.toml").read_text()


# ------------------------------------------------------------------ schemas and report

def _check_value(column, value):
    if column in TEXT_COLUMNS:
        assert value
    elif column == "selected":
        assert value in ("true", "false")
    elif column in ("label", "env_id", "step", "instance"):
        int(value)
    else:
        float(value)


def test_every_emitted_csv_matches_its_schema(workspace):
    files = list(workspace.rglob("*.csv"))
    assert len(files) > 10
    for path in files:
        expected = DATA_HEADER if path.parent.name == "data" else SCHEMAS[path.name]
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            assert next(reader) == expected, path
            rows = list(reader)
        assert rows, path
        for row in rows:
            assert len(row) == len(expected)
            for column, value in zip(expected, row):
                _check_value(column, value)


def test_report_svg_embeds_plotted_data(workspace):
    svg = (workspace / "rep" / "loss_penalty.svg").read_text()
    series = embedded_data(svg)
    with open(workspace / "ft" / "run.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert series["ft loss"] == [(float(r["step"]), float(r["dg_loss"])) for r in rows]
    acc = embedded_data((workspace / "rep" / "accuracy_vs_gamma.svg").read_text())
    assert any(name.endswith("val") for name in acc)
    assert read_json(workspace / "rep" / "report.json")["charts"] == ["loss_penalty.svg",
                                                                      "accuracy_vs_gamma.svg"]


# ------------------------------------------------------------------ errors

def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_unknown_key_is_exit_2_with_line(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[train]\nsteps = 3\nstep_size = 0.1\n")
    assert run("props", "--config", cfg, "--out", tmp_path) == 2
    err = error_of(capsys)
    assert err["key"] == "train.step_size" or "step_size" in err["key"]
    assert err["line"] == 3


def test_malformed_config_is_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[train\nsteps = 3\n")
    assert run("props", "--config", cfg, "--out", tmp_path) == 2
    assert error_of(capsys)["line"] == 1


def test_wrong_type_is_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[train]\nsteps = \"many\"\n")
    assert run("props", "--config", cfg, "--out", tmp_path) == 2
    assert error_of(capsys)["line"] == 2


def test_missing_config_is_exit_3(tmp_path, capsys):
    assert run("props", "--config", tmp_path / "nope.toml") == 3
    assert error_of(capsys)["error"] == "missing_file"


def test_missing_checkpoint_is_exit_3(tmp_path):
    assert run("eval", "--checkpoint", tmp_path / "nope.json", "--data", "A:p_e=0.5,n=10,seed=0",
               "--out", tmp_path) == 3


def test_bad_data_spec_is_exit_4(workspace, tmp_path):
    ck = workspace / "pre" / "checkpoint.json"
    assert run("eval", "--checkpoint", ck, "--data", "A:p_e=2,n=10,seed=0", "--out", tmp_path) == 4
    assert run("eval", "--checkpoint", ck, "--data", "A:bogus=1", "--out", tmp_path) == 4


def test_divergence_is_exit_5(workspace, tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(SMALL.replace("steps = 20", "steps = 20\nlearning_rate = 1e200\n"
                                 "optimizer = \"sgd\""))
    assert run("finetune", "--config", cfg, "--prior", workspace / "pre" / "checkpoint.json",
               "--out", tmp_path / "o") == 5
    assert error_of(capsys)["error"] == "diverged"
