import csv
import json

import numpy as np
import pytest

from popdebias.errors import ConfigError, DataError, NumericalError
from popdebias.experiment import (
    TREATMENTS,
    ExperimentConfig,
    compare_runs,
    prepare_data,
    read_reports_csv,
    read_run_jsonl,
    rerank_run_dir,
    run_experiment,
    sweep_lambda,
    write_run_jsonl,
)
from popdebias.metrics import METRICS, MetricReport
from popdebias.model import RecommendationRun

SMALL = """
# tiny synthetic experiment
synth_users = 200
synth_items = 100
synth_interactions_per_user = 15
synth_tastes = 4
synth_taste_boost = 5
dim = 8
epochs = 2
cutoffs = 5,10
diag_samples = 500
balanced_draws = 2
"""


def small_cfg(tmp_path, *overrides):
    return ExperimentConfig.from_text(SMALL, [f"output={tmp_path / 'run'}", *overrides])


# --- config ------------------------------------------------------------------------------------


def test_config_parsing_and_aliases(tmp_path):
    cfg = small_cfg(tmp_path, "lambda=0.3", "treatment=reg", "rerankers=pop_weighted:0.2,binary_xquad")
    assert cfg.lam == 0.3 and cfg.synth_users == 200 and cfg.cutoffs == (5, 10)
    assert cfg.rerankers == (("pop_weighted", 0.2), ("binary_xquad", 0.2))
    again = ExperimentConfig.from_text(cfg.to_text())
    assert again == cfg


@pytest.mark.parametrize(
    "override",
    ["bogus=1", "dim=abc", "treatment=magic", "lambda=0", "cutoffs=0", "baselines=oracle", "rerankers=foo:0.1"],
)
def test_config_errors(tmp_path, override):
    overrides = [override, "treatment=sam+reg"] if override == "lambda=0" else [override]
    with pytest.raises(ConfigError):
        small_cfg(tmp_path, *overrides)


def test_config_line_errors_name_the_line():
    with pytest.raises(ConfigError, match="line 2"):
        ExperimentConfig.from_text("dim = 4\nnot a pair\n")


def test_config_file_missing(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(tmp_path / "nope.cfg")


@pytest.mark.parametrize("treatment", sorted(TREATMENTS))
def test_treatment_dispatch(tmp_path, treatment):
    cfg = small_cfg(tmp_path, f"treatment={treatment}", "lambda=0.4")
    tcfg = cfg.train_config()
    sampler, penalized = TREATMENTS[treatment]
    assert tcfg.sampler == ("balanced" if treatment.startswith("sam") else "standard")
    assert tcfg.lam == (0.4 if treatment in ("reg", "sam+reg") else 0.0)
    assert sampler == tcfg.sampler and penalized == (tcfg.lam > 0)


# --- run -----------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("exp")
    cfg = ExperimentConfig.from_text(
        SMALL, [f"output={tmp / 'run'}", "baselines=random,mostpop", "rerankers=smooth_xquad:0.3", "candidates=30"]
    )
    return cfg, run_experiment(cfg)


def test_run_writes_artifacts(finished_run):
    cfg, res = finished_run
    names = {p.name for p in res.output.iterdir()}
    assert {
        "config.txt",
        "split_report.txt",
        "trace.csv",
        "model.npz",
        "recommendations.jsonl",
        "candidates.jsonl",
        "report.csv",
        "report.json",
        "pairwise_accuracy.csv",
        "relevance_distribution.tsv",
    } <= names
    assert "INCOMPLETE" not in names
    payload = json.loads((res.output / "report.json").read_text())
    assert payload["config"]["lambda"] == cfg.lam
    assert set(payload["treatments"]) == {"sam+reg", "random", "mostpop", "sam+reg+smooth_xquad@0.3"}


def test_report_complete_for_every_cutoff_and_variant(finished_run):
    cfg, res = finished_run
    rep = res.reports["sam+reg"]
    for metric in METRICS:
        for k in cfg.cutoffs:
            for variant in ("full", "balanced"):
                assert 0.0 <= rep.get(metric, k, variant) <= 1.0
    with open(res.output / "report.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["treatment", "metric", "cutoff", "variant", "value"]
    assert len(rows) == 1 + 4 * len(METRICS) * 2 * 2


def test_report_csv_round_trip(finished_run):
    _, res = finished_run
    back = read_reports_csv(res.output / "report.csv")
    assert back.keys() == res.reports.keys()
    for name, rep in res.reports.items():
        assert back[name].values == rep.values


def test_base_trace_has_zero_penalty(tmp_path):
    res = run_experiment(small_cfg(tmp_path, "treatment=base", "lambda=0.5"))
    with open(res.output / "trace.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert all(float(r["mean_penalty"]) == 0.0 for r in rows)


def test_end_to_end_determinism(tmp_path):
    a = run_experiment(small_cfg(tmp_path / "a"))
    b = run_experiment(small_cfg(tmp_path / "b"))
    for name in ("report.csv", "trace.csv", "recommendations.jsonl", "pairwise_accuracy.csv"):
        assert (a.output / name).read_bytes() == (b.output / name).read_bytes()


def test_stage_error_marks_incomplete(tmp_path):
    cfg = small_cfg(tmp_path, "dataset=" + str(tmp_path / "missing.csv"), "format=csv")
    with pytest.raises(DataError, match=r"^\[data\]"):
        run_experiment(cfg)
    assert (tmp_path / "run" / "INCOMPLETE").exists()


def test_numerical_failure_is_reported(tmp_path):
    cfg = small_cfg(tmp_path, "learning_rate=1e300")
    with pytest.raises(NumericalError, match=r"^\[train\]"):
        run_experiment(cfg)


def test_run_jsonl_round_trip(tmp_path):
    items = np.array([[3, 1, -1], [0, 2, 4]])
    scores = np.array([[0.5, 0.25, np.nan], [1.0, 0.5, 0.125]])
    write_run_jsonl(RecommendationRun(3, items, scores), tmp_path / "r.jsonl")
    back = read_run_jsonl(tmp_path / "r.jsonl")
    assert np.array_equal(back.items, items)
    assert np.allclose(back.scores, scores, equal_nan=True)


def test_rerank_run_dir(finished_run):
    _, res = finished_run
    out = rerank_run_dir(res.output, "pop_weighted", 0.0)
    reps = read_reports_csv(out / "report.csv")
    (name,) = reps
    assert name == "sam+reg+pop_weighted@0"
    # strength 0 reproduces the base model's metrics
    assert reps[name].values == res.reports["sam+reg"].values


# --- sweep / compare -------------------------------------------------------------------------------


def test_sweep_rows(tmp_path):
    cfg = small_cfg(tmp_path, "epochs=1", "cutoffs=10")
    lambdas = [0.0, 0.5, 1.0]
    reports = sweep_lambda(cfg, lambdas)
    assert len(reports) == 3
    with open(tmp_path / "run" / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * len(METRICS) * 2
    assert {r["treatment"] for r in rows} == {f"sam+reg@lambda={x:g}" for x in lambdas}
    with open(tmp_path / "run" / "lambda_0" / "trace.csv", newline="") as fh:
        assert all(float(r["mean_penalty"]) == 0.0 for r in csv.DictReader(fh))


def _rep(values):
    return MetricReport({(m, 10, "full"): v for m, v in values.items()})


def test_compare_marks_strict_best_only():
    a = _rep({"ndcg": 0.2, "isp": 0.5})
    b = _rep({"ndcg": 0.2, "isp": 0.7})
    table = compare_runs({"a": a, "b": b})
    best = {row[0]: row[4] for row in table.rows}
    assert best == {"ndcg": None, "isp": 1}
    text = table.to_text()
    assert "0.7000*" in text and "0.2000*" not in text


def test_compare_four_treatments_layout():
    reps = {t: _rep({"ndcg": 0.1 * n, "isp": 0.3}) for n, t in enumerate(sorted(TREATMENTS))}
    table = compare_runs(reps)
    assert table.runs == sorted(TREATMENTS)
    assert all(len(row[3]) == 4 for row in table.rows)


def test_compare_errors():
    with pytest.raises(ConfigError):
        compare_runs({"a": _rep({"ndcg": 0.1})})
    other = MetricReport({("ndcg", 5, "full"): 0.1})
    with pytest.raises(ConfigError, match="cutoffs"):
        compare_runs({"a": _rep({"ndcg": 0.1}), "b": other})


def test_prepare_data_balanced_draws(tmp_path):
    data = prepare_data(small_cfg(tmp_path, "balanced_draws=3"))
    assert len(data.balanced_draws) == 3
    for t in data.balanced_draws:
        assert (np.bincount(t.indices) <= 1).all()
