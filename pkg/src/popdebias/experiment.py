"""Experiment configuration and orchestration: data -> split -> popularity ->
training under a treatment -> top-k -> metrics -> optional re-ranking, with
every artifact written to one output directory."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from .data import (
    InteractionDataset,
    PopularityStats,
    SplitDataset,
    build_balanced_test,
    resample_balanced_tests,
    compute_popularity,
    generate_synthetic,
    load_interactions,
    temporal_split,
)
from .errors import ConfigError, DataError, PopDebiasError
from .model import (
    RecommendationRun,
    TrainConfig,
    baseline_mostpop,
    baseline_random,
    recommend_topk,
    save_model,
    train,
    write_trace,
)
from .rerank import RERANKERS, apply_reranker
from .seeds import rng_stream, stream_seed

log = logging.getLogger(__name__)

TREATMENTS = {
    # treatment: (sampler, uses the correlation penalty)
    "base": ("standard", False),
    "sam": ("balanced", False),
    "reg": ("standard", True),
    "sam+reg": ("balanced", True),
}
BASELINES = ("random", "mostpop")
REPORT_HEADER = ["treatment", "metric", "cutoff", "variant", "value"]


def _split_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _parse_rerankers(text: str) -> tuple[tuple[str, float], ...]:
    out = []
    for part in _split_list(text):
        method, _, strength = part.partition(":")
        if method not in RERANKERS:
            raise ConfigError(f"unknown re-ranker {method!r}")
        try:
            out.append((method, float(strength or 0.2)))
        except ValueError:
            raise ConfigError(f"bad re-ranker strength in {part!r}") from None
    return tuple(out)


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    format: str = "movielens-dat"
    synth_users: int = 2000
    synth_items: int = 1000
    synth_interactions_per_user: int = 50
    synth_skew: float = 1.2
    synth_tastes: int = 20
    synth_taste_boost: float = 10.0
    test_ratio: float = 0.2
    balanced_m: int = 1
    balanced_draws: int = 20
    seed: int = 0
    treatment: str = "sam+reg"
    objective: str = "pairwise"
    dim: int = 64
    learning_rate: float = 10.0
    l2: float = 0.001
    lam: float = 0.2
    t: int = 4
    batch_size: int = 256
    epochs: int = 30
    cutoffs: tuple[int, ...] = (5, 10, 20)
    baselines: tuple[str, ...] = ()
    rerankers: tuple[tuple[str, float], ...] = ()
    candidates: int = 100
    diag_samples: int = 10_000
    relevance_pairs: int = 1
    output: str = "runs/experiment"

    # config-file key -> attribute, where they differ
    ALIASES = {"lambda": "lam"}

    @classmethod
    def from_text(cls, text: str, overrides: list[str] | None = None) -> "ExperimentConfig":
        """Parse ``key = value`` lines (``#`` comments) plus ``key=value``
        overrides."""
        pairs: list[tuple[str, str, str]] = []
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {n}: expected key = value")
            key, _, value = line.partition("=")
            pairs.append((key.strip(), value.strip(), f"config line {n}"))
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r}: expected key=value")
            key, _, value = item.partition("=")
            pairs.append((key.strip(), value.strip(), f"override {item!r}"))
        cfg = cls()
        for key, value, where in pairs:
            cfg._set(key, value, where)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path, overrides: list[str] | None = None) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, overrides)

    def _set(self, key: str, value: str, where: str) -> None:
        name = self.ALIASES.get(key, key)
        fields = {f.name: f for f in dataclasses.fields(self)}
        if name not in fields:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            if name == "cutoffs":
                parsed = tuple(sorted({int(v) for v in _split_list(value)}))
            elif name == "baselines":
                parsed = tuple(_split_list(value))
            elif name == "rerankers":
                parsed = _parse_rerankers(value)
            else:
                kind = type(getattr(ExperimentConfig(), name))
                parsed = kind(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
        setattr(self, name, parsed)

    def validate(self) -> None:
        if self.treatment not in TREATMENTS:
            raise ConfigError(f"treatment must be one of {sorted(TREATMENTS)}")
        _, penalized = TREATMENTS[self.treatment]
        if penalized and self.lam <= 0:
            raise ConfigError(f"treatment {self.treatment!r} needs lambda > 0")
        if self.balanced_draws < 0:
            raise ConfigError("balanced_draws must be >= 0")
        if not self.cutoffs or min(self.cutoffs) < 1:
            raise ConfigError("cutoffs must be positive")
        for b in self.baselines:
            if b not in BASELINES:
                raise ConfigError(f"unknown baseline {b!r}")
        if self.rerankers and self.candidates < max(self.cutoffs):
            raise ConfigError("candidates must be >= the largest cutoff")
        self.train_config().validate()

    def train_config(self, lam: float | None = None) -> TrainConfig:
        """Training settings after treatment dispatch: ``base``/``sam`` run
        with lambda 0, ``reg``/``sam+reg`` with the configured lambda."""
        sampler, penalized = TREATMENTS[self.treatment]
        if lam is None:
            lam = self.lam if penalized else 0.0
        return TrainConfig(
            dim=self.dim,
            learning_rate=self.learning_rate,
            l2=self.l2,
            lam=lam,
            t=self.t,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            sampler=sampler,
            objective=self.objective,
        )

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            key = "lambda" if f.name == "lam" else f.name
            if f.name == "cutoffs" or f.name == "baselines":
                value = ",".join(str(v) for v in value)
            elif f.name == "rerankers":
                value = ",".join(f"{m}:{s!r}" for m, s in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def snapshot(self) -> dict:
        return {("lambda" if k == "lam" else k): v for k, v in dataclasses.asdict(self).items()}


def _int_seed(root: int, name: str) -> int:
    return int(stream_seed(root, name).generate_state(1)[0])


@dataclass
class PreparedData:
    dataset: InteractionDataset
    split: SplitDataset
    stats: PopularityStats
    balanced_draws: list = dataclasses.field(default_factory=list)


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    """Load or generate the dataset, split it, build the balanced test and
    popularity statistics."""
    if cfg.dataset == "synthetic":
        ds = generate_synthetic(
            cfg.synth_users,
            cfg.synth_items,
            cfg.synth_interactions_per_user,
            cfg.synth_skew,
            seed=_int_seed(cfg.seed, "synthetic"),
            n_tastes=cfg.synth_tastes,
            taste_boost=cfg.synth_taste_boost,
        )
    else:
        ds = load_interactions(cfg.dataset, cfg.format)
    split = temporal_split(ds, cfg.test_ratio)
    split = build_balanced_test(split, cfg.balanced_m, seed=_int_seed(cfg.seed, "balanced-test"))
    draws = resample_balanced_tests(
        split, cfg.balanced_m, cfg.balanced_draws, _int_seed(cfg.seed, "balanced-draws")
    )
    return PreparedData(ds, split, compute_popularity(split), draws)


def write_run_jsonl(run: RecommendationRun, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in range(run.n_users):
            row = run.items[u]
            ok = row >= 0
            pairs = [[int(i), float(s)] for i, s in zip(row[ok], run.scores[u][ok])]
            fh.write(json.dumps({"user": u, "k": run.k, "items": pairs}) + "\n")


def read_run_jsonl(path: str | Path) -> RecommendationRun:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path} line {n}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: empty run")
    k = max(r["k"] for r in rows)
    n_users = max(r["user"] for r in rows) + 1
    items = np.full((n_users, k), -1, dtype=np.int64)
    scores = np.full((n_users, k), np.nan)
    for r in rows:
        pairs = r["items"]
        if pairs:
            items[r["user"], : len(pairs)] = [p[0] for p in pairs]
            scores[r["user"], : len(pairs)] = [p[1] for p in pairs]
    return RecommendationRun(k, items, scores, {"source": str(path)})


def write_reports_csv(reports: dict[str, M.MetricReport], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for name, report in reports.items():
            for m, c, v, x in report.rows():
                writer.writerow([name, m, c, v, repr(x)])


def read_reports_csv(path: str | Path) -> dict[str, M.MetricReport]:
    reports: dict[str, M.MetricReport] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != REPORT_HEADER:
            raise DataError(f"{path}: expected header {','.join(REPORT_HEADER)}")
        for row in reader:
            if not row:
                continue
            try:
                name, metric, cutoff, variant, value = row
                reports.setdefault(name, M.MetricReport()).values[(metric, int(cutoff), variant)] = float(value)
            except ValueError:
                raise DataError(f"{path} line {reader.line_num}: malformed row") from None
    return reports


@dataclass
class ExperimentResult:
    output: Path
    reports: dict[str, M.MetricReport]
    trace: list = field(default_factory=list)
    pairwise_accuracy: dict = field(default_factory=dict)


class _Stage:
    """Prefix errors raised inside a stage with the stage name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("stage: %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, PopDebiasError) and not getattr(exc, "_staged", False):
            exc.args = (f"[{self.name}] {exc.args[0] if exc.args else exc}",) + exc.args[1:]
            exc._staged = True
        return False


def run_experiment(cfg: ExperimentConfig, data: PreparedData | None = None) -> ExperimentResult:
    """Run one configured experiment end to end and write its artifacts.

    On failure the output directory is marked with an ``INCOMPLETE`` file.
    """
    cfg.validate()
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "INCOMPLETE"
    marker.write_text("run in progress or failed\n")
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    reports: dict[str, M.MetricReport] = {}
    kmax = max(cfg.cutoffs)
    with _Stage("data"):
        if data is None:
            data = prepare_data(cfg)
        split, stats = data.split, data.stats
        if split.report is not None:
            (out / "split_report.txt").write_text(split.report.to_text(), encoding="utf-8")
    with _Stage("train"):
        tcfg = cfg.train_config()
        model, trace = train(split, stats, tcfg)
        write_trace(trace, out / "trace.csv")
        save_model(model, out / "model.npz", tcfg)
    with _Stage("recommend"):
        depth = max(kmax, cfg.candidates if cfg.rerankers else kmax)
        cands = recommend_topk(model, split, depth)
        run = cands.truncate(kmax)
        run.provenance.update({"treatment": cfg.treatment, "config_hash": tcfg.digest()})
        write_run_jsonl(run, out / "recommendations.jsonl")
        write_run_jsonl(cands, out / "candidates.jsonl")
    with _Stage("evaluate"):
        reports[cfg.treatment] = M.evaluate(run, split, stats, cfg.cutoffs, data.balanced_draws)
        for name in cfg.baselines:
            if name == "random":
                brun = baseline_random(split, kmax, rng_stream(cfg.seed, "random-baseline"))
            else:
                brun = baseline_mostpop(split, stats, kmax)
            reports[name] = M.evaluate(brun, split, stats, cfg.cutoffs, data.balanced_draws)
    with _Stage("rerank"):
        for method, strength in cfg.rerankers:
            rr = apply_reranker(method, cands, split, stats, strength, kmax)
            name = f"{cfg.treatment}+{method}@{strength:g}"
            reports[name] = M.evaluate(rr, split, stats, cfg.cutoffs, data.balanced_draws)
    with _Stage("diagnostics"):
        table = M.pairwise_accuracy_buckets(
            model, split, stats, cfg.diag_samples, rng_stream(cfg.seed, "diagnostics")
        )
        M.write_pairwise_table(table, out / "pairwise_accuracy.csv")
        try:
            sample = M.relevance_distribution_sample(
                model, split, stats, cfg.relevance_pairs, rng_stream(cfg.seed, "relevance")
            )
            M.write_relevance_sample(sample, out / "relevance_distribution.tsv")
        except DataError as exc:
            log.warning("relevance distribution skipped: %s", exc)
    with _Stage("report"):
        write_reports_csv(reports, out / "report.csv")
        extra = {"config": cfg.snapshot(), "treatments": list(reports)}
        payload = {
            name: {"vectors": rep.vectors, "flags": rep.flags} for name, rep in reports.items()
        }
        with open(out / "report.json", "w", encoding="utf-8") as fh:
            json.dump({**extra, "per_item": payload}, fh, indent=1, sort_keys=True)
            fh.write("\n")
    marker.unlink()
    return ExperimentResult(out, reports, trace, table)


def sweep_lambda(cfg: ExperimentConfig, lambdas) -> dict[str, M.MetricReport]:
    """Train the configured treatment's sampler at each lambda (lambda 0
    allowed here). Each point writes to ``<output>/lambda_<value>``; the
    combined table goes to ``<output>/sweep.csv``."""
    root = Path(cfg.output)
    data = prepare_data(cfg)
    reports: dict[str, M.MetricReport] = {}
    for lam in lambdas:
        lam = float(lam)
        if not 0 <= lam <= 1:
            raise ConfigError(f"lambda {lam} outside [0, 1]")
        point = dataclasses.replace(cfg, output=str(root / f"lambda_{lam:g}"), baselines=(), rerankers=())
        # penalized treatments refuse lambda 0, so run the point under the
        # matching treatment and force the lambda through train_config
        sampler, _ = TREATMENTS[cfg.treatment]
        point.treatment = ("sam+reg" if sampler == "balanced" else "reg") if lam > 0 else (
            "sam" if sampler == "balanced" else "base"
        )
        point.lam = lam if lam > 0 else cfg.lam
        res = run_experiment(point, data)
        reports[f"{cfg.treatment}@lambda={lam:g}"] = res.reports[point.treatment]
    write_reports_csv(reports, root / "sweep.csv")
    return reports


@dataclass
class Comparison:
    runs: list[str]
    rows: list[tuple[str, int, str, list[float], int | None]]

    def to_text(self) -> str:
        width = max(12, *(len(r) for r in self.runs))
        head = f"{'metric':<10} {'k':>3} {'variant':<9} " + " ".join(f"{r:>{width}}" for r in self.runs)
        lines = [head, "-" * len(head)]
        for metric, k, variant, vals, best in self.rows:
            cells = []
            for n, v in enumerate(vals):
                text = f"{v:.4f}" + ("*" if n == best else " ")
                cells.append(f"{text:>{width}}")
            lines.append(f"{metric:<10} {k:>3} {variant:<9} " + " ".join(cells))
        lines.append("* best per row (strict)")
        return "\n".join(lines) + "\n"

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["metric", "cutoff", "variant", *self.runs, "best"])
            for metric, k, variant, vals, best in self.rows:
                writer.writerow([metric, k, variant, *map(repr, vals), "" if best is None else self.runs[best]])


def compare_runs(reports: dict[str, M.MetricReport]) -> Comparison:
    """Side-by-side table per (metric, cutoff, variant); every metric is
    higher-is-better and a cell is marked only when it is the unique maximum."""
    if len(reports) < 2:
        raise ConfigError("need at least two reports to compare")
    names = list(reports)
    cut = {n: tuple(r.cutoffs) for n, r in reports.items()}
    if len(set(cut.values())) != 1:
        raise ConfigError(f"reports have mismatched cutoffs: {cut}")
    keys = [k for k in reports[names[0]].values if all(k in r.values for r in reports.values())]
    metric_order = {m: n for n, m in enumerate(M.METRICS)}
    keys.sort(key=lambda k: (metric_order.get(k[0], 99), k[0], k[2], k[1]))
    rows = []
    for metric, k, variant in keys:
        vals = [reports[n].values[(metric, k, variant)] for n in names]
        top = max(vals)
        best = vals.index(top) if vals.count(top) == 1 else None
        rows.append((metric, k, variant, vals, best))
    return Comparison(names, rows)


def rerank_run_dir(run_dir: str | Path, method: str, strength: float, k: int | None = None) -> Path:
    """Re-rank a finished run's candidate lists and evaluate them; results
    go to ``<run_dir>/rerank_<method>_<strength>``."""
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.from_file(run_dir / "config.txt")
    cands = read_run_jsonl(run_dir / "candidates.jsonl")
    data = prepare_data(cfg)
    if cands.n_users != data.split.n_users:
        raise DataError("candidate lists do not match the configured dataset")
    k = k or max(cfg.cutoffs)
    cutoffs = [c for c in cfg.cutoffs if c <= k] or [k]
    rr = apply_reranker(method, cands, data.split, data.stats, strength, k)
    out = run_dir / f"rerank_{method}_{strength:g}"
    if out.exists():
        shutil.rmtree(out)
    out.mkdir()
    write_run_jsonl(rr, out / "recommendations.jsonl")
    report = M.evaluate(rr, data.split, data.stats, cutoffs, data.balanced_draws)
    write_reports_csv({f"{cfg.treatment}+{method}@{strength:g}": report}, out / "report.csv")
    return out
