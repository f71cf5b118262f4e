"""Train + index + evaluate sweeps on the synthetic clustered benchmark.

Every row is an independent run for one (setting, seed). The benchmark data
is fixed by ``BenchmarkConfig.seed``; the run seed drives head
initialization and minibatch sampling only.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .errors import ConfigError
from .matcher import MatchStrategy
from .pipeline import EvalReport, SearchEngine, evaluate
from .quantizer import QuantizerConfig, QuantizerHead, init_head
from .synthetic import BenchmarkConfig, ClusteredBenchmark
from .trainer import LossConfig, TrainConfig, train

logger = logging.getLogger(__name__)

AXES = ("match-strategy", "dq-sweep", "sid-count-query", "sid-count-doc", "loss-removal")
RANK_SEED_OFFSET = 1000


def _touch_config(dim: int) -> QuantizerConfig:
    return QuantizerConfig(d=64, d_q=19, K=2, d_base=dim, m_query=3, n_doc=8, mode="touch")


def _rank_config(dim: int) -> QuantizerConfig:
    return QuantizerConfig(d=32, d_q=1, K=2, d_base=dim, m_query=4, n_doc=4, mode="rank")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a single benchmark run depends on, apart from its seed."""

    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    touch: QuantizerConfig = field(default_factory=lambda: _touch_config(32))
    rank: QuantizerConfig = field(default_factory=lambda: _rank_config(32))
    touch_loss: LossConfig = field(default_factory=LossConfig)
    rank_loss: LossConfig = field(default_factory=LossConfig)
    touch_train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=2000, batch_size=32, lr=5e-2))
    rank_train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=1000, batch_size=32, lr=5e-2))
    ks: tuple[int, ...] = (10, 300)
    query_tokens: int | None = None
    doc_tokens: int | None = None

    @classmethod
    def desk(cls, scale: float = 1.0) -> ExperimentConfig:
        """Default benchmark protocol; ``scale`` < 1 keeps that fraction of the clusters."""
        if not 0 < scale <= 1:
            raise ConfigError(f"scale must be in (0, 1], got {scale}")
        bench = BenchmarkConfig()
        clusters = max(1, round(bench.n_clusters * scale))
        bench = replace(bench, n_clusters=clusters, n_docs=clusters * bench.subclusters * bench.docs_per_topic)
        return cls(benchmark=bench, touch=_touch_config(bench.dim), rank=_rank_config(bench.dim))

    def replace_train(self, *, touch_steps: int | None = None, rank_steps: int | None = None) -> ExperimentConfig:
        cfg = self
        if touch_steps is not None:
            cfg = replace(cfg, touch_train=replace(cfg.touch_train, steps=touch_steps))
        if rank_steps is not None:
            cfg = replace(cfg, rank_train=replace(cfg.rank_train, steps=rank_steps))
        return cfg

    def replace_ks(self, ks: Sequence[int]) -> ExperimentConfig:
        return replace(self, ks=tuple(sorted(set(int(k) for k in ks))))


@dataclass(frozen=True)
class AblationSpec:
    axis: str
    values: Sequence[str]
    seeds: Sequence[int] = (0,)

    def __post_init__(self) -> None:
        if self.axis not in AXES:
            raise ConfigError(f"unknown ablation axis {self.axis!r}; choose from {', '.join(AXES)}")
        if not self.values or not self.seeds:
            raise ConfigError("an ablation needs at least one value and one seed")


@dataclass
class AblationRow:
    axis: str
    setting: str
    seed: int
    report: EvalReport
    wall_time_s: float


class _HeadCache:
    """Trained heads keyed by everything that determines them."""

    def __init__(self) -> None:
        self._heads: dict[tuple, QuantizerHead] = {}

    def get(self, bench: ClusteredBenchmark, config: QuantizerConfig, loss: LossConfig, tcfg: TrainConfig, seed: int):
        key = (bench.config, config, loss, tcfg, seed)
        if key not in self._heads:
            head = init_head(config, seed)
            if tcfg.steps > 0:
                head, _ = train(bench.sampler, head, loss, replace(tcfg, seed=seed))
            self._heads[key] = head
        return self._heads[key]


def run_experiment(
    config: ExperimentConfig,
    seed: int,
    *,
    bench: ClusteredBenchmark | None = None,
    cache: _HeadCache | None = None,
) -> EvalReport:
    """Train both heads (unless cached), index the corpus and evaluate the test queries."""
    bench = bench if bench is not None else ClusteredBenchmark(config.benchmark)
    cache = cache if cache is not None else _HeadCache()
    rank_seed = seed + RANK_SEED_OFFSET
    rank = cache.get(bench, config.rank, config.rank_loss, config.rank_train, rank_seed)
    touch = cache.get(bench, config.touch, config.touch_loss, config.touch_train, seed)
    if config.query_tokens is not None:
        if config.query_tokens > touch.config.n_slots:
            raise ConfigError(f"query token count {config.query_tokens} exceeds the head's {touch.config.n_slots} slots")
        touch = touch.with_config(m_query=config.query_tokens)
    engine = SearchEngine.build(bench.doc_ids, bench.doc_features, touch, rank, n_doc_tokens=config.doc_tokens)
    return evaluate(bench.test_queries(), engine, config.ks)


def _setting_config(base: ExperimentConfig, axis: str, value: str) -> ExperimentConfig:
    try:
        if axis == "match-strategy":
            loss = replace(base.touch_loss, strategy=MatchStrategy(value))
            return replace(base, touch_loss=loss)
        if axis == "loss-removal":
            if value == "none":
                return base
            if value not in ("match", "reg"):
                raise ConfigError(f"loss-removal values are none, match, reg; got {value!r}")
            return replace(base, touch_loss=replace(base.touch_loss, **{f"lambda_{value}": 0.0}))
        n = int(value)
    except ValueError as exc:
        raise ConfigError(f"bad {axis} value {value!r}: {exc}") from None
    if n < 1:
        raise ConfigError(f"{axis} values must be positive, got {n}")
    if axis == "dq-sweep":
        return replace(base, touch=replace(base.touch, d_q=n))
    if axis == "sid-count-query":
        return replace(base, query_tokens=n)
    # sid-count-doc: index the first n document tokens of a head wide enough for all of them
    return replace(base, doc_tokens=n)


def run_ablation(spec: AblationSpec, base: ExperimentConfig | None = None) -> list[AblationRow]:
    """One run per (setting, seed), in that nesting order.

    The SID-count axes reuse a single trained touch head per seed and vary
    how many of its tokens are indexed or queried; for the document axis the
    head is built with enough slots for the largest value.
    """
    base = base if base is not None else ExperimentConfig.desk()
    if spec.axis == "sid-count-doc":
        try:
            widest = max(int(v) for v in spec.values)
        except ValueError:
            raise ConfigError(f"sid-count-doc values must be integers, got {list(spec.values)}") from None
        if widest > base.touch.n_doc:
            base = replace(base, touch=replace(base.touch, n_doc=widest))
    bench = ClusteredBenchmark(base.benchmark)
    cache = _HeadCache()
    rows = []
    for value in spec.values:
        cfg = _setting_config(base, spec.axis, str(value))
        for seed in spec.seeds:
            start = time.perf_counter()
            report = run_experiment(cfg, int(seed), bench=bench, cache=cache)
            elapsed = time.perf_counter() - start
            logger.info("%s=%s seed %d: %s", spec.axis, value, seed, report.recall_at_k)
            rows.append(AblationRow(spec.axis, str(value), int(seed), report, elapsed))
    return rows


def report_columns(ks: Sequence[int]) -> list[str]:
    return ["axis", "setting", "seed", *(f"recall@{k}" for k in ks), *(f"mrr@{k}" for k in ks), "avg_retrieved", "wall_time_s"]


def write_report(rows: Sequence[AblationRow], path: str | Path, ks: Sequence[int]) -> None:
    ks = sorted(ks)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(report_columns(ks))
        for row in rows:
            r = row.report
            writer.writerow(
                [row.axis, row.setting, row.seed]
                + [f"{r.recall_at_k[k]:.6f}" for k in ks]
                + [f"{r.mrr_at_k[k]:.6f}" for k in ks]
                + [f"{r.avg_retrieved:.3f}", f"{row.wall_time_s:.3f}"]
            )
