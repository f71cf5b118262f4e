"""Seeded clustered-Gaussian benchmark used by the acceptance runs and the CLI fixture.

Topics form a two-level hierarchy: ``n_clusters`` cluster centres, each with
``subclusters`` sub-topic centres around it. Every sub-topic owns the same
number of documents and exactly one test query; a query's relevant set is
its sub-topic's documents. Training instances grade candidates 2 (same
sub-topic), 1 (same cluster) or 0 (elsewhere), with fresh query noise each
draw so test queries are never seen verbatim.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .ingest import DocumentRecord, save_corpus, save_embeddings
from .trainer import TrainingInstance


@dataclass(frozen=True)
class BenchmarkConfig:
    n_clusters: int = 50
    subclusters: int = 10
    n_docs: int = 5000
    dim: int = 32
    sub_spread: float = 1.0
    doc_noise: float = 0.5
    query_noise: float = 0.5
    positives: int = 2
    siblings: int = 2
    negatives: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_docs % (self.n_clusters * self.subclusters):
            raise ConfigError("n_docs must be a multiple of n_clusters * subclusters")

    @property
    def n_topics(self) -> int:
        return self.n_clusters * self.subclusters

    @property
    def docs_per_topic(self) -> int:
        return self.n_docs // self.n_topics


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


class ClusteredBenchmark:
    """Documents, test queries and a training-instance sampler."""

    def __init__(self, config: BenchmarkConfig = BenchmarkConfig()) -> None:
        self.config = c = config
        rng = np.random.default_rng(c.seed)
        scale = 1.0 / np.sqrt(c.dim)
        centres = rng.normal(size=(c.n_clusters, c.dim))
        centres = _unit(centres)
        self.topic_cluster = np.repeat(np.arange(c.n_clusters), c.subclusters)
        self.topic_centres = centres[self.topic_cluster] + c.sub_spread * scale * rng.normal(size=(c.n_topics, c.dim))
        self.doc_topic = np.repeat(np.arange(c.n_topics), c.docs_per_topic)
        self.doc_features = _unit(
            self.topic_centres[self.doc_topic] + c.doc_noise * scale * rng.normal(size=(c.n_docs, c.dim))
        )
        self.doc_ids = [f"d{i:05d}" for i in range(c.n_docs)]
        self.query_topic = np.arange(c.n_topics)
        self.query_features = self._query_features(self.query_topic, rng)
        self.query_ids = [f"q{i:04d}" for i in range(c.n_topics)]
        self._topic_docs = self.doc_topic.reshape(c.n_topics, c.docs_per_topic)

    def _query_features(self, topics: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        c = self.config
        noise = c.query_noise / np.sqrt(c.dim) * rng.normal(size=(len(topics), c.dim))
        return _unit(self.topic_centres[topics] + noise)

    @cached_property
    def relevant(self) -> list[list[str]]:
        per_topic = np.arange(self.config.n_docs).reshape(self.config.n_topics, -1)
        return [[self.doc_ids[i] for i in per_topic[t]] for t in self.query_topic]

    def test_queries(self) -> list[tuple[np.ndarray, list[str]]]:
        return list(zip(self.query_features, self.relevant))

    def sample_instance(self, rng: np.random.Generator) -> TrainingInstance:
        c = self.config
        topic = int(rng.integers(c.n_topics))
        cluster = self.topic_cluster[topic]
        per_topic = c.docs_per_topic
        pos = topic * per_topic + rng.choice(per_topic, size=c.positives, replace=False)
        sib_topics = cluster * c.subclusters + rng.choice(
            [s for s in range(c.subclusters) if cluster * c.subclusters + s != topic], size=c.siblings
        )
        sib = sib_topics * per_topic + rng.integers(per_topic, size=c.siblings)
        neg_topics = rng.integers(c.n_topics, size=c.negatives)
        neg_topics = np.where(self.topic_cluster[neg_topics] == cluster, (neg_topics + c.subclusters) % c.n_topics, neg_topics)
        neg = neg_topics * per_topic + rng.integers(per_topic, size=c.negatives)
        docs = np.concatenate([pos, sib, neg])
        labels = np.array([2] * c.positives + [1] * c.siblings + [0] * c.negatives)
        query = self._query_features(np.array([topic]), rng)[0]
        feats = self.doc_features[docs]
        teacher = (1.0 + feats @ query) / 2.0
        return TrainingInstance(
            query, feats, labels, teacher, query_id=f"t{topic}", doc_ids=[self.doc_ids[i] for i in docs]
        )

    def sampler(self, rng: np.random.Generator, batch_size: int) -> list[TrainingInstance]:
        return [self.sample_instance(rng) for _ in range(batch_size)]

    def write_fixture(self, out_dir: str | Path, n_train: int = 2000, seed: int = 0) -> dict[str, Path]:
        """Materialize the benchmark as corpus/train/test JSONL plus a UDXE feature file.

        Texts are empty; every document, training query and test query has its
        base feature stored under its id in ``features.udxe``.
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {name: out / name for name in ("corpus.jsonl", "features.udxe", "train.jsonl", "test.jsonl")}
        save_corpus([DocumentRecord(i) for i in self.doc_ids], paths["corpus.jsonl"])
        features = dict(zip(self.doc_ids, self.doc_features[:, None, :]))
        features.update(zip(self.query_ids, self.query_features[:, None, :]))
        rng = np.random.default_rng(seed)
        with open(paths["train.jsonl"], "w", encoding="utf-8") as fh:
            for k in range(n_train):
                inst = self.sample_instance(rng)
                qid = f"train{k:06d}"
                features[qid] = inst.query[None, :]
                docs = [
                    {"id": did, "text": "", "label": int(lab), "teacher_score": float(ts)}
                    for did, lab, ts in zip(inst.doc_ids, inst.labels, inst.teacher_scores)
                ]
                fh.write(json.dumps({"query": {"id": qid, "text": ""}, "docs": docs}) + "\n")
        with open(paths["test.jsonl"], "w", encoding="utf-8") as fh:
            for qid, rel in zip(self.query_ids, self.relevant):
                fh.write(json.dumps({"query": {"id": qid, "text": ""}, "relevant_ids": rel}) + "\n")
        save_embeddings(features, paths["features.udxe"])
        return paths
