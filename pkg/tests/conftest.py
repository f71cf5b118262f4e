import json
import socket
import threading
import time

import numpy as np
import pytest
import uvicorn

from unidex.cli import main
from unidex.quantizer import QuantizerConfig, init_head
from unidex.service.app import ServiceConfig, app_from_config
from unidex.trainer import TrainingInstance


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def touch_config():
    return QuantizerConfig(d=12, d_q=6, K=2, d_base=10, m_query=2, n_doc=3)


@pytest.fixture
def touch_head(touch_config):
    return init_head(touch_config, seed=7)


@pytest.fixture
def rank_head():
    return init_head(QuantizerConfig(d=8, d_q=1, d_base=10, m_query=2, n_doc=3, mode="rank"), seed=8)


def random_instance(rng, d_base, n_docs=4, teacher=False):
    labels = rng.permutation(np.arange(n_docs) % 3)
    return TrainingInstance(
        query=rng.normal(size=d_base),
        docs=rng.normal(size=(n_docs, d_base)),
        labels=labels,
        teacher_scores=rng.uniform(size=n_docs) if teacher else None,
    )


WORDS = "index query token vector cluster semantic sparse dense graph search rank learn".split()


def write_text_fixture(root, n_docs=60, n_train=24, seed=0):
    rng = np.random.default_rng(seed)
    docs = []
    with open(root / "corpus.jsonl", "w") as fh:
        for i in range(n_docs):
            text = " ".join(rng.choice(WORDS, 4))
            docs.append((f"doc{i:03d}", text))
            fh.write(json.dumps({"id": f"doc{i:03d}", "text": text}) + "\n")
    with open(root / "train.jsonl", "w") as fh:
        for k in range(n_train):
            picks = rng.choice(n_docs, 4, replace=False)
            query = docs[picks[0]][1].split()[0] + " " + docs[picks[0]][1].split()[1]
            rows = [
                {"id": docs[p][0], "text": docs[p][1], "label": int(lab), "teacher_score": float(ts)}
                for p, lab, ts in zip(picks, [2, 1, 0, 0], [0.9, 0.6, 0.2, 0.1])
            ]
            fh.write(json.dumps({"query": {"id": f"q{k}", "text": query}, "docs": rows}) + "\n")
    with open(root / "test.jsonl", "w") as fh:
        for k in range(5):
            fh.write(json.dumps({"query": {"id": f"t{k}", "text": docs[k][1]}, "relevant_ids": [docs[k][0]]}) + "\n")
    return root


@pytest.fixture(scope="module")
def text_snapshot(tmp_path_factory):
    root = write_text_fixture(tmp_path_factory.mktemp("text"))
    common = ["--data", str(root / "train.jsonl"), "--steps", "20", "--d-base", "64"]
    assert main(["train", *common, "--mode", "touch", "--dq", "8", "--out", str(root / "touch.udxq")]) == 0
    assert main(["train", *common, "--mode", "rank", "--out", str(root / "rank.udxq")]) == 0
    args = ["--corpus", str(root / "corpus.jsonl"), "--checkpoint", str(root / "touch.udxq")]
    assert main(["build-index", *args, "--out", str(root / "index.udxi")]) == 0
    return root


def snapshot_args(root):
    return [
        "--index", str(root / "index.udxi"),
        "--touch", str(root / "touch.udxq"),
        "--rank", str(root / "rank.udxq"),
        "--corpus", str(root / "corpus.jsonl"),
    ]


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def service_config(root, **kw):
    return ServiceConfig(
        port=free_port(),
        index=str(root / "index.udxi"),
        touch_ckpt=str(root / "touch.udxq"),
        rank_ckpt=str(root / "rank.udxq"),
        corpus=str(root / "corpus.jsonl"),
        **kw,
    )


@pytest.fixture(scope="module")
def live_service(text_snapshot):
    cfg = service_config(text_snapshot)
    server = uvicorn.Server(uvicorn.Config(app_from_config(cfg), host=cfg.host, port=cfg.port, log_level="warning"))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 20
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("service did not start")
        time.sleep(0.05)
    yield f"http://{cfg.host}:{cfg.port}", text_snapshot
    server.should_exit = True
    thread.join(timeout=10)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
