"""``unidex`` command line.

Exit codes: 0 success, 1 operational failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, ParseError, UnidexError, ValidationError
from .ingest import DocumentRecord, gather_inputs, load_corpus, load_embeddings, save_embeddings
from .matcher import MatchStrategy
from .quantizer import QuantizerConfig, encode_tokens, init_head, load_checkpoint, sids_for
from .trainer import LossConfig, TrainConfig, TrainingInstance, train, write_history_csv

logger = logging.getLogger("unidex")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ks or min(ks) <= 0:
        raise argparse.ArgumentTypeError("K values must be positive")
    return ks


def _csv_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _add_ingest_flags(p: argparse.ArgumentParser, corpus: bool = True) -> None:
    if corpus:
        p.add_argument("--corpus", required=True, help="corpus JSONL ({id, text} per line)")
    p.add_argument("--embeddings", help="UDXE file; ids found here override text hashing")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d-base", type=int, help="feature-hashing width (default 256, or the UDXE dim)")
    p.add_argument("--hash-seed", type=int, default=0)
    p.add_argument("--dim", type=int, help="token embedding dim (64 touch / 32 rank)")
    p.add_argument("--dq", type=int, default=19)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--ewgs-delta", type=float, default=1e-3)
    p.add_argument("--m-query", type=int, help="query tokens (3 touch / 4 rank)")
    p.add_argument("--n-doc", type=int, help="document tokens (8 touch / 4 rank)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unidex", description="Semantic-ID inverted indexing: train, index, search, evaluate.")
    parser.add_argument("--version", action="version", version=f"unidex {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a touch (quantizer) or rank head")
    p.add_argument("--data", required=True, help="training JSONL")
    p.add_argument("--mode", choices=["touch", "rank"], default="touch")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--lambda-match", type=float, default=1.0)
    p.add_argument("--lambda-reg", type=float, default=0.1)
    p.add_argument("--lambda-distill", type=float, default=1.0)
    p.add_argument("--match-strategy", choices=[s.value for s in MatchStrategy], default="max-max")
    p.add_argument("--no-in-batch-negatives", action="store_true")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path (UDXQ)")
    p.add_argument("--history", help="write the per-step loss history CSV here")
    _add_ingest_flags(p, corpus=False)
    _add_model_flags(p)

    p = sub.add_parser("build-index", help="encode a corpus with a touch head and write a UDXI index")
    _add_ingest_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-doc", type=int, help="index only the first N document tokens")

    p = sub.add_parser("index-stats", help="posting statistics, optionally with a query log")
    p.add_argument("--index", required=True)
    p.add_argument("--query-log", help='JSONL lines of {"sids": [...]} or {"id", "text"} (needs --checkpoint)')
    p.add_argument("--checkpoint", help="touch head used to encode text queries in the log")
    p.add_argument("--embeddings")

    def snapshot_flags(q):
        q.add_argument("--index", required=True)
        q.add_argument("--touch", required=True, help="touch checkpoint")
        q.add_argument("--rank", required=True, help="rank checkpoint")
        q.add_argument("--corpus", required=True, help="corpus used to compute document rank vectors")
        q.add_argument("--embeddings")
        q.add_argument("--max-candidates", type=int)

    p = sub.add_parser("search", help="run one query through retrieval and ranking")
    snapshot_flags(p)
    p.add_argument("--query", required=True)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--json", action="store_true", help="print the service's JSON response shape")
    p.add_argument("--server", help="send the query to a running service at this base URL instead")

    p = sub.add_parser("evaluate", help="Recall@K / MRR@K over a labelled test file")
    snapshot_flags(p)
    p.add_argument("--test", required=True)
    p.add_argument("--k", type=_ks, default=[10, 300])
    p.add_argument("--out", help="report CSV (default: stdout)")
    p.add_argument("--rankings", help="dump per-query ranked ids as JSONL")

    p = sub.add_parser("ablate", help="train+index+evaluate sweeps on the synthetic benchmark")
    p.add_argument("--axis", required=True, choices=["match-strategy", "dq-sweep", "sid-count-query", "sid-count-doc", "loss-removal"])
    p.add_argument("--values", type=_csv_list, required=True)
    p.add_argument("--seeds", type=_csv_list, default=["0"])
    p.add_argument("--steps", type=int, help="touch training steps (default 2000)")
    p.add_argument("--rank-steps", type=int, help="rank training steps (default 1000)")
    p.add_argument("--scale", type=float, default=1.0, help="shrink the benchmark (fraction of clusters)")
    p.add_argument("--k", type=_ks, default=[10, 300])
    p.add_argument("--out", required=True)

    p = sub.add_parser("serve", help="HTTP search service over a frozen snapshot")
    p.add_argument("--bind", help="HOST:PORT (env UNIDEX_BIND)")
    p.add_argument("--index")
    p.add_argument("--touch")
    p.add_argument("--rank")
    p.add_argument("--corpus")
    p.add_argument("--embeddings")
    p.add_argument("--top-k", type=int)
    p.add_argument("--max-concurrent", type=int)
    p.add_argument("--max-candidates", type=int)

    p = sub.add_parser("export-embeddings", help="write toy-encoder token embeddings as UDXE")
    _add_ingest_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--role", choices=["query", "document"], default="document")
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="write the synthetic clustered benchmark as JSONL + UDXE files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--clusters", type=int, default=50)
    p.add_argument("--subclusters", type=int, default=10)
    p.add_argument("--docs", type=int, default=5000)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--train", type=int, default=2000, help="number of training instances")
    p.add_argument("--seed", type=int, default=0)
    return parser


# ---------------------------------------------------------------------------


def _load_training(path, embeddings, d_base, hash_seed) -> list[TrainingInstance]:
    instances = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                q = obj["query"]
                docs = obj["docs"]
                labels = [int(d["label"]) for d in docs]
                teacher = [d.get("teacher_score") for d in docs]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed training record ({exc})", lineno) from None
            q_in = gather_inputs([DocumentRecord(q["id"], q.get("text", ""))], embeddings, d_base, hash_seed)[0]
            d_in = gather_inputs(
                [DocumentRecord(d["id"], d.get("text", "")) for d in docs], embeddings, d_base, hash_seed
            )
            ts = None if any(t is None for t in teacher) else np.array(teacher, dtype=np.float64)
            if ts is not None and (ts.min() < 0 or ts.max() > 1):
                raise ValidationError(f"line {lineno}: teacher scores must lie in [0, 1]")
            instances.append(TrainingInstance(q_in, d_in, labels, ts, q["id"], [d["id"] for d in docs]))
    return instances


def _d_base(args, embeddings) -> int:
    if embeddings:
        dims = {mv.vectors.shape for mv in embeddings.values()}
        token_shapes = {s for s in dims if s[0] == 1}
        if token_shapes:
            dim = next(iter(token_shapes))[1]
            if args.d_base is not None and args.d_base != dim:
                raise ConfigError(f"--d-base {args.d_base} disagrees with embedding dim {dim}")
            return dim
    return args.d_base if args.d_base is not None else 256


def cmd_train(args) -> int:
    embeddings = load_embeddings(args.embeddings) if args.embeddings else None
    rank = args.mode == "rank"
    config = QuantizerConfig(
        d=args.dim or (32 if rank else 64),
        d_q=args.dq,
        K=args.k,
        ewgs_delta=args.ewgs_delta,
        d_base=_d_base(args, embeddings),
        m_query=args.m_query or (4 if rank else 3),
        n_doc=args.n_doc or (4 if rank else 8),
        hash_seed=args.hash_seed,
        mode=args.mode,
    )
    loss = LossConfig(
        tau=args.tau,
        lambda_match=args.lambda_match,
        lambda_reg=args.lambda_reg,
        lambda_distill=args.lambda_distill,
        in_batch_negatives=not args.no_in_batch_negatives,
        strategy=args.match_strategy,
    )
    tcfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, warmup_steps=args.warmup, seed=args.seed)
    instances = _load_training(args.data, embeddings, config.d_base, config.hash_seed)
    if not instances:
        raise ValidationError(f"{args.data}: no training instances")
    head, history = train(instances, init_head(config, args.seed), loss, tcfg, checkpoint=args.out, log_every=100)
    if args.history:
        write_history_csv(history, args.history)
    last = history[-1]["total"] if history else float("nan")
    print(f"trained {args.mode} head for {len(history)} steps, final loss {last:.5f}; wrote {args.out}")
    return 0


def cmd_build_index(args) -> int:
    from .index import Fingerprint, build_index, save_index

    head = load_checkpoint(args.checkpoint)
    if head.config.mode != "touch":
        raise ConfigError("build-index needs a touch checkpoint")
    records = load_corpus(args.corpus)
    embeddings = load_embeddings(args.embeddings) if args.embeddings else None
    inputs = gather_inputs(records, embeddings, head.config.d_base, head.config.hash_seed)
    sids = sids_for(inputs, head, "document", args.n_doc) if records else []
    index = build_index([(r.id, s) for r, s in zip(records, sids)], Fingerprint.of(head))
    save_index(index, args.out)
    st = index.stats()
    print(f"indexed {st.num_docs} documents under {st.num_distinct_sids} SIDs ({st.total_postings} postings); wrote {args.out}")
    return 0


def _read_query_log(path, head, embeddings) -> list[list[int]]:
    log = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if "sids" in obj:
                log.append([int(s) for s in obj["sids"]])
                continue
            if "query" in obj:
                obj = obj["query"]
            if head is None:
                raise ConfigError(f"{path}:{lineno}: text queries need --checkpoint")
            rec = DocumentRecord(obj["id"], obj.get("text", ""))
            inp = gather_inputs([rec], embeddings, head.config.d_base, head.config.hash_seed)
            log.append([int(s) for s in sids_for(inp, head, "query")[0]])
    return log


def cmd_index_stats(args) -> int:
    from .index import load_index

    head = load_checkpoint(args.checkpoint) if args.checkpoint else None
    index = load_index(args.index, expected_checksum=head.checksum() if head else None)
    embeddings = load_embeddings(args.embeddings) if args.embeddings else None
    log = _read_query_log(args.query_log, head, embeddings) if args.query_log else None
    print(json.dumps(asdict(index.stats(log)), indent=2))
    return 0


def _engine(args):
    from .pipeline import load_engine

    return load_engine(args.index, args.touch, args.rank, args.corpus, args.embeddings, max_candidates=args.max_candidates)


def cmd_search(args) -> int:
    if args.top_k < 1:
        raise ConfigError("--top-k must be >= 1")
    if args.server:
        import httpx

        resp = httpx.post(args.server.rstrip("/") + "/v1/search", json={"query": args.query, "top_k": args.top_k}, timeout=60)
        resp.raise_for_status()
        body = resp.json()
    else:
        engine = _engine(args)
        start = time.perf_counter()
        outcome = engine.search(args.query, args.top_k)
        body = {
            "hits": [{"id": h.doc_id, "score": h.score} for h in outcome.hits],
            "touched": outcome.touched,
            "latency_ms": (time.perf_counter() - start) * 1000.0,
        }
    if args.json:
        print(json.dumps(body))
    else:
        print(f"{len(body['hits'])} hits ({body['touched']} candidates touched)")
        for rank, hit in enumerate(body["hits"], start=1):
            print(f"{rank:>4}  {hit['score']:.6f}  {hit['id']}")
    return 0


def _load_test(path, engine, embeddings):
    """Test queries as text, or as (touch, rank) inputs when the id has stored features."""
    touch_cfg, rank_cfg = engine.touch_head.config, engine.rank_head.config
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                q = obj["query"]
                rec = DocumentRecord(q["id"], q.get("text", ""))
                relevant = list(obj["relevant_ids"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"malformed test record ({exc})", lineno) from None
            if embeddings and rec.id in embeddings:
                touch_in = gather_inputs([rec], embeddings, touch_cfg.d_base, touch_cfg.hash_seed)[0]
                rank_in = gather_inputs([rec], embeddings, rank_cfg.d_base, rank_cfg.hash_seed)[0]
                out.append(((touch_in, rank_in), relevant))
            else:
                out.append((rec.text, relevant))
    return out


def cmd_evaluate(args) -> int:
    from .ablation import report_columns
    from .pipeline import evaluate

    start = time.perf_counter()
    engine = _engine(args)
    embeddings = load_embeddings(args.embeddings) if args.embeddings else None
    tests = _load_test(args.test, engine, embeddings)
    report = evaluate(tests, engine, args.k, keep_rankings=bool(args.rankings))
    ks = sorted(set(args.k))
    row = ["evaluate", Path(args.test).name, "", *(report.recall_at_k[k] for k in ks), *(report.mrr_at_k[k] for k in ks)]
    row += [report.avg_retrieved, time.perf_counter() - start]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(report_columns(ks))
        writer.writerow(row)
    finally:
        if args.out:
            out.close()
    if args.rankings:
        with open(args.rankings, "w", encoding="utf-8") as fh:
            for (query, relevant), ranked in zip(tests, report.rankings):
                fh.write(json.dumps({"ranked_ids": ranked, "relevant_ids": relevant}) + "\n")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import AblationSpec, ExperimentConfig, run_ablation, write_report

    try:
        seeds = [int(s) for s in args.seeds]
    except ValueError:
        raise ConfigError("--seeds must be integers") from None
    base = ExperimentConfig.desk(scale=args.scale)
    if args.steps is not None:
        base = base.replace_train(touch_steps=args.steps)
    if args.rank_steps is not None:
        base = base.replace_train(rank_steps=args.rank_steps)
    base = base.replace_ks(args.k)
    rows = run_ablation(AblationSpec(args.axis, args.values, seeds), base)
    write_report(rows, args.out, base.ks)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_serve(args) -> int:
    from .service.app import ServiceConfig, parse_bind, serve

    overrides = dict(
        index=args.index,
        touch_ckpt=args.touch,
        rank_ckpt=args.rank,
        corpus=args.corpus,
        embeddings=args.embeddings,
        top_k=args.top_k,
        max_concurrent=args.max_concurrent,
        max_candidates=args.max_candidates,
    )
    if args.bind:
        overrides["host"], overrides["port"] = parse_bind(args.bind)
    serve(ServiceConfig.from_env(**overrides))
    return 0


def cmd_export_embeddings(args) -> int:
    head = load_checkpoint(args.checkpoint)
    records = load_corpus(args.corpus)
    embeddings = load_embeddings(args.embeddings) if args.embeddings else None
    inputs = gather_inputs(records, embeddings, head.config.d_base, head.config.hash_seed)
    tokens = encode_tokens(inputs, head, args.role) if records else []
    save_embeddings({r.id: t for r, t in zip(records, tokens)}, args.out)
    print(f"wrote {len(records)} {args.role} embeddings to {args.out}")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import BenchmarkConfig, ClusteredBenchmark

    bench = ClusteredBenchmark(
        BenchmarkConfig(n_clusters=args.clusters, subclusters=args.subclusters, n_docs=args.docs, dim=args.dim, seed=args.seed)
    )
    paths = bench.write_fixture(args.out, n_train=args.train, seed=args.seed)
    for p in paths.values():
        print(p)
    return 0


COMMANDS = {
    "train": cmd_train,
    "build-index": cmd_build_index,
    "index-stats": cmd_index_stats,
    "search": cmd_search,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "serve": cmd_serve,
    "export-embeddings": cmd_export_embeddings,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        parser.print_help(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"unidex: config error: {exc}", file=sys.stderr)
        return 2
    except (UnidexError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"unidex: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
