"""Losses, reverse-mode gradients and the optimization loop.

Touch mode trains the encoder slots plus the quantizer: similarities are
taken between reconstructions of the quantized tokens, and gradients cross
the rounding step with element-wise gradient scaling. Rank mode trains the
encoder slots only and scores with the late-interaction sum of maxima on the
raw tokens; its objective is the graded contrastive term plus score
distillation against teacher scores. Every other node (tanh, linear maps, sigmoid, cosine, max,
log-sum-exp) is differentiated exactly; max nodes send their gradient to the
first argmax.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, TrainingError, ValidationError
from .matcher import NORM_EPS, MatchStrategy
from .quantizer import QuantizerHead, ewgs_backward, round_half_up, save_checkpoint

logger = logging.getLogger(__name__)

LOSS_TERMS = ("infonce", "match", "reg", "distill")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.05
    lambda_match: float = 1.0
    lambda_reg: float = 0.1
    lambda_distill: float = 1.0
    in_batch_negatives: bool = True
    strategy: MatchStrategy = MatchStrategy.MAX_MAX

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        for name in ("lambda_match", "lambda_reg", "lambda_distill"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")
        object.__setattr__(self, "strategy", MatchStrategy(self.strategy))


@dataclass
class TrainingInstance:
    """One query with graded candidates.

    ``query`` is a base feature ``(d_base,)`` or token matrix ``(T, d)``;
    ``docs`` stacks the candidates the same way.
    """

    query: np.ndarray
    docs: np.ndarray
    labels: np.ndarray
    teacher_scores: np.ndarray | None = None
    query_id: str = ""
    doc_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.query = np.asarray(self.query, dtype=np.float64)
        self.docs = np.asarray(self.docs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or len(self.labels) < 1 or len(self.labels) != len(self.docs):
            raise ValidationError("labels must align with a nonempty docs list")
        if np.any(self.labels < 0):
            raise ValidationError("labels must be nonnegative")
        if self.docs.ndim != self.query.ndim + 1:
            raise ValidationError("query and docs must both be features or both token matrices")
        if self.teacher_scores is not None:
            t = np.asarray(self.teacher_scores, dtype=np.float64)
            if t.shape != self.labels.shape:
                raise ValidationError("teacher_scores must align with docs")
            self.teacher_scores = t


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 5e-3
    warmup_steps: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


# ---------------------------------------------------------------------------
# Scalar loss terms. Each ``_x`` variant also returns gradients.
# ---------------------------------------------------------------------------


def _infonce(sims, labels, cross, tau):
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    s = np.asarray(sims, dtype=np.float64)
    labels = np.asarray(labels)
    if s.shape != labels.shape:
        raise ValidationError("sims and labels must have equal length")
    c = np.zeros(0) if cross is None else np.asarray(cross, dtype=np.float64)
    n = len(s)
    z = np.concatenate([s, c]) / tau
    mask = np.zeros((n, n + len(c)), dtype=bool)
    mask[:, :n] = labels[:, None] > labels[None, :]
    mask[np.arange(n), np.arange(n)] = True
    # other queries' documents rank as grade 0 for this query
    mask[:, n:] = (labels > 0)[:, None]
    zm = np.where(mask, z[None, :], -np.inf)
    top = zm.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(zm - top), 0.0)
    denom = e.sum(axis=1)
    lse = top[:, 0] + np.log(denom)
    loss = float(np.mean(lse - z[:n]))
    p = e / denom[:, None]
    p[np.arange(n), np.arange(n)] -= 1.0
    dz = p.sum(axis=0) / n
    dsims = dz / tau
    return loss, dsims[:n], dsims[n:]


def infonce_loss(sims, labels, cross_query_sims=None, tau: float = 0.05) -> float:
    """Graded list-wise contrastive loss.

    Each document competes against the documents with a strictly lower label.
    Cross-query documents count as grade 0, so they are negatives for every
    document with a positive label. The per-document terms are averaged.
    """
    return _infonce(sims, labels, cross_query_sims, tau)[0]


def _matching(sims, labels):
    s = np.asarray(sims, dtype=np.float64)
    labels = np.asarray(labels)
    if len(s) == 0:
        raise ValidationError("matching loss needs at least one document")
    top = labels == labels.max()
    k = int(top.sum())
    return float(np.sum(1.0 - s[top]) / k), np.where(top, -1.0 / k, 0.0)


def matching_loss(sims, labels) -> float:
    """Mean of ``1 - sim`` over the top-grade documents."""
    return _matching(sims, labels)[0]


def _quant_reg(low):
    low = np.atleast_2d(np.asarray(low, dtype=np.float64))
    sig = expit(low)
    a = sig - 0.5
    gap = np.abs(a) - 0.5
    m = low.shape[0]
    loss = float(np.sum(gap * gap) / m)
    grad = 2.0 * gap * np.sign(a) * sig * (1.0 - sig) / m
    return loss, grad


def quant_reg_loss(low_vectors) -> float:
    """``(1/M) sum_i || |sigmoid(low_i) - 0.5| - 0.5 ||^2`` over M pre-quantization vectors."""
    return _quant_reg(low_vectors)[0]


def quant_reg_grad(low_vectors) -> np.ndarray:
    """Gradient of :func:`quant_reg_loss` with respect to the pre-quantization vectors."""
    return _quant_reg(low_vectors)[1]


def _distill(model_scores, teacher, m_rank):
    s = np.asarray(model_scores, dtype=np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    if s.shape != t.shape:
        raise ValidationError("model and teacher score lists differ in length")
    diff = s / m_rank - t
    return float(np.mean(diff * diff)), 2.0 * diff / (m_rank * len(s))


def distill_mse_loss(model_scores, teacher_scores, m_rank: int) -> float:
    """MSE between rank scores rescaled by the token count and teacher scores.

    Returns 0 when no teacher scores are supplied.
    """
    if teacher_scores is None:
        return 0.0
    return _distill(model_scores, teacher_scores, m_rank)[0]


# ---------------------------------------------------------------------------
# Batched forward / backward through encoder -> quantizer -> matcher -> losses
# ---------------------------------------------------------------------------


def _normalize(x):
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    live = norm >= NORM_EPS
    return np.where(live, x / np.where(live, norm, 1.0), 0.0), norm, live


def _encode(head, inputs, count, bypass):
    """Forward one tower; returns the matching vectors and a cache for backward."""
    cfg = head.config
    cache = {"inputs": inputs, "count": count}
    if inputs.ndim == 2:
        h = np.tanh(np.einsum("tdk,nk->ntd", head.W_enc[:count], inputs))
    else:
        h = inputs
    cache["h"] = h
    if cfg.mode == "rank":
        return h, cache
    low = h @ head.W_down.T + head.b_down
    sig = expit(low)
    p = (cfg.K - 1) * sig
    codes = p if bypass else np.clip(round_half_up(p), 0, cfg.K - 1).astype(np.float64)
    r = codes @ head.W_up.T + head.b_up
    cache.update(low=low, sig=sig, p=p, codes=codes)
    return r, cache


def _encode_backward(head, cache, dvec, dlow_extra, grads, bypass):
    cfg = head.config
    h = cache["h"]
    if cfg.mode == "rank":
        dh = dvec
    else:
        codes = cache["codes"]
        grads["W_up"] += np.einsum("ntd,ntq->dq", dvec, codes)
        grads["b_up"] += dvec.sum(axis=(0, 1))
        dcodes = dvec @ head.W_up
        dp = dcodes if bypass else ewgs_backward(dcodes, cache["p"], codes, cfg.ewgs_delta)
        sig = cache["sig"]
        dlow = dp * (cfg.K - 1) * sig * (1.0 - sig) + dlow_extra
        grads["W_down"] += np.einsum("ntq,ntd->qd", dlow, h)
        grads["b_down"] += dlow.sum(axis=(0, 1))
        dh = dlow @ head.W_down
    inputs = cache["inputs"]
    if inputs.ndim == 2:
        dpre = dh * (1.0 - h * h)
        grads["W_enc"][: cache["count"]] += np.einsum("ntd,nk->tdk", dpre, inputs)


def _aggregate(cos, strategy):
    """Reduce ``(B, J, M, N)`` cosines to ``(B, J)`` sims plus the argmax routing."""
    B, J, M, N = cos.shape
    if strategy is MatchStrategy.MAX_MAX:
        flat = cos.reshape(B, J, M * N)
        idx = flat.argmax(axis=-1)
        return np.take_along_axis(flat, idx[..., None], -1)[..., 0], idx
    idx = cos.argmax(axis=-1)
    best = np.take_along_axis(cos, idx[..., None], -1)[..., 0]
    sims = best.sum(axis=-1)
    if strategy is MatchStrategy.MAX_MEAN:
        sims = sims / M
    return sims, idx


def _aggregate_backward(dsims, idx, shape, strategy):
    B, J, M, N = shape
    dcos = np.zeros(shape)
    if strategy is MatchStrategy.MAX_MAX:
        flat = dcos.reshape(B, J, M * N)
        np.put_along_axis(flat, idx[..., None], dsims[..., None], -1)
        return dcos
    scale = 1.0 / M if strategy is MatchStrategy.MAX_MEAN else 1.0
    np.put_along_axis(dcos, idx[..., None], np.broadcast_to((dsims * scale)[..., None, None], (B, J, M, 1)), -1)
    return dcos


def batch_loss(
    batch: Sequence[TrainingInstance],
    head: QuantizerHead,
    config: LossConfig,
    *,
    bypass: bool = False,
    with_grad: bool = True,
):
    """Mean loss over ``batch``; returns ``(loss, breakdown, grads or None)``.

    ``bypass=True`` replaces rounding by the identity on ``(K-1) * sigmoid``,
    which makes the whole graph smooth (used for finite-difference checks).
    """
    cfg = head.config
    rank = cfg.mode == "rank"
    strategy = MatchStrategy.MAX_SUM if rank else config.strategy
    B = len(batch)
    if B == 0:
        raise ValidationError("empty batch")
    queries = np.stack([inst.query for inst in batch])
    docs = np.concatenate([inst.docs for inst in batch])
    sizes = [len(inst.labels) for inst in batch]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    vq, cq = _encode(head, queries, cfg.m_query, bypass)
    vd, cd = _encode(head, docs, cfg.n_doc, bypass)
    uq, nq, lq = _normalize(vq)
    ud, nd, ld = _normalize(vd)
    cos = np.einsum("amd,jnd->ajmn", uq, ud)
    sims, idx = _aggregate(cos, strategy)

    top_idx = [offsets[a] + np.flatnonzero(inst.labels == inst.labels.max()) for a, inst in enumerate(batch)]
    dsims = np.zeros_like(sims)
    dlow_q = np.zeros_like(cq["low"]) if not rank else 0.0
    dlow_d = np.zeros_like(cd["low"]) if not rank else 0.0
    parts = {t: 0.0 for t in LOSS_TERMS}
    for a, inst in enumerate(batch):
        own = slice(offsets[a], offsets[a + 1])
        cross = (
            np.concatenate([top_idx[b] for b in range(B) if b != a]) if config.in_batch_negatives and B > 1 else None
        )
        l_nce, g_own, g_cross = _infonce(sims[a, own], inst.labels, None if cross is None else sims[a, cross], config.tau)
        dsims[a, own] += g_own / B
        if cross is not None:
            np.add.at(dsims[a], cross, g_cross / B)
        parts["infonce"] += l_nce / B
        if not rank and config.lambda_match > 0:
            l_m, g_m = _matching(sims[a, own], inst.labels)
            dsims[a, own] += config.lambda_match * g_m / B
            parts["match"] += l_m / B
        if not rank and config.lambda_reg > 0:
            # averaged over the query and each of its candidates
            weight = 1.0 / (1 + sizes[a])
            l_q, g_q = _quant_reg(cq["low"][a])
            dlow_q[a] += config.lambda_reg * weight * g_q / B
            l_r = l_q
            for j in range(offsets[a], offsets[a + 1]):
                l_d, g_d = _quant_reg(cd["low"][j])
                dlow_d[j] += config.lambda_reg * weight * g_d / B
                l_r += l_d
            parts["reg"] += weight * l_r / B
        if rank and config.lambda_distill > 0 and inst.teacher_scores is not None:
            l_d, g_d = _distill(sims[a, own], inst.teacher_scores, cfg.m_query)
            dsims[a, own] += config.lambda_distill * g_d / B
            parts["distill"] += l_d / B
    total = parts["infonce"] + config.lambda_match * parts["match"] + config.lambda_reg * parts["reg"]
    total += config.lambda_distill * parts["distill"]
    if not with_grad:
        return total, parts, None

    grads = {name: np.zeros_like(p) for name, p in head.params().items()}
    dcos = _aggregate_backward(dsims, idx, cos.shape, strategy)
    duq = np.einsum("ajmn,jnd->amd", dcos, ud)
    dud = np.einsum("ajmn,amd->jnd", dcos, uq)
    dvq = np.where(lq, (duq - (duq * uq).sum(-1, keepdims=True) * uq) / np.where(lq, nq, 1.0), 0.0)
    dvd = np.where(ld, (dud - (dud * ud).sum(-1, keepdims=True) * ud) / np.where(ld, nd, 1.0), 0.0)
    _encode_backward(head, cq, dvq, dlow_q, grads, bypass)
    _encode_backward(head, cd, dvd, dlow_d, grads, bypass)
    return total, parts, grads


def total_loss(instance: TrainingInstance, head: QuantizerHead, config: LossConfig, *, bypass: bool = False):
    """Loss of a single instance: ``(total, breakdown)``."""
    total, parts, _ = batch_loss([instance], head, config, bypass=bypass, with_grad=False)
    return total, parts


def backward(instance: TrainingInstance, head: QuantizerHead, config: LossConfig, *, bypass: bool = False):
    """Gradients of :func:`total_loss`, keyed like ``head.params()``."""
    return batch_loss([instance], head, config, bypass=bypass)[2]


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up, then cosine decay reaching zero at ``cfg.steps``."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(cfg.steps - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig) -> None:
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        lr = learning_rate(self.step, cfg)
        self.step += 1
        c1 = 1.0 - cfg.beta1**self.step
        c2 = 1.0 - cfg.beta2**self.step
        for name, p in params.items():
            g = grads[name]
            self.m[name] = cfg.beta1 * self.m[name] + (1 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1 - cfg.beta2) * g * g
            p -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + cfg.eps)


InstanceSource = Sequence[TrainingInstance] | Iterable[TrainingInstance] | Callable[[np.random.Generator, int], list]


def _batches(source, cfg: TrainConfig, rng: np.random.Generator) -> Iterator[list[TrainingInstance]]:
    if callable(source):
        while True:
            yield source(rng, cfg.batch_size)
    if isinstance(source, Sequence):
        if len(source) == 0:
            raise ValidationError("training needs at least one instance")
        while True:
            order = rng.permutation(len(source))
            for start in range(0, len(order), cfg.batch_size):
                yield [source[i] for i in order[start : start + cfg.batch_size]]
    it = iter(source)
    while True:
        batch = [inst for _, inst in zip(range(cfg.batch_size), it)]
        if not batch:
            raise ValidationError("instance stream exhausted")
        yield batch


def train(
    source: InstanceSource,
    head: QuantizerHead,
    loss_config: LossConfig,
    train_config: TrainConfig,
    *,
    checkpoint: str | Path | None = None,
    log_every: int = 0,
) -> tuple[QuantizerHead, list[dict]]:
    """Adam over minibatches drawn from ``source``.

    ``source`` is a list of instances (reshuffled every epoch), an iterator of
    instances, or a callable ``(rng, batch_size) -> list`` sampler. The input
    head is not modified. The returned head is rounded to float32 so it equals
    what the checkpoint stores.
    """
    head = head.copy()
    history: list[dict] = []
    if train_config.steps <= 0:
        return head, history
    rng = np.random.default_rng(train_config.seed)
    params = head.params()
    opt = Adam(params, train_config)
    batches = _batches(source, train_config, rng)
    for step in range(train_config.steps):
        batch = next(batches)
        total, parts, grads = batch_loss(batch, head, loss_config)
        bad = [k for k, v in parts.items() if not math.isfinite(v)]
        if bad or not math.isfinite(total):
            raise TrainingError(f"non-finite loss at step {step} (terms: {', '.join(bad) or 'total'})")
        history.append({"step": step, "total": total, **parts})
        if log_every and step % log_every == 0:
            logger.info("step %d loss %.5f %s", step, total, {k: round(v, 5) for k, v in parts.items()})
        opt.update(params, grads)
    head = head.round_to_f32()
    if checkpoint is not None:
        save_checkpoint(head, checkpoint)
    return head, history


def write_history_csv(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "total", *LOSS_TERMS])
        for row in history:
            writer.writerow([row["step"], repr(row["total"]), *(repr(row[t]) for t in LOSS_TERMS)])
