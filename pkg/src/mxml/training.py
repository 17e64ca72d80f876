"""Optimisation loop, corpus encoding and split-level evaluation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numeric as nm
from .dataio import Corpus, collate, make_batches
from .errors import ConfigError, NumericalError
from .evalkit import EvalReport, early_stop_metric, evaluate
from .model import EncodedContext, ModelConfig, ModelParams, encode_query, encode_video_context
from .objectives import LossSettings, total_loss
from .retrieval import ALPHA, DEFAULT_L_MAX, DEFAULT_N_VIDEOS, MomentRetriever, retrieve_many

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_epochs: float = 5.0
    max_epochs: int = 100
    batch_size: int = 128
    alpha: float = ALPHA
    margin_nc: float = 0.2
    margin_vr: float = 0.1
    use_nc: bool = True
    w_vr: float = 1.0
    w_moment: float = 1.0
    w_nc: float = 1.0
    patience: int = 10
    eval_every: int = 1
    L_max: int = DEFAULT_L_MAX
    n_videos: int = DEFAULT_N_VIDEOS
    frozen: tuple = ()
    train_split: str = "train"
    val_split: str = "val"
    seed: int = 0

    def __post_init__(self):
        self.frozen = tuple(self.frozen)
        for name in ("lr", "beta1", "beta2", "max_epochs", "batch_size", "alpha", "eval_every", "L_max",
                     "n_videos", "patience"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ConfigError("weight_decay and warmup_epochs must be non-negative")
        if self.warmup_epochs > self.max_epochs:
            raise ConfigError("warmup_epochs must not exceed max_epochs")

    def loss_settings(self):
        return LossSettings(self.margin_nc, self.margin_vr, self.w_vr, self.w_moment, self.w_nc, self.use_nc)

    def to_dict(self):
        d = asdict(self)
        d["frozen"] = list(self.frozen)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def lr_at(progress: float, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr`` over ``warmup_epochs`` (fractional epochs), then constant."""
    if cfg.warmup_epochs <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, progress / cfg.warmup_epochs)


class AdamW:
    """Adam with decoupled weight decay. Frozen names are skipped entirely."""

    def __init__(self, named_params, cfg: TrainConfig):
        self.cfg = cfg
        self.names = [n for n, _ in named_params
                      if not any(n == f or n.startswith(f + ".") for f in cfg.frozen)]
        self.params = dict(named_params)
        self.m = {n: np.zeros_like(self.params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(self.params[n].data) for n in self.names}
        self.t = 0

    def trainable(self):
        return [self.params[n] for n in self.names]

    def step(self, grads, lr):
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for n, g in zip(self.names, grads):
            p = self.params[n]
            self.m[n] = c.beta1 * self.m[n] + (1 - c.beta1) * g
            self.v[n] = c.beta2 * self.v[n] + (1 - c.beta2) * g * g
            update = (self.m[n] / bc1) / (np.sqrt(self.v[n] / bc2) + c.adam_eps)
            p.data = (p.data * (1 - lr * c.weight_decay) - lr * update).astype(p.dtype)


# encoding helpers --------------------------------------------------------------------

def encode_corpus(params: ModelParams, corpus: Corpus, video_ids=None, chunk=64) -> EncodedContext:
    """Encode every video (or ``video_ids``) into one padded batched context."""
    ids = list(video_ids if video_ids is not None else corpus.videos)
    langs = params.config.languages
    L = max(corpus.videos[v].l for v in ids)
    parts = []
    for s in range(0, len(ids), chunk):
        vids = [corpus.videos[v] for v in ids[s:s + chunk]]
        video = np.zeros((len(vids), L, corpus.d_v), dtype=params.dtype)
        subs = {lang: np.zeros((len(vids), L, corpus.d_t), dtype=params.dtype) for lang in langs}
        mask = np.zeros((len(vids), L), dtype=bool)
        for i, v in enumerate(vids):
            video[i, :v.l] = v.video
            for lang in langs:
                subs[lang][i, :v.l] = v.subs[lang]
            mask[i, :v.l] = True
        parts.append(encode_video_context(params, video, subs, mask, [v.video_id for v in vids]))
    if len(parts) == 1:
        return parts[0]
    cat = lambda xs: None if xs[0] is None else nm.Tensor(np.concatenate([x.data for x in xs]))
    return EncodedContext(cat([p.H_v_vr for p in parts]), cat([p.H_v_mr for p in parts]),
                          {l: cat([p.H_s_vr[l] for p in parts]) for l in parts[0].H_s_vr},
                          {l: cat([p.H_s_mr[l] for p in parts]) for l in parts[0].H_s_mr},
                          np.concatenate([p.mask for p in parts]), ids)


def encode_queries(params: ModelParams, queries):
    """[(query_id, ModularQueryEmbedding)] in input order."""
    out = []
    for q in queries:
        emb = encode_query(params, q.tokens.astype(params.dtype), q.language)
        out.append((q.query_id, emb))
    return out


def predict(params: ModelParams, corpus: Corpus, queries, k=1, alpha=ALPHA, L_max=DEFAULT_L_MAX,
            n_videos=DEFAULT_N_VIDEOS, n_jobs=1, nms_iou=None, ctx=None):
    """query_id -> RankedList over the full corpus."""
    ctx = ctx if ctx is not None else encode_corpus(params, corpus)
    retriever = MomentRetriever(params, ctx, alpha, L_max, n_videos)
    return dict(retrieve_many(retriever, encode_queries(params, queries), k, n_jobs, nms_iou))


def evaluate_split(params, corpus, split, cfg: TrainConfig, ks=(1,), ious=(0.5, 0.7)) -> EvalReport:
    ids = set(corpus.splits[split])
    queries = [q for q in corpus.queries if q.query_id in ids and q.language in params.config.languages]
    preds = predict(params, corpus, queries, max(ks), cfg.alpha, cfg.L_max, cfg.n_videos)
    return evaluate(preds, queries, ks, ious, breakdown=False)


def paired_cosine(params: ModelParams, corpus: Corpus, split="train") -> float:
    """Mean cosine between translation-paired query vectors (both modalities)."""
    a, b = params.config.languages[:2]
    sims = []
    for recs in corpus.pairs(split).values():
        ea, eb = encode_query(params, recs[a].tokens, a), encode_query(params, recs[b].tokens, b)
        for m in ("v", "s"):
            x, y = ea.by_modality(m).data, eb.by_modality(m).data
            sims.append(float(x @ y / (np.linalg.norm(x) * np.linalg.norm(y) + 1e-12)))
    return float(np.mean(sims))


# training loop ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = -math.inf


def _copy_params(params: ModelParams) -> ModelParams:
    out = ModelParams(params.config, init=False)
    for n, t in params.params.items():
        out.params[n] = nm.Tensor(t.data.copy(), requires_grad=True, name=n)
        out.groups[n] = params.groups[n]
    return out


def train(params: ModelParams, corpus: Corpus, cfg: TrainConfig, log_fn=None,
          eval_split=None) -> TrainResult:
    """Train in place. ``log_fn`` receives one dict per epoch (machine-readable lines).

    Early stopping tracks the summed R@1 (IoU 0.7) over the first two languages
    on ``eval_split`` (default ``cfg.val_split``); the best parameters are kept.
    """
    langs = params.config.languages
    if corpus.d_v != params.config.d_v or corpus.d_t != params.config.d_t:
        raise ConfigError(f"corpus dims (d_v={corpus.d_v}, d_t={corpus.d_t}) do not match model "
                          f"(d_v={params.config.d_v}, d_t={params.config.d_t})")
    pairs = corpus.pairs(cfg.train_split)
    if not pairs:
        raise ConfigError(f"split {cfg.train_split!r} has no queries")
    eval_split = eval_split or cfg.val_split
    can_eval = bool(corpus.splits.partitions.get(eval_split))
    opt = AdamW(params.named_parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    settings = cfg.loss_settings()
    result = TrainResult(params, _copy_params(params))
    stale = 0
    for epoch in range(cfg.max_epochs):
        batches = make_batches(pairs, cfg.batch_size, cfg.seed, epoch)
        sums = {}
        for bi, pair_ids in enumerate(batches):
            batch = collate(corpus, pairs, pair_ids, langs, params.dtype)
            with nm.GradTape() as tape:
                losses = total_loss(params, batch, rng, settings)
            parts = losses.as_floats()
            bad = [k for k, v in parts.items() if not math.isfinite(v)]
            if bad:
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {bi}: {bad}")
            grads = tape.gradient(losses.total, opt.trainable())
            opt.step(grads, lr_at(epoch + (bi + 1) / len(batches), cfg))
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(pair_ids)
        n = len(pairs)
        record = {"epoch": epoch, "lr": lr_at(epoch + 1, cfg), **{k: v / n for k, v in sums.items()}}
        if can_eval and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.max_epochs):
            report = evaluate_split(params, corpus, eval_split, cfg)
            for lang in langs:
                record[f"R@1/0.7.{lang}"] = report.recall(lang, 1, 0.7)
                record[f"R@1/0.5.{lang}"] = report.recall(lang, 1, 0.5)
            metric = (early_stop_metric(report, report) if set(langs[:2]) == {"en", "zh"}
                      else sum(report.recall(lang, 1, 0.7) for lang in langs[:2]))
            record["early_stop_metric"] = metric
            if metric > result.best_metric:
                result.best_metric, result.best_epoch = metric, epoch
                result.best_params = _copy_params(params)
                stale = 0
            else:
                stale += cfg.eval_every
        result.history.append(record)
        if log_fn is not None:
            log_fn(record)
        log.debug(json.dumps(record))
        if can_eval and stale >= cfg.patience:
            break
    if result.best_epoch < 0:
        result.best_params = _copy_params(params)
    return result
