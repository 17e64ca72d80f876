"""scikit-learn style wrapper: fit on a corpus, embed or retrieve for queries."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataio import Corpus, QueryRecord
from .errors import ConfigError, DataError, ShapeError
from .evalkit import evaluate
from .model import ModelConfig, ModelParams, encode_query
from .training import TrainConfig, encode_corpus, predict, train


def check_queries(X, d_t=None, languages=None) -> list:
    """Validate a query collection: QueryRecords (or a Corpus) with 2-d finite token features."""
    if isinstance(X, Corpus):
        X = X.queries
    if isinstance(X, QueryRecord):
        X = [X]
    queries = list(X)
    if not queries:
        raise DataError("no queries given")
    for q in queries:
        if not isinstance(q, QueryRecord):
            raise TypeError(f"expected QueryRecord, got {type(q).__name__}")
        tokens = np.asarray(q.tokens)
        if tokens.ndim != 2 or tokens.shape[0] == 0:
            raise ShapeError(f"query {q.query_id}: tokens must be (l_q >= 1, d_t), got {tokens.shape}")
        if d_t is not None and tokens.shape[1] != d_t:
            raise ShapeError(f"query {q.query_id}: d_t {tokens.shape[1]} != model d_t {d_t}")
        if not np.isfinite(tokens).all():
            raise DataError(f"query {q.query_id}: non-finite token features")
        if languages is not None and q.language not in languages:
            raise ConfigError(f"query {q.query_id}: language {q.language!r} not in {tuple(languages)}")
    return queries


def check_corpus(X) -> Corpus:
    if not isinstance(X, Corpus):
        raise TypeError(f"expected a Corpus, got {type(X).__name__}")
    X.validate()
    return X


class MXMLRetriever(BaseEstimator):
    """Bilingual moment retriever.

    ``fit(corpus)`` trains on ``corpus.splits[train_split]`` and keeps the
    corpus as the retrieval index.  ``transform(queries)`` returns the
    concatenated (video, subtitle) query vectors; ``predict(queries)`` the
    top-``k`` moments per query; ``score(queries)`` R@1 at IoU 0.7.
    """

    def __init__(self, d=32, n_heads=4, share_encoders=True, inputs="video+sub", use_nc=True,
                 lr=1e-4, max_epochs=100, batch_size=128, warmup_epochs=5, weight_decay=0.01,
                 alpha=20.0, L_max=16, n_videos=100, patience=10, train_split="train",
                 val_split="val", k=1, seed=0):
        self.d = d
        self.n_heads = n_heads
        self.share_encoders = share_encoders
        self.inputs = inputs
        self.use_nc = use_nc
        self.lr = lr
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.alpha = alpha
        self.L_max = L_max
        self.n_videos = n_videos
        self.patience = patience
        self.train_split = train_split
        self.val_split = val_split
        self.k = k
        self.seed = seed

    def _configs(self, corpus: Corpus):
        l_max = max(v.l for v in corpus.videos.values())
        lq_max = max(q.tokens.shape[0] for q in corpus.queries)
        model = ModelConfig(d=self.d, d_v=corpus.d_v, d_t=corpus.d_t, l_max=l_max, lq_max=lq_max,
                            languages=tuple(corpus.languages), n_heads=self.n_heads,
                            share_encoders=self.share_encoders, inputs=self.inputs, seed=self.seed)
        tcfg = TrainConfig(lr=self.lr, max_epochs=self.max_epochs, batch_size=self.batch_size,
                           warmup_epochs=self.warmup_epochs, weight_decay=self.weight_decay,
                           alpha=self.alpha, L_max=self.L_max, n_videos=self.n_videos,
                           patience=self.patience, use_nc=self.use_nc, train_split=self.train_split,
                           val_split=self.val_split, seed=self.seed)
        return model, tcfg

    def fit(self, X, y=None):
        corpus = check_corpus(X)
        model_cfg, self.train_config_ = self._configs(corpus)
        result = train(ModelParams(model_cfg), corpus, self.train_config_)
        self.params_ = result.best_params
        self.history_ = result.history
        self.corpus_ = corpus
        self.context_ = encode_corpus(self.params_, corpus)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        c = self.params_.config
        queries = check_queries(X, c.d_t, c.languages)
        rows = []
        for q in queries:
            emb = encode_query(self.params_, q.tokens.astype(self.params_.dtype), q.language)
            rows.append(np.concatenate([emb.q_v.data, emb.q_s.data]))
        return np.stack(rows)

    def predict(self, X) -> list:
        check_is_fitted(self, "params_")
        c = self.params_.config
        queries = check_queries(X, c.d_t, c.languages)
        preds = predict(self.params_, self.corpus_, queries, self.k, self.alpha, self.L_max,
                        self.n_videos, ctx=self.context_)
        return [preds[q.query_id] for q in queries]

    def score(self, X, y=None) -> float:
        """Mean R@1 at IoU 0.7 over the given queries (all languages pooled)."""
        check_is_fitted(self, "params_")
        queries = check_queries(X, self.params_.config.d_t, self.params_.config.languages)
        preds = dict(zip([q.query_id for q in queries], self.predict(queries)))
        report = evaluate(preds, queries, ks=(1,), ious=(0.7,), breakdown=False)
        n = sum(report.counts[lang]["all"] for lang in report.cells)
        return sum(report.recall(lang, 1, 0.7) * report.counts[lang]["all"] for lang in report.cells) / n
