"""Video-level scoring, ConvSE span distributions and corpus moment ranking."""
from __future__ import annotations

import heapq
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numeric as nm
from .errors import ConfigError, DataError, FormatError, ShapeError
from .model import EncodedContext, ModelParams, ModularQueryEmbedding
from .numeric import Tensor

ALPHA = 20.0
DEFAULT_L_MAX = 16
DEFAULT_N_VIDEOS = 100


@dataclass(frozen=True, order=True)
class MomentPrediction:
    video_id: str
    t_st: int
    t_ed: int
    score: float = field(compare=False)

    def seconds(self, clip_seconds=1.5):
        return self.t_st * clip_seconds, (self.t_ed + 1) * clip_seconds

    def sort_key(self):
        return (-self.score, self.video_id, self.t_st, self.t_ed)


@dataclass
class RankedList:
    items: list
    k: int

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


# differentiable scoring ---------------------------------------------------------

def vr_score_matrix(ctx: EncodedContext, q: ModularQueryEmbedding, lang, modalities=("v", "s")) -> Tensor:
    """s^vr for every (query, video) pair: (Q, V).

    Half-sum (mean over modalities) of the max over clips of cosine(H_vr[t], q).
    """
    total = None
    for m in modalities:
        H = nm.l2_normalize(ctx.vr(m, lang))                    # (V, l, d)
        qm = q.by_modality(m)
        qm = nm.l2_normalize(nm.reshape(qm, (1, -1)) if qm.ndim == 1 else qm)  # (Q, d)
        sims = nm.matmul(H, nm.swapaxes(qm, 0, 1))              # (V, l, Q)
        sims = nm.where(ctx.mask[:, :, None], sims, -np.inf)
        best = nm.swapaxes(nm.tmax(sims, axis=1), 0, 1)         # (Q, V)
        total = best if total is None else nm.add(total, best)
    return nm.mul(total, 1.0 / len(modalities))


def video_retrieval_score(ctx: EncodedContext, q: ModularQueryEmbedding, lang=None,
                          modalities=("v", "s")):
    """Score a single-video context against a single query; a python float."""
    lang = lang or q.lang
    modalities = tuple(m for m in modalities
                       if (m == "v" and ctx.H_v_vr is not None) or (m == "s" and lang in ctx.H_s_vr))
    s = vr_score_matrix(ctx, q, lang, modalities)
    return float(s.data[0, 0])


def query_clip_similarity(ctx: EncodedContext, q: ModularQueryEmbedding, lang=None,
                          modalities=("v", "s")) -> Tensor:
    """S^{q,c}: mean over modalities of H_mr @ q (unnormalised). (V, l) for paired rows.

    With a batched query, row i of the query is matched with video i of ``ctx``.
    """
    lang = lang or q.lang
    total = None
    for m in modalities:
        H = ctx.mr(m, lang)                                      # (V, l, d)
        qm = q.by_modality(m)
        qm = nm.reshape(qm, (1, -1, 1)) if qm.ndim == 1 else nm.reshape(qm, (qm.shape[0], -1, 1))
        s = nm.reshape(nm.matmul(H, qm), H.shape[:2])
        total = s if total is None else nm.add(total, s)
    return nm.mul(total, 1.0 / len(modalities))


def convse_logits(S: Tensor, mask, k_st: Tensor, k_ed: Tensor):
    """Start/end logits from the similarity sequence; padded clips zeroed first."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), S.shape)
    S = nm.where(mask, S, 0.0)
    return nm.conv1d(S, k_st), nm.conv1d(S, k_ed)


def convse(S, k_st: Tensor, k_ed: Tensor, mask=None):
    """(P_st, P_ed): softmax over valid clips of the convolved similarity."""
    S = nm.as_tensor(S)
    if mask is None:
        mask = np.ones(S.shape, dtype=bool)
    if S.shape[-1] < 1:
        raise ShapeError("convse needs at least one clip")
    st, ed = convse_logits(S, mask, k_st, k_ed)
    return nm.softmax(st, axis=-1, mask=mask), nm.softmax(ed, axis=-1, mask=mask)


def moment_score(P_st, P_ed, t_st: int, t_ed: int) -> float:
    if t_st > t_ed:
        raise ValueError(f"moment_score requires t_st <= t_ed, got {t_st} > {t_ed}")
    P_st = P_st.data if isinstance(P_st, Tensor) else np.asarray(P_st)
    P_ed = P_ed.data if isinstance(P_ed, Tensor) else np.asarray(P_ed)
    return float(P_st[t_st]) * float(P_ed[t_ed])


def vcmr_score(s_mr, s_vr: float, alpha=ALPHA):
    """s^mr * exp(alpha * s^vr); ``s_mr`` may be an array of moments of one video."""
    return s_mr * math.exp(alpha * float(s_vr))


def span_matrix(P_st: np.ndarray, P_ed: np.ndarray, L_max=DEFAULT_L_MAX) -> np.ndarray:
    """s^mr for all pairs; invalid pairs (t_ed < t_st or too long) are -inf."""
    l = P_st.shape[-1]
    prod = P_st[:, None] * P_ed[None, :]
    st, ed = np.indices((l, l))
    valid = (ed >= st) & (ed - st < L_max)
    return np.where(valid, prod, -np.inf)


# inference engine ----------------------------------------------------------------

class MomentRetriever:
    """Scores a query against an encoded corpus.

    ``corpus_ctx`` is a single batched :class:`EncodedContext` for the whole
    corpus (see :func:`encode_corpus`).
    """

    def __init__(self, params: ModelParams, corpus_ctx: EncodedContext,
                 alpha=ALPHA, L_max=DEFAULT_L_MAX, n_videos=DEFAULT_N_VIDEOS):
        if not corpus_ctx.video_ids:
            raise DataError("retrieval corpus is empty")
        self.params = params
        self.ctx = corpus_ctx
        self.alpha = alpha
        self.L_max = L_max
        self.n_videos = n_videos
        self.modalities = params.config.modalities

    def video_scores(self, q: ModularQueryEmbedding) -> np.ndarray:
        return vr_score_matrix(self.ctx, q, q.lang, self.modalities).data

    def span_distributions(self, q: ModularQueryEmbedding, video_idx):
        """(P_st, P_ed) arrays of shape (len(video_idx), l_pad) for one query."""
        sub = self.ctx.select(np.asarray(video_idx))
        n = len(video_idx)
        qv = Tensor(np.broadcast_to(q.q_v.data.reshape(1, -1), (n, q.q_v.shape[-1])))
        qs = Tensor(np.broadcast_to(q.q_s.data.reshape(1, -1), (n, q.q_s.shape[-1])))
        qb = ModularQueryEmbedding(qv, qs, q.lang)
        S = query_clip_similarity(sub, qb, q.lang, self.modalities)
        k_st, k_ed = self.params.convse_kernels(q.lang)
        P_st, P_ed = convse(S, k_st, k_ed, sub.mask)
        return P_st.data.astype(np.float64), P_ed.data.astype(np.float64), sub.mask

    def candidates(self, q: ModularQueryEmbedding, s_vr=None, top_videos=None):
        """Per-video candidate arrays ``(video_id, st, ed, score)`` after video pruning."""
        if s_vr is None:
            s_vr = self.video_scores(q).reshape(-1)
        ids = self.ctx.video_ids
        n = min(self.n_videos if top_videos is None else top_videos, len(ids))
        order = sorted(range(len(ids)), key=lambda i: (-s_vr[i], ids[i]))[:n]
        P_st, P_ed, mask = self.span_distributions(q, order)
        out = []
        for row, vi in enumerate(order):
            l = int(mask[row].sum())
            smr = span_matrix(P_st[row, :l], P_ed[row, :l], self.L_max)
            st, ed = np.nonzero(np.isfinite(smr))
            score = vcmr_score(smr[st, ed], float(s_vr[vi]), self.alpha)
            out.append((ids[vi], st, ed, score))
        return out

    def retrieve(self, q: ModularQueryEmbedding, k=1, nms_iou=None) -> RankedList:
        if k < 1:
            raise ConfigError("k must be >= 1")
        per_video = []
        for vid, st, ed, score in self.candidates(q):
            # Per-video exact top-k by (-score, st, ed); video id is constant here.
            take = np.lexsort((ed, st, -score))
            if nms_iou is None:
                take = take[:k]
            per_video.append([MomentPrediction(vid, int(st[i]), int(ed[i]), float(score[i])) for i in take])
        if nms_iou is None:
            best = heapq.nsmallest(k, (p for group in per_video for p in group), key=MomentPrediction.sort_key)
        else:
            ranked = sorted((p for group in per_video for p in group), key=MomentPrediction.sort_key)
            best = nms(ranked, nms_iou, k)
        return RankedList(best, k)


def nms(ranked, iou_threshold, k):
    """Greedy non-maximum suppression within each video on an already ranked list."""
    kept = []
    for p in ranked:
        if len(kept) >= k:
            break
        if all(o.video_id != p.video_id or _clip_iou(o, p) < iou_threshold for o in kept):
            kept.append(p)
    return kept


def _clip_iou(a, b):
    inter = max(0, min(a.t_ed, b.t_ed) - max(a.t_st, b.t_st) + 1)
    union = (a.t_ed - a.t_st + 1) + (b.t_ed - b.t_st + 1) - inter
    return inter / union


def retrieve(query: ModularQueryEmbedding, corpus, params: ModelParams, k=1,
             n_videos=DEFAULT_N_VIDEOS, L_max=DEFAULT_L_MAX, alpha=ALPHA) -> RankedList:
    """Top-k moments for ``query`` over ``corpus`` (an EncodedContext or a list of them)."""
    if isinstance(corpus, (list, tuple)):
        if not corpus:
            raise DataError("retrieval corpus is empty")
        corpus = merge_contexts(corpus)
    return MomentRetriever(params, corpus, alpha, L_max, n_videos).retrieve(query, k)


def exhaustive_retrieve(query, corpus_ctx: EncodedContext, params: ModelParams, k=1,
                        L_max=DEFAULT_L_MAX, alpha=ALPHA) -> RankedList:
    """Reference ranking: enumerate every moment of every video and fully sort."""
    r = MomentRetriever(params, corpus_ctx, alpha, L_max, len(corpus_ctx.video_ids))
    s_vr = r.video_scores(query).reshape(-1)
    P_st, P_ed, mask = r.span_distributions(query, list(range(len(corpus_ctx.video_ids))))
    cands = []
    for vi, vid in enumerate(corpus_ctx.video_ids):
        l = int(mask[vi].sum())
        for st in range(l):
            for ed in range(st, min(l, st + L_max)):
                smr = moment_score(P_st[vi], P_ed[vi], st, ed)
                cands.append(MomentPrediction(vid, st, ed, float(vcmr_score(smr, float(s_vr[vi]), alpha))))
    cands.sort(key=MomentPrediction.sort_key)
    return RankedList(cands[:k], k)


def merge_contexts(ctxs) -> EncodedContext:
    """Stack single-video contexts into one padded batch."""
    L = max(c.mask.shape[-1] for c in ctxs)

    def pad(t):
        if t is None:
            return None
        a = t.data
        return np.pad(a, [(0, 0), (0, L - a.shape[1]), (0, 0)])

    def stack(get):
        parts = [pad(get(c)) for c in ctxs]
        return None if parts[0] is None else Tensor(np.concatenate(parts))

    langs = list(ctxs[0].H_s_vr)
    mask = np.concatenate([np.pad(c.mask, [(0, 0), (0, L - c.mask.shape[1])]) for c in ctxs])
    ids = []
    for i, c in enumerate(ctxs):
        ids += c.video_ids or [f"video{i}"]
    return EncodedContext(
        stack(lambda c: c.H_v_vr), stack(lambda c: c.H_v_mr),
        {lang: stack(lambda c, lang=lang: c.H_s_vr[lang]) for lang in langs},
        {lang: stack(lambda c, lang=lang: c.H_s_mr[lang]) for lang in langs},
        mask, ids)


def retrieve_many(retriever: MomentRetriever, queries, k=1, n_jobs=1, nms_iou=None):
    """Retrieve for a list of (query_id, embedding); output order follows input."""
    run = lambda item: (item[0], retriever.retrieve(item[1], k, nms_iou))
    if n_jobs <= 1:
        return [run(it) for it in queries]
    with ThreadPoolExecutor(n_jobs) as pool:
        return list(pool.map(run, queries))


# prediction dump -------------------------------------------------------------------

def write_dump(path, results, clip_seconds=1.5):
    """One JSON object per line: query_id plus [video_id, start_s, end_s, score] rows."""
    with open(path, "w", encoding="utf-8") as f:
        for qid, ranked in results:
            rows = [[p.video_id, p.t_st * clip_seconds, (p.t_ed + 1) * clip_seconds, p.score]
                    for p in ranked]
            f.write(json.dumps({"query_id": qid, "predictions": rows}) + "\n")


def read_dump(path) -> dict:
    """query_id -> list of (video_id, start_s, end_s, score)."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rows = [(str(v), float(s), float(e), float(sc)) for v, s, e, sc in rec["predictions"]]
                out[str(rec["query_id"])] = rows
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{Path(path).name}: malformed dump line {lineno}: {exc}", lineno) from None
    return out
