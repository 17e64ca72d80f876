"""Training losses: triplet video retrieval, start/end cross-entropy, cross-language neighborhood."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .errors import DataError, ShapeError
from .model import EncodedContext, ModelParams, encode_query, encode_video_context
from .numeric import Tensor
from .retrieval import convse_logits, query_clip_similarity, vr_score_matrix

NC_MARGIN = 0.2
VR_MARGIN = 0.1


@dataclass
class LossBreakdown:
    loss_vr: dict = field(default_factory=dict)
    loss_moment: dict = field(default_factory=dict)
    loss_nc: Tensor | float = 0.0
    total: Tensor | float = 0.0

    @classmethod
    def combine(cls, loss_vr, loss_moment, loss_nc, weights=(1.0, 1.0, 1.0)):
        w_vr, w_mr, w_nc = weights
        total = None
        for part, w in [*((v, w_vr) for v in loss_vr.values()),
                        *((v, w_mr) for v in loss_moment.values()), (loss_nc, w_nc)]:
            if w == 0:
                continue
            term = nm.mul(nm.as_tensor(part, np.float64 if np.isscalar(part) else None), w)
            total = term if total is None else nm.add(total, term)
        return cls(dict(loss_vr), dict(loss_moment), loss_nc,
                   total if total is not None else Tensor(np.zeros(())))

    def as_floats(self):
        f = lambda t: float(t.data) if isinstance(t, Tensor) else float(t)
        out = {f"loss_vr.{k}": f(v) for k, v in self.loss_vr.items()}
        out.update({f"loss_moment.{k}": f(v) for k, v in self.loss_moment.items()})
        out["loss_nc"] = f(self.loss_nc)
        out["total"] = f(self.total)
        return out


def sample_negatives(n, rng, valid=None):
    """One uniformly drawn in-batch negative index != i per row.

    ``valid[i, x]`` restricts the draw; rows with no valid candidate fall back
    to any index other than ``i``.
    """
    if n < 2:
        raise ShapeError("in-batch negatives need a batch of at least 2")
    others = ~np.eye(n, dtype=bool)
    allowed = others if valid is None else np.asarray(valid, dtype=bool) & others
    allowed = np.where(allowed.any(1, keepdims=True), allowed, others)
    # argmax of iid uniform keys over the allowed set is a uniform draw from it
    return np.argmax(np.where(allowed, rng.random((n, n)), -1.0), axis=1)


def _two_sided_hinge(sim: Tensor, neg_col, neg_row, margin) -> Tensor:
    """mean_i [max(0, sim[i,k]-sim[i,i]+m) + max(0, sim[j,i]-sim[i,i]+m)]."""
    n = sim.shape[0]
    rows = np.arange(n)
    pos = nm.take(sim, (rows, rows))
    t1 = nm.relu(nm.add(nm.sub(nm.take(sim, (rows, neg_col)), pos), margin))
    t2 = nm.relu(nm.add(nm.sub(nm.take(sim, (neg_row, rows)), pos), margin))
    return nm.mean(nm.add(t1, t2))


def nc_loss(emb_en, emb_zh, margin=NC_MARGIN, rng=None, negatives=None) -> Tensor:
    """Language neighborhood constraint over index-paired embeddings (B, d).

    ``negatives`` is an optional ``(k, j)`` pair of index arrays: k picks the
    negative Chinese partner of each English row, j the negative English
    partner of each Chinese row.
    """
    emb_en, emb_zh = nm.as_tensor(emb_en), nm.as_tensor(emb_zh)
    if emb_en.shape != emb_zh.shape or emb_en.ndim != 2:
        raise ShapeError(f"nc_loss expects matching (B, d) batches, got {emb_en.shape} and {emb_zh.shape}")
    n = emb_en.shape[0]
    if n < 2:
        raise ShapeError("nc_loss needs at least 2 pairs for in-batch negatives")
    if negatives is None:
        rng = rng if rng is not None else np.random.default_rng()
        negatives = (sample_negatives(n, rng), sample_negatives(n, rng))
    k, j = negatives
    sim = nm.matmul(nm.l2_normalize(emb_en), nm.swapaxes(nm.l2_normalize(emb_zh), 0, 1))
    return _two_sided_hinge(sim, k, j, margin)


def video_retrieval_loss(scores, margin=VR_MARGIN, rng=None, valid=None, negatives=None) -> Tensor:
    """Triplet loss on an (B, B) score matrix ``scores[i, j] = s(v_j | q_i)``; diagonal positive."""
    scores = nm.as_tensor(scores)
    n = scores.shape[0]
    if scores.ndim != 2 or scores.shape[1] != n:
        raise ShapeError(f"video_retrieval_loss expects a square matrix, got {scores.shape}")
    if n < 2:
        raise ShapeError("video_retrieval_loss needs at least 2 queries")
    if negatives is None:
        rng = rng if rng is not None else np.random.default_rng()
        negatives = (sample_negatives(n, rng, valid), sample_negatives(n, rng, valid))
    return _two_sided_hinge(scores, *negatives, margin)


def _check_gt(gt_st, gt_ed, lengths, record_ids):
    gt_st, gt_ed = np.asarray(gt_st), np.asarray(gt_ed)
    for i in range(len(gt_st)):
        l = int(lengths[i])
        if not 0 <= gt_st[i] <= gt_ed[i] < l:
            rid = record_ids[i] if record_ids is not None else i
            raise DataError(f"record {rid}: ground truth clips [{gt_st[i]}, {gt_ed[i]}] "
                            f"outside video of {l} clips")
    return gt_st, gt_ed


def moment_ce_loss(P_st, P_ed, gt_st, gt_ed, record_ids=None) -> Tensor:
    """-log P_st[gt_st] - log P_ed[gt_ed], averaged over the batch."""
    P_st, P_ed = nm.as_tensor(P_st), nm.as_tensor(P_ed)
    if P_st.ndim == 1:
        P_st, P_ed = nm.reshape(P_st, (1, -1)), nm.reshape(P_ed, (1, -1))
        gt_st, gt_ed = np.atleast_1d(gt_st), np.atleast_1d(gt_ed)
    lengths = np.full(P_st.shape[0], P_st.shape[1])
    gt_st, gt_ed = _check_gt(gt_st, gt_ed, lengths, record_ids)
    rows = np.arange(P_st.shape[0])
    nll = nm.add(nm.log(nm.take(P_st, (rows, gt_st))), nm.log(nm.take(P_ed, (rows, gt_ed))))
    return nm.mul(nm.mean(nll), -1.0)


def moment_ce_from_logits(logit_st, logit_ed, mask, gt_st, gt_ed, record_ids=None) -> Tensor:
    """Same loss computed from ConvSE logits via log-softmax over valid clips."""
    gt_st, gt_ed = _check_gt(gt_st, gt_ed, np.asarray(mask).sum(-1), record_ids)
    rows = np.arange(logit_st.shape[0])
    lp_st = nm.log_softmax(logit_st, axis=-1, mask=mask)
    lp_ed = nm.log_softmax(logit_ed, axis=-1, mask=mask)
    nll = nm.add(nm.take(lp_st, (rows, gt_st)), nm.take(lp_ed, (rows, gt_ed)))
    return nm.mul(nm.mean(nll), -1.0)


def gather_context(ctx: EncodedContext, idx) -> EncodedContext:
    """Differentiable row gather: one context row per index."""
    g = lambda t: None if t is None else nm.take(t, idx)
    return EncodedContext(g(ctx.H_v_vr), g(ctx.H_v_mr),
                          {k: g(v) for k, v in ctx.H_s_vr.items()},
                          {k: g(v) for k, v in ctx.H_s_mr.items()},
                          ctx.mask[idx])


def temporal_max_pool(H: Tensor, mask) -> Tensor:
    return nm.tmax(nm.where(np.asarray(mask)[..., None], H, -np.inf), axis=-2)


@dataclass
class LossSettings:
    margin_nc: float = NC_MARGIN
    margin_vr: float = VR_MARGIN
    w_vr: float = 1.0
    w_moment: float = 1.0
    w_nc: float = 1.0
    use_nc: bool = True


def total_loss(params: ModelParams, batch, rng, settings: LossSettings | None = None,
               return_embeddings=False):
    """Sum over languages of video + moment losses plus the neighborhood constraint."""
    s = settings or LossSettings()
    c = params.config
    mods = c.modalities
    langs = c.languages
    ctx = encode_video_context(params, batch.video, batch.subs, batch.clip_mask)
    per_query = gather_context(ctx, batch.vid_index)
    n_videos = len(batch.video_ids)
    valid = batch.vid_index[:, None] != batch.vid_index[None, :]
    loss_vr, loss_mr, queries = {}, {}, {}
    for lang in langs:
        q = encode_query(params, batch.tokens[lang], lang, batch.token_mask[lang])
        queries[lang] = q
        if n_videos >= 2 and s.w_vr:
            scores = nm.take(vr_score_matrix(ctx, q, lang, mods), (slice(None), batch.vid_index))
            loss_vr[lang] = video_retrieval_loss(scores, s.margin_vr, rng, valid)
        else:
            loss_vr[lang] = Tensor(np.zeros((), dtype=params.dtype))
        S = query_clip_similarity(per_query, q, lang, mods)
        k_st, k_ed = params.convse_kernels(lang)
        st, ed = convse_logits(S, per_query.mask, k_st, k_ed)
        loss_mr[lang] = moment_ce_from_logits(st, ed, per_query.mask, batch.gt_st, batch.gt_ed,
                                              batch.pair_ids)
    loss_nc = Tensor(np.zeros((), dtype=params.dtype))
    if s.use_nc and s.w_nc and len(langs) == 2 and len(batch.pair_ids) >= 2:
        a, b = langs
        sites = [nc_loss(queries[a].q_v, queries[b].q_v, s.margin_nc, rng),
                 nc_loss(queries[a].q_s, queries[b].q_s, s.margin_nc, rng)]
        if "s" in mods and n_videos >= 2:
            for H in (ctx.H_s_vr, ctx.H_s_mr):
                sites.append(nc_loss(temporal_max_pool(H[a], ctx.mask),
                                     temporal_max_pool(H[b], ctx.mask), s.margin_nc, rng))
        loss_nc = nm.mean(nm.stack(sites))
    out = LossBreakdown.combine(loss_vr, loss_mr, loss_nc, (s.w_vr, s.w_moment, s.w_nc if s.use_nc else 0.0))
    if return_embeddings:
        return out, queries
    return out
