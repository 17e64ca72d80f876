"""Temporal IoU, recall@K with language/query-type breakdowns, and paired bootstrap tests."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

KS = (1, 5, 10, 100)
IOUS = (0.5, 0.7)
QTYPES = ("video", "sub", "video+sub")


def temporal_iou(a, b) -> float:
    (s1, e1), (s2, e2) = a, b
    if s1 > e1 or s2 > e2:
        raise ValueError(f"intervals must satisfy start <= end: {a}, {b}")
    if (s1, e1) == (s2, e2):
        return 1.0
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = max(e1, e2) - min(s1, s2)
    return inter / union if union > 0 else 0.0


def _rows(pred):
    """Normalise a ranked list to (video_id, start, end) tuples."""
    out = []
    for p in pred or ():
        if hasattr(p, "video_id"):
            s, e = p.seconds()
            out.append((p.video_id, s, e))
        else:
            out.append((p[0], float(p[1]), float(p[2])))
    return out


def is_correct(pred, gt, k, iou_threshold) -> bool:
    vid, s, e = gt
    for pv, ps, pe in _rows(pred)[:k]:
        if pv == vid and temporal_iou((ps, pe), (s, e)) >= iou_threshold:
            return True
    return False


def correctness(predictions: dict, gt: dict, query_ids, k=1, iou_threshold=0.7) -> np.ndarray:
    """0/1 vector over ``query_ids``; queries without predictions count as misses."""
    out = np.zeros(len(query_ids), dtype=np.int8)
    for i, qid in enumerate(query_ids):
        if qid not in gt:
            raise DataError(f"no ground truth for query {qid}")
        out[i] = is_correct(predictions.get(qid), gt[qid], k, iou_threshold)
    return out


def recall_at_k(predictions: dict, gt: dict, k=1, iou_threshold=0.7) -> float:
    """Fraction of ground-truth queries with a correct moment in the top ``k``."""
    if not gt:
        raise DataError("recall_at_k: empty ground truth")
    missing = set(predictions) - set(gt)
    if missing:
        raise DataError(f"predictions for queries without ground truth: {sorted(missing)[:5]}")
    return float(correctness(predictions, gt, sorted(gt), k, iou_threshold).mean())


@dataclass
class EvalReport:
    """cells[lang][qtype][K][iou] -> recall; counts[lang][qtype] -> n queries."""

    cells: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    ks: tuple = KS
    ious: tuple = IOUS

    def recall(self, lang, k=1, iou=0.7, qtype="all"):
        return self.cells[lang][qtype][k][iou]

    def to_dict(self):
        return {
            "ks": list(self.ks), "ious": list(self.ious), "counts": self.counts,
            "recall": {lang: {qt: {f"R@{k}": {f"{iou}": v for iou, v in by_iou.items()}
                                   for k, by_iou in by_k.items()}
                              for qt, by_k in by_qt.items()}
                       for lang, by_qt in self.cells.items()},
        }

    @classmethod
    def from_dict(cls, d):
        cells = {lang: {qt: {int(k[2:]): {float(i): v for i, v in by_iou.items()}
                             for k, by_iou in by_k.items()}
                        for qt, by_k in by_qt.items()}
                 for lang, by_qt in d["recall"].items()}
        return cls(cells, d["counts"], tuple(d["ks"]), tuple(d["ious"]))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def table(self):
        cols = [f"R@{k}/{iou}" for k in self.ks for iou in self.ious]
        lines = [f"{'lang':<5} {'qtype':<10} {'n':>5} " + " ".join(f"{c:>9}" for c in cols)]
        for lang, by_qt in self.cells.items():
            for qt, by_k in by_qt.items():
                vals = " ".join(f"{100 * by_k[k][iou]:>9.2f}" for k in self.ks for iou in self.ious)
                lines.append(f"{lang:<5} {qt:<10} {self.counts[lang][qt]:>5} {vals}")
        return "\n".join(lines)


def evaluate(predictions: dict, queries, ks=KS, ious=IOUS, breakdown=True) -> EvalReport:
    """Full report per language x query type; ``queries`` are QueryRecord-like objects."""
    groups = {}
    for q in queries:
        groups.setdefault(q.language, {}).setdefault("all", []).append(q)
        if breakdown:
            groups[q.language].setdefault(q.qtype, []).append(q)
    cells, counts = {}, {}
    for lang, by_qt in groups.items():
        cells[lang], counts[lang] = {}, {}
        for qt in ["all", *[t for t in QTYPES if t in by_qt]]:
            qs = by_qt[qt]
            gt = {q.query_id: (q.gt_video_id, q.start, q.end) for q in qs}
            ids = [q.query_id for q in qs]
            counts[lang][qt] = len(qs)
            cells[lang][qt] = {k: {iou: float(correctness(predictions, gt, ids, k, iou).mean())
                                   for iou in ious} for k in ks}
    return EvalReport(cells, counts, tuple(ks), tuple(ious))


def early_stop_metric(report_en, report_zh) -> float:
    """Sum of English and Chinese R@1 at IoU 0.7; accepts floats or reports."""
    val = lambda r, lang: r.recall(lang, 1, 0.7) if isinstance(r, EvalReport) else float(r)
    return val(report_en, "en") + val(report_zh, "zh")


BOOTSTRAP_CHUNK = 1000


def _bootstrap_chunk(a, b, n_resamples, seed_seq):
    rng = np.random.default_rng(seed_seq)
    idx = rng.integers(0, a.shape[0], size=(n_resamples, a.shape[0]))
    delta = a[idx].mean(1) - b[idx].mean(1)
    return int((delta <= 0).sum()), int((delta >= 0).sum())


def bootstrap_test(correct_a, correct_b, B=10000, seed=0, n_jobs=1, one_sided=True) -> float:
    """Paired bootstrap over queries.

    One-sided (default): fraction of resamples where mean(a) - mean(b) <= 0,
    i.e. evidence against "a is better".  Two-sided: twice the smaller tail.
    Resamples are drawn in fixed chunks with seeds spawned from ``seed``, so
    the p-value does not depend on ``n_jobs``.
    """
    a = np.asarray(correct_a, dtype=np.float64)
    b = np.asarray(correct_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError(f"bootstrap_test needs equal-length vectors, got {a.shape} and {b.shape}")
    if a.size == 0 or B < 1:
        raise ConfigError("bootstrap_test needs at least one query and one resample")
    sizes = [min(BOOTSTRAP_CHUNK, B - s) for s in range(0, B, BOOTSTRAP_CHUNK)]
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    work = lambda i: _bootstrap_chunk(a, b, sizes[i], seeds[i])
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            counts = list(pool.map(work, range(len(sizes))))
    else:
        counts = [work(i) for i in range(len(sizes))]
    le = sum(c[0] for c in counts) / B
    if one_sided:
        return le
    ge = sum(c[1] for c in counts) / B
    return min(1.0, 2 * min(le, ge))
