"""Corpus files, synthetic bilingual corpora and paired batch assembly.

On-disk layout of a corpus directory::

    corpus.json         header: dims, languages, clip seconds, video list
    queries.jsonl       one QueryRecord per line
    splits.json         {"train": [query ids], "val": [...], ...}
    features/           MTVF tensors referenced by relative path
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

MTVF_MAGIC = b"MTVF"
MTVF_VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4")}
PARTITIONS = ("train", "val", "test_public", "test_private")
SPLIT_FRACTIONS = (0.8, 0.1, 0.05, 0.05)
QTYPES = ("video", "sub", "video+sub")


# MTVF ---------------------------------------------------------------------------

def encode_feature(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim < 2:
        raise FormatError(f"MTVF tensors need n_dims >= 2, got {arr.ndim}")
    head = MTVF_MAGIC + struct.pack("<HBB", MTVF_VERSION, 1, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_feature(blob: bytes, name="<bytes>") -> np.ndarray:
    if len(blob) < 8:
        raise FormatError(f"{name}: header truncated ({len(blob)} bytes)", len(blob))
    if blob[:4] != MTVF_MAGIC:
        raise FormatError(f"{name}: bad magic {blob[:4]!r}", 0)
    version, code, ndim = struct.unpack_from("<HBB", blob, 4)
    if version != MTVF_VERSION:
        raise FormatError(f"{name}: unsupported version {version}", 4)
    if code not in DTYPE_CODES:
        raise FormatError(f"{name}: unknown dtype code {code}", 6)
    if ndim < 2:
        raise FormatError(f"{name}: n_dims must be >= 2, got {ndim}", 7)
    off = 8
    if len(blob) < off + 4 * ndim:
        raise FormatError(f"{name}: extents truncated", len(blob))
    shape = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    count = 1
    for n in shape:
        count *= n
    if count > (1 << 40):
        raise FormatError(f"{name}: extent overflow {shape}", 8)
    expected = off + count * DTYPE_CODES[code].itemsize
    if len(blob) != expected:
        raise FormatError(f"{name}: expected {expected} bytes for shape {shape}, found {len(blob)}", len(blob))
    return np.frombuffer(blob, dtype=DTYPE_CODES[code], offset=off).reshape(shape).astype(np.float32)


def write_feature_file(path, arr):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_feature(arr))


def read_feature_file(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature file not found: {path}")
    return decode_feature(path.read_bytes(), str(path))


# records ------------------------------------------------------------------------

@dataclass
class CorpusVideo:
    video_id: str
    video: np.ndarray                  # (l, d_v)
    subs: dict                         # lang -> (l, d_t)
    show: str = ""

    @property
    def l(self):
        return self.video.shape[0]


@dataclass
class QueryRecord:
    query_id: str
    language: str
    pair_id: str
    tokens: np.ndarray                 # (l_q, d_t)
    gt_video_id: str
    start: float
    end: float
    qtype: str = "video+sub"


@dataclass
class SplitSpec:
    partitions: dict = field(default_factory=dict)   # name -> list of query ids

    def validate(self, all_ids=None):
        seen = {}
        for name, ids in self.partitions.items():
            for qid in ids:
                if qid in seen:
                    raise DataError(f"query {qid} in both {seen[qid]} and {name}")
                seen[qid] = name
        if all_ids is not None and set(all_ids) != set(seen):
            missing = sorted(set(all_ids) - set(seen))[:5]
            raise DataError(f"splits do not cover all queries, e.g. {missing}")

    def __getitem__(self, name):
        return self.partitions[name]


@dataclass
class Corpus:
    videos: dict                       # video_id -> CorpusVideo, insertion ordered
    queries: list
    splits: SplitSpec
    d_v: int
    d_t: int
    languages: tuple = ("en", "zh")
    clip_seconds: float = 1.5

    def query_map(self):
        return {q.query_id: q for q in self.queries}

    def pairs(self, split=None, exclude_shows=(), only_shows=None):
        """pair_id -> {lang: QueryRecord}, optionally restricted to a split or shows."""
        ids = None if split is None else set(self.splits[split])
        out = {}
        for q in self.queries:
            if ids is not None and q.query_id not in ids:
                continue
            show = self.videos[q.gt_video_id].show
            if show in exclude_shows or (only_shows is not None and show not in only_shows):
                continue
            out.setdefault(q.pair_id, {})[q.language] = q
        return out

    def validate(self):
        for v in self.videos.values():
            if v.video.shape[1] != self.d_v:
                raise DataError(f"video {v.video_id}: d_v {v.video.shape[1]} != {self.d_v}")
            for lang, s in v.subs.items():
                if s.shape != (v.l, self.d_t):
                    raise DataError(f"video {v.video_id}: subtitle[{lang}] shape {s.shape}, "
                                    f"expected {(v.l, self.d_t)}")
        for q in self.queries:
            if q.gt_video_id not in self.videos:
                raise DataError(f"query {q.query_id}: unknown video {q.gt_video_id}")
            l = self.videos[q.gt_video_id].l
            if not 0 <= q.start < q.end <= l * self.clip_seconds + 1e-9:
                raise DataError(f"query {q.query_id}: span [{q.start}, {q.end}] outside video")
        self.splits.validate([q.query_id for q in self.queries])


def to_clip_span(start, end, l, clip_seconds=1.5):
    """Seconds -> inclusive clip indices: floor(start/c), min(ceil(end/c) - 1, l - 1)."""
    st = min(int(math.floor(start / clip_seconds)), l - 1)
    ed = min(int(math.ceil(end / clip_seconds)) - 1, l - 1)
    st = max(st, 0)
    return st, max(st, ed)


# corpus directory io -------------------------------------------------------------

def save_corpus(corpus: Corpus, root):
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    videos = []
    for v in corpus.videos.values():
        vref = f"features/{v.video_id}.video.mtvf"
        write_feature_file(root / vref, v.video)
        srefs = {}
        for lang, s in v.subs.items():
            srefs[lang] = f"features/{v.video_id}.sub.{lang}.mtvf"
            write_feature_file(root / srefs[lang], s)
        videos.append({"video_id": v.video_id, "l": v.l, "show": v.show,
                       "video": vref, "subtitles": srefs})
    header = {"format": "mtvr-corpus", "version": 1, "d_v": corpus.d_v, "d_t": corpus.d_t,
              "languages": list(corpus.languages), "clip_seconds": corpus.clip_seconds,
              "videos": videos}
    (root / "corpus.json").write_text(json.dumps(header, indent=1) + "\n")
    with open(root / "queries.jsonl", "w", encoding="utf-8") as f:
        for q in corpus.queries:
            ref = f"features/queries/{q.query_id}.mtvf"
            write_feature_file(root / ref, q.tokens)
            f.write(json.dumps({
                "query_id": q.query_id, "language": q.language, "pair_id": q.pair_id,
                "features": ref, "gt_video_id": q.gt_video_id, "start": q.start,
                "end": q.end, "qtype": q.qtype}, ensure_ascii=False) + "\n")
    write_splits(corpus.splits, root / "splits.json")


def write_splits(splits: SplitSpec, path):
    Path(path).write_text(json.dumps(splits.partitions, indent=1) + "\n")


def read_splits(path) -> SplitSpec:
    return SplitSpec(json.loads(Path(path).read_text()))


def read_queries(path, root=None, load_features=True):
    root = Path(root) if root is not None else Path(path).parent
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                tokens = read_feature_file(root / r["features"]) if load_features else None
                out.append(QueryRecord(str(r["query_id"]), r["language"], str(r["pair_id"]), tokens,
                                       str(r["gt_video_id"]), float(r["start"]), float(r["end"]),
                                       r.get("qtype", "video+sub")))
            except (KeyError, ValueError, TypeError) as exc:
                raise FormatError(f"{path}: bad query record: {exc}", lineno) from None
    return out


def load_corpus(root, load_query_features=True) -> Corpus:
    root = Path(root)
    try:
        header = json.loads((root / "corpus.json").read_text())
    except FileNotFoundError:
        raise DataError(f"no corpus.json under {root}") from None
    videos = {}
    for v in header["videos"]:
        subs = {lang: read_feature_file(root / ref) for lang, ref in v["subtitles"].items()}
        videos[v["video_id"]] = CorpusVideo(v["video_id"], read_feature_file(root / v["video"]),
                                            subs, v.get("show", ""))
    queries = read_queries(root / "queries.jsonl", root, load_query_features)
    corpus = Corpus(videos, queries, read_splits(root / "splits.json"), header["d_v"], header["d_t"],
                    tuple(header["languages"]), header["clip_seconds"])
    corpus.validate()
    return corpus


# splits ---------------------------------------------------------------------------

def make_splits(pair_ids, rng, fractions=SPLIT_FRACTIONS, pair_to_queries=None) -> SplitSpec:
    """Partition pairs (so translations never straddle partitions) at the given fractions."""
    pairs = list(pair_ids)
    order = rng.permutation(len(pairs))
    n = len(pairs)
    counts = [int(round(f * n)) for f in fractions[1:]]
    counts = [n - sum(counts)] + counts
    parts, pos = {}, 0
    for name, c in zip(PARTITIONS, counts):
        chosen = [pairs[i] for i in order[pos:pos + c]]
        pos += c
        if pair_to_queries is not None:
            chosen = [qid for p in chosen for qid in pair_to_queries[p]]
        parts[name] = chosen
    return SplitSpec(parts)


def held_out_show_split(corpus: Corpus, show: str) -> SplitSpec:
    """Queries on ``show`` become the test partition; everything else trains."""
    test = [q.query_id for q in corpus.queries if corpus.videos[q.gt_video_id].show == show]
    train = [q.query_id for q in corpus.queries if corpus.videos[q.gt_video_id].show != show]
    return SplitSpec({"train": train, "unseen": test})


# synthetic corpus ------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_videos: int = 32
    clips: int = 20
    d_v: int = 32
    d_t: int = 32
    queries_per_video: int = 2
    query_len: int = 6
    min_span: int = 2
    max_span: int = 6
    noise: float = 0.1
    lang_offset_scale: float = 1.0
    qtype_probs: tuple = (0.74, 0.09, 0.17)
    languages: tuple = ("en", "zh")
    n_shows: int = 1
    clip_seconds: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if min(self.n_videos, self.clips, self.d_v, self.d_t, self.queries_per_video,
               self.query_len, self.min_span) < 1:
            raise ConfigError("synthetic corpus counts must all be >= 1")
        if self.max_span < self.min_span:
            raise ConfigError("max_span < min_span")
        if self.max_span > self.clips:
            raise ConfigError(f"span of {self.max_span} clips longer than video of {self.clips}")
        if self.queries_per_video * self.max_span > self.clips:
            raise ConfigError(f"{self.queries_per_video} disjoint spans of up to {self.max_span} "
                              f"clips do not fit in {self.clips} clips")
        if abs(sum(self.qtype_probs) - 1) > 1e-6:
            raise ConfigError("qtype_probs must sum to 1")


@dataclass
class SyntheticTruth:
    """Generator internals an oracle matcher may use."""

    video_map: np.ndarray              # (d_t, d_v) latent-to-video map
    lang_offsets: dict
    prototypes: dict                   # pair_id -> (d_t,)


def _place_spans(rng, l, k, lo, hi):
    """k disjoint spans of random lengths in [lo, hi] within l clips."""
    lengths = rng.integers(lo, hi + 1, size=k)
    slack = l - lengths.sum()
    # Stars and bars: distribute free clips into k+1 gaps.
    cuts = np.sort(rng.integers(0, slack + 1, size=k))
    gaps = np.diff(np.concatenate([[0], cuts]))
    spans, pos = [], 0
    for g, n in zip(gaps, lengths):
        pos += g
        spans.append((int(pos), int(pos + n - 1)))
        pos += n
    order = rng.permutation(k)
    return [spans[i] for i in order]


def generate_synthetic_corpus(spec: SyntheticSpec, return_truth=False):
    """Plant one latent moment per query pair into video/subtitle/query features."""
    rng = np.random.default_rng(spec.seed)
    langs = tuple(spec.languages)
    video_map = rng.normal(0, 1 / np.sqrt(spec.d_t), (spec.d_t, spec.d_v))
    offsets = {lang: rng.normal(0, spec.lang_offset_scale, spec.d_t) for lang in langs}
    videos, queries, protos = {}, [], {}
    pair_to_queries = {}
    for vi in range(spec.n_videos):
        vid = f"v{vi:04d}"
        l = spec.clips
        video = rng.normal(0, 1, (l, spec.d_v))
        sub_content = rng.normal(0, 1, (l, spec.d_t))
        subs = {lang: sub_content + offsets[lang] + spec.noise * rng.normal(0, 1, (l, spec.d_t))
                for lang in langs}
        spans = _place_spans(rng, l, spec.queries_per_video, spec.min_span, spec.max_span)
        for qi, (st, ed) in enumerate(spans):
            pid = f"p{vi:04d}_{qi}"
            proto = rng.normal(0, 1, spec.d_t)
            protos[pid] = proto
            qtype = QTYPES[rng.choice(3, p=spec.qtype_probs)]
            n = ed - st + 1
            if qtype in ("video", "video+sub"):
                video[st:ed + 1] = proto @ video_map + spec.noise * rng.normal(0, 1, (n, spec.d_v))
            if qtype in ("sub", "video+sub"):
                for lang in langs:
                    subs[lang][st:ed + 1] = proto + offsets[lang] + spec.noise * rng.normal(0, 1, (n, spec.d_t))
            pair_to_queries[pid] = []
            for lang in langs:
                tokens = proto + offsets[lang] + spec.noise * rng.normal(0, 1, (spec.query_len, spec.d_t))
                qid = f"{pid}.{lang}"
                pair_to_queries[pid].append(qid)
                queries.append(QueryRecord(qid, lang, pid, tokens.astype(np.float32), vid,
                                           st * spec.clip_seconds, (ed + 1) * spec.clip_seconds, qtype))
        videos[vid] = CorpusVideo(vid, video.astype(np.float32),
                                  {k: v.astype(np.float32) for k, v in subs.items()},
                                  f"show{vi % spec.n_shows}")
    splits = make_splits(list(pair_to_queries), rng, pair_to_queries=pair_to_queries)
    corpus = Corpus(videos, queries, splits, spec.d_v, spec.d_t, langs, spec.clip_seconds)
    if return_truth:
        return corpus, SyntheticTruth(video_map, offsets, protos)
    return corpus


def oracle_predictions(corpus: Corpus, truth: SyntheticTruth, queries=None, threshold=0.5):
    """Model-free matcher: recover each query's prototype and locate where it was planted.

    Returns query_id -> (video_id, start_s, end_s).
    """
    c = corpus.clip_seconds
    out = {}
    for q in queries if queries is not None else corpus.queries:
        p = q.tokens.mean(0) - truth.lang_offsets[q.language]
        pv = p @ truth.video_map
        best = None
        for v in corpus.videos.values():
            cos_v = _cos_rows(v.video, pv)
            cos_s = _cos_rows(v.subs[q.language] - truth.lang_offsets[q.language], p)
            hit = np.maximum(cos_v, cos_s)
            runs = _runs(hit >= threshold)
            for st, ed in runs:
                score = float(hit[st:ed + 1].mean())
                if best is None or score > best[0]:
                    best = (score, v.video_id, st, ed)
        if best is None:
            out[q.query_id] = None
        else:
            _, vid, st, ed = best
            out[q.query_id] = (vid, st * c, (ed + 1) * c)
    return out


def _cos_rows(M, v):
    return (M @ v) / (np.linalg.norm(M, axis=1) * np.linalg.norm(v) + 1e-12)


def _runs(flags):
    runs, start = [], None
    for i, f in enumerate(flags):
        if f and start is None:
            start = i
        elif not f and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(flags) - 1))
    return runs


# batching --------------------------------------------------------------------------

@dataclass
class Batch:
    pair_ids: list
    query_ids: dict                    # lang -> list
    tokens: dict                       # lang -> (B, LQ, d_t)
    token_mask: dict                   # lang -> (B, LQ)
    video_ids: list
    video: np.ndarray                  # (V, L, d_v)
    subs: dict                         # lang -> (V, L, d_t)
    clip_mask: np.ndarray              # (V, L)
    vid_index: np.ndarray              # (B,)
    gt_st: np.ndarray
    gt_ed: np.ndarray
    qtypes: list


def _pad_stack(arrays, dtype):
    n = max(a.shape[0] for a in arrays)
    out = np.zeros((len(arrays), n, arrays[0].shape[1]), dtype=dtype)
    mask = np.zeros((len(arrays), n), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, :a.shape[0]] = a
        mask[i, :a.shape[0]] = True
    return out, mask


def collate(corpus: Corpus, pairs: dict, pair_ids, languages=None, dtype=np.float32) -> Batch:
    """Assemble padded arrays for the given pair ids. Translations share ground truth."""
    languages = tuple(languages or corpus.languages)
    video_ids, vid_pos = [], {}
    vid_index, gt_st, gt_ed, qtypes = [], [], [], []
    tokens = {lang: [] for lang in languages}
    qids = {lang: [] for lang in languages}
    for pid in pair_ids:
        recs = pairs[pid]
        missing = [lang for lang in languages if lang not in recs]
        if missing:
            raise DataError(f"pair {pid} lacks languages {missing}")
        ref = recs[languages[0]]
        for lang in languages[1:]:
            r = recs[lang]
            if (r.gt_video_id, r.start, r.end, r.qtype) != (ref.gt_video_id, ref.start, ref.end, ref.qtype):
                raise DataError(f"pair {pid}: translations disagree on ground truth")
        if ref.gt_video_id not in vid_pos:
            vid_pos[ref.gt_video_id] = len(video_ids)
            video_ids.append(ref.gt_video_id)
        vid_index.append(vid_pos[ref.gt_video_id])
        l = corpus.videos[ref.gt_video_id].l
        st, ed = to_clip_span(ref.start, ref.end, l, corpus.clip_seconds)
        gt_st.append(st)
        gt_ed.append(ed)
        qtypes.append(ref.qtype)
        for lang in languages:
            tokens[lang].append(recs[lang].tokens)
            qids[lang].append(recs[lang].query_id)
    tok, tmask = {}, {}
    for lang in languages:
        tok[lang], tmask[lang] = _pad_stack(tokens[lang], dtype)
    vids = [corpus.videos[v] for v in video_ids]
    video, clip_mask = _pad_stack([v.video for v in vids], dtype)
    subs = {lang: _pad_stack([v.subs[lang] for v in vids], dtype)[0] for lang in languages}
    return Batch(list(pair_ids), qids, tok, tmask, video_ids, video, subs, clip_mask,
                 np.asarray(vid_index), np.asarray(gt_st), np.asarray(gt_ed), qtypes)


def make_batches(pair_ids, batch_size=128, seed=0, epoch=0):
    """Shuffled pair-id batches for one epoch; the final partial batch is kept.

    The order depends only on ``(seed, epoch)``.
    """
    pair_ids = sorted(pair_ids)
    if not pair_ids:
        raise DataError("cannot batch an empty split")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(pair_ids))
    return [[pair_ids[i] for i in order[s:s + batch_size]]
            for s in range(0, len(order), batch_size)]
