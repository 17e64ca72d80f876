"""Bilingual retrieval encoders with cross-language parameter sharing."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numeric as nm
from .errors import ConfigError, FormatError, ShapeError
from .numeric import Tensor

MODALITIES = {"video": ("v",), "sub": ("s",), "video+sub": ("v", "s")}


@dataclass
class ModelConfig:
    d: int = 32
    d_v: int = 32
    d_t: int = 32
    l_max: int = 64
    lq_max: int = 16
    conv_kernel: int = 5
    clip_seconds: float = 1.5
    languages: tuple = ("en", "zh")
    n_heads: int = 4
    share_encoders: bool = True
    per_language_convse: bool = False
    inputs: str = "video+sub"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.languages = tuple(self.languages)
        if self.d <= 0 or self.n_heads <= 0 or self.d % self.n_heads:
            raise ConfigError(f"d={self.d} must be a positive multiple of n_heads={self.n_heads}")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.clip_seconds <= 0:
            raise ConfigError("clip_seconds must be positive")
        if min(self.d_v, self.d_t, self.l_max, self.lq_max) < 1:
            raise ConfigError("feature dims and length limits must be >= 1")
        if self.inputs not in MODALITIES:
            raise ConfigError(f"inputs must be one of {sorted(MODALITIES)}, got {self.inputs!r}")
        if not self.languages or len(set(self.languages)) != len(self.languages):
            raise ConfigError(f"languages must be distinct and nonempty: {self.languages}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def modalities(self):
        return MODALITIES[self.inputs]

    def to_dict(self):
        out = asdict(self)
        out["languages"] = list(self.languages)
        return out

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class SelfEncoder:
    """Self-attention, a linear layer, residual, layer norm.

    The key projection has no bias: a per-query constant cannot change a
    softmax over keys, so such a bias would be an inert parameter.
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    w_ff: Tensor
    b_ff: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    n_heads: int = 4

    _names = ("wq", "bq", "wk", "wv", "bv", "wo", "bo", "w_ff", "b_ff", "ln_gain", "ln_bias")

    def parameters(self):
        return [getattr(self, n) for n in self._names]


@dataclass
class ModularQueryEmbedding:
    q_v: Tensor
    q_s: Tensor
    lang: str
    weights: dict = field(default_factory=dict)

    def by_modality(self, m):
        return self.q_v if m == "v" else self.q_s


@dataclass
class EncodedContext:
    """Per-video encodings. Leading axes (V, l) with padding marked by ``mask``."""

    H_v_vr: Tensor | None
    H_v_mr: Tensor | None
    H_s_vr: dict
    H_s_mr: dict
    mask: np.ndarray
    video_ids: list = field(default_factory=list)

    @property
    def lengths(self):
        return self.mask.sum(-1)

    def vr(self, m, lang):
        return self.H_v_vr if m == "v" else self.H_s_vr[lang]

    def mr(self, m, lang):
        return self.H_v_mr if m == "v" else self.H_s_mr[lang]

    def select(self, idx):
        """Sub-context for the videos at ``idx`` (no gradient tracking)."""
        pick = lambda t: None if t is None else Tensor(t.data[idx])
        return EncodedContext(
            pick(self.H_v_vr), pick(self.H_v_mr),
            {k: pick(v) for k, v in self.H_s_vr.items()},
            {k: pick(v) for k, v in self.H_s_mr.items()},
            self.mask[idx], [self.video_ids[i] for i in np.atleast_1d(idx)] if self.video_ids else [],
        )


class ModelParams:
    """Registry of named trainable tensors.

    Shared components are registered once and resolved to the same tensor
    objects for every language; unshared ones get a ``.<lang>`` suffix.
    """

    def __init__(self, config: ModelConfig, init=True):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}
        if init:
            self._init(np.random.default_rng(config.seed))

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    # construction ---------------------------------------------------------

    def _add(self, group, name, arr):
        full = f"{group}.{name}"
        self.params[full] = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True, name=full)
        self.groups[full] = group

    def _linear(self, rng, group, prefix, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        self._add(group, f"{prefix}w", rng.uniform(-bound, bound, (fan_in, fan_out)))
        self._add(group, f"{prefix}b", np.zeros(fan_out))

    def _encoder(self, rng, group):
        d = self.config.d
        for p in ("q", "k", "v", "o"):
            self._linear(rng, group, f"attn.{p}.", d, d)
        del self.params[f"{group}.attn.k.b"], self.groups[f"{group}.attn.k.b"]
        self._linear(rng, group, "ff.", d, d)
        self._add(group, "ln.gain", np.ones(d))
        self._add(group, "ln.bias", np.zeros(d))

    def _per_lang(self, base, shared):
        if shared:
            return [(base, None)]
        return [(f"{base}.{lang}", lang) for lang in self.config.languages]

    def _init(self, rng):
        c = self.config
        share = c.share_encoders
        self._linear(rng, "video_proj", "", c.d_v, c.d)
        for lang in c.languages:
            self._linear(rng, f"text_proj.{lang}", "", c.d_t, c.d)
        self._add("pos_embed", "table", rng.normal(0, 0.02, (c.l_max + c.lq_max, c.d)))
        for g, _ in self._per_lang("query_encoder", share):
            self._encoder(rng, g)
        for i in range(2):
            self._encoder(rng, f"video_encoder.{i}")
        for g, _ in self._per_lang("subtitle_encoder", share):
            for i in range(2):
                self._encoder(rng, f"{g}.{i}")
        for g, _ in self._per_lang("modular_attn", share):
            for m in ("v", "s"):
                self._add(g, f"w_{m}", rng.normal(0, 1.0 / np.sqrt(c.d), c.d))
        bound = 1.0 / np.sqrt(c.conv_kernel)
        for g, _ in self._per_lang("convse", not c.per_language_convse):
            self._add(g, "start", rng.uniform(-bound, bound, c.conv_kernel))
            self._add(g, "end", rng.uniform(-bound, bound, c.conv_kernel))

    # resolution ------------------------------------------------------------

    def _group(self, base, lang, shared):
        return base if shared else f"{base}.{lang}"

    def _check_lang(self, lang):
        if lang not in self.config.languages:
            raise ConfigError(f"language {lang!r} not in model languages {self.config.languages}")

    def encoder(self, kind: str, lang=None, index=0) -> SelfEncoder:
        """``kind`` is ``query``, ``video`` or ``subtitle``."""
        if kind == "video":
            group = f"video_encoder.{index}"
        else:
            self._check_lang(lang)
            group = self._group(f"{kind}_encoder", lang, self.config.share_encoders)
            if kind == "subtitle":
                group = f"{group}.{index}"
        p = self.params
        return SelfEncoder(*(p[f"{group}.{n}"] for n in (
            "attn.q.w", "attn.q.b", "attn.k.w", "attn.v.w", "attn.v.b",
            "attn.o.w", "attn.o.b", "ff.w", "ff.b", "ln.gain", "ln.bias")),
            n_heads=self.config.n_heads)

    def text_proj(self, lang):
        self._check_lang(lang)
        return self.params[f"text_proj.{lang}.w"], self.params[f"text_proj.{lang}.b"]

    def video_proj(self):
        return self.params["video_proj.w"], self.params["video_proj.b"]

    def modular_attn(self, lang):
        self._check_lang(lang)
        g = self._group("modular_attn", lang, self.config.share_encoders)
        p = self.params
        return {m: p[f"{g}.w_{m}"] for m in ("v", "s")}

    def convse_kernels(self, lang):
        self._check_lang(lang)
        g = self._group("convse", lang, not self.config.per_language_convse)
        return self.params[f"{g}.start"], self.params[f"{g}.end"]

    def language_branch(self, lang):
        """Every parameter tensor a forward pass in ``lang`` touches."""
        used = [*self.text_proj(lang), *self.video_proj(), self.params["pos_embed.table"]]
        used += self.encoder("query", lang).parameters()
        for i in range(2):
            used += self.encoder("video", index=i).parameters()
            used += self.encoder("subtitle", lang, i).parameters()
        used += list(self.modular_attn(lang).values())
        used += list(self.convse_kernels(lang))
        return used

    # bookkeeping -------------------------------------------------------------

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def param_count(self):
        return int(sum(t.data.size for t in self.params.values()))

    def group_names(self):
        return sorted(set(self.groups.values()))

    def astype(self, dtype) -> "ModelParams":
        cfg = ModelConfig.from_dict({**self.config.to_dict(), "dtype": np.dtype(dtype).name})
        out = ModelParams(cfg, init=False)
        for name, t in self.params.items():
            out.params[name] = Tensor(t.data.astype(dtype), requires_grad=True, name=name)
            out.groups[name] = self.groups[name]
        return out

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise ConfigError(f"state dict keys differ from model: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: shape {v.shape} vs model {self.params[k].shape}")
            self.params[k].data = np.asarray(v, dtype=self.dtype).copy()


def group_of(name: str) -> str:
    """Parameter group: the registry name minus its within-module suffix."""
    for marker in (".attn.", ".ff.", ".ln."):
        if marker in name:
            return name.split(marker)[0]
    return name.rsplit(".", 1)[0]


# forward ----------------------------------------------------------------------

def embed_input(raw: Tensor, proj, positions: Tensor, offset=0, limit=None) -> Tensor:
    """raw @ W + b + PE[offset : offset + n] for raw of shape (..., n, d_raw)."""
    w, b = proj
    n = raw.shape[-2]
    limit = positions.shape[0] - offset if limit is None else limit
    if n > limit:
        raise ShapeError(f"sequence length {n} exceeds positional table size {limit}")
    if raw.shape[-1] != w.shape[0]:
        raise ShapeError(f"feature dim {raw.shape[-1]} does not match projection input {w.shape[0]}")
    pe = nm.take(positions, slice(offset, offset + n))
    return nm.add(nm.linear(raw, w, b), pe)


def self_attention(x: Tensor, enc: SelfEncoder, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    ctx, att = nm.multi_head_attention(x, enc.wq, enc.bq, enc.wk, enc.wv, enc.bv, mask, enc.n_heads)
    return nm.linear(ctx, enc.wo, enc.bo), att


def self_encode(x: Tensor, enc: SelfEncoder, mask=None) -> Tensor:
    """LayerNorm(x + Linear(SelfAttn(x))) with padded rows zeroed."""
    if mask is None:
        mask = np.ones(x.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise ShapeError(f"mask shape {mask.shape} does not match input {x.shape}")
    if not mask.any(-1).all():
        raise ShapeError("self_encode: empty sequence (all positions masked)")
    attn, _ = self_attention(x, enc, mask)
    out = nm.layer_norm(nm.add(x, nm.linear(attn, enc.w_ff, enc.b_ff)), enc.ln_gain, enc.ln_bias)
    return nm.mul(out, mask[..., None].astype(out.dtype))


def modular_attention(H: Tensor, mask, w: Tensor, b=None) -> tuple[Tensor, Tensor]:
    """Convex pooling over positions: softmax(H @ w + b) weighted sum of rows.

    The model registers no ``b``: a scalar shared by all positions cancels in
    the softmax.
    """
    logits = nm.reshape(nm.matmul(H, nm.reshape(w, (-1, 1))), H.shape[:-1])
    if b is not None:
        logits = nm.add(logits, b)
    a = nm.softmax(logits, axis=-1, mask=mask)
    row = nm.reshape(a, (*a.shape[:-1], 1, a.shape[-1]))
    pooled = nm.reshape(nm.matmul(row, H), (*H.shape[:-2], H.shape[-1]))
    return pooled, a


def _as_batch(x, mask):
    x = nm.as_tensor(x)
    single = x.ndim == 2
    if single:
        x = nm.reshape(x, (1, *x.shape))
        mask = None if mask is None else np.asarray(mask, dtype=bool)[None]
    if mask is None:
        mask = np.ones(x.shape[:-1], dtype=bool)
    return x, np.asarray(mask, dtype=bool), single


def encode_query(params: ModelParams, tokens, lang, mask=None) -> ModularQueryEmbedding:
    """Query tokens (l_q, d_t) or (B, l_q, d_t) -> two pooled query vectors."""
    c = params.config
    x, mask, single = _as_batch(tokens, mask)
    if x.shape[-2] == 0 or not mask.any(-1).all():
        raise ShapeError("encode_query: empty query")
    x = Tensor(x.data.astype(params.dtype, copy=False))
    E = embed_input(x, params.text_proj(lang), params.params["pos_embed.table"],
                    offset=c.l_max, limit=c.lq_max)
    H = self_encode(E, params.encoder("query", lang), mask)
    out, weights = {}, {}
    for m, w in params.modular_attn(lang).items():
        out[m], weights[m] = modular_attention(H, mask, w)
        if single:
            out[m] = nm.reshape(out[m], (c.d,))
            weights[m] = nm.reshape(weights[m], (weights[m].shape[-1],))
    return ModularQueryEmbedding(out["v"], out["s"], lang, weights)


def encode_video_context(params: ModelParams, video_feats, subtitle_feats: dict,
                         mask=None, video_ids=None) -> EncodedContext:
    """Two stacked Self-Encoders per modality; subtitle encoders shared across languages."""
    c = params.config
    mods = c.modalities
    ref = video_feats if "v" in mods else next(iter(subtitle_feats.values()))
    ref = nm.as_tensor(ref)
    single = ref.ndim == 2
    lead = ref.shape[:-1]
    if lead[-1] == 0:
        raise ShapeError("encode_video_context: video has zero clips")
    if mask is None:
        mask = np.ones(lead if not single else (1, *lead), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if single and mask.ndim == 1:
        mask = mask[None]
    if not mask.any(-1).all():
        raise ShapeError("encode_video_context: video has zero clips")
    pe = params.params["pos_embed.table"]

    def prep(feats, name):
        t = nm.as_tensor(feats)
        if t.shape[:-1] != lead:
            raise ShapeError(f"alignment: {name} has {t.shape[:-1]} clips, expected {lead}")
        if single:
            t = nm.reshape(t, (1, *t.shape))
        return Tensor(t.data.astype(params.dtype, copy=False))

    def two_stage(x, enc0, enc1):
        h1 = self_encode(x, enc0, mask)
        return h1, self_encode(h1, enc1, mask)

    Hv_vr = Hv_mr = None
    if "v" in mods:
        x = embed_input(prep(video_feats, "video"), params.video_proj(), pe, 0, c.l_max)
        Hv_vr, Hv_mr = two_stage(x, params.encoder("video", index=0), params.encoder("video", index=1))
    Hs_vr, Hs_mr = {}, {}
    if "s" in mods:
        for lang, feats in subtitle_feats.items():
            x = embed_input(prep(feats, f"subtitle[{lang}]"), params.text_proj(lang), pe, 0, c.l_max)
            Hs_vr[lang], Hs_mr[lang] = two_stage(
                x, params.encoder("subtitle", lang, 0), params.encoder("subtitle", lang, 1))
    return EncodedContext(Hv_vr, Hv_mr, Hs_vr, Hs_mr, mask, list(video_ids or []))


# checkpoint -------------------------------------------------------------------

CKPT_MAGIC = b"MXML"
CKPT_VERSION = 1


def save_checkpoint(params: ModelParams, path, extra=None):
    """MXML | u16 version | u32 len + JSON config | u32 count | named float32 blobs."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    header = json.dumps({"config": params.config.to_dict(), "extra": extra or {}},
                        sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(params.params)))
    for name, t in params.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    blob = Path(path).read_bytes()
    pos = 0

    def read(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"checkpoint truncated: need {n} bytes, {len(blob) - pos} left", pos)
        out = blob[pos:pos + n]
        pos += n
        return out

    if read(4) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (version,) = struct.unpack("<H", read(2))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (hlen,) = struct.unpack("<I", read(4))
    header = json.loads(read(hlen).decode("utf-8"))
    config = ModelConfig.from_dict({**header["config"], "dtype": "float32"})
    params = ModelParams(config, init=False)
    (count,) = struct.unpack("<I", read(4))
    for _ in range(count):
        (nlen,) = struct.unpack("<H", read(2))
        name = read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", read(1))
        shape = struct.unpack(f"<{ndim}I", read(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(read(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        params.params[name] = Tensor(data, requires_grad=True, name=name)
        params.groups[name] = group_of(name)
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after checkpoint payload", pos)
    expected = {n: t.shape for n, t in ModelParams(config).params.items()}
    found = {n: t.shape for n, t in params.params.items()}
    if expected != found:
        diff = sorted(set(expected) ^ set(found)) or sorted(n for n in expected if expected[n] != found[n])
        raise FormatError(f"checkpoint parameters do not match its config: {diff[:5]}")
    return params, header.get("extra", {})
