import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mxml import numeric as nm
from mxml.errors import ConfigError, FormatError, ShapeError
from mxml.model import (ModelConfig, ModelParams, embed_input, encode_query, encode_video_context,
                        group_of, load_checkpoint, modular_attention, save_checkpoint, self_attention,
                        self_encode)
from mxml.numeric import GradTape, Tensor


def small(**kw):
    base = dict(d=8, d_v=5, d_t=6, l_max=10, lq_max=6, n_heads=2, dtype="float64", seed=0)
    base.update(kw)
    return ModelParams(ModelConfig(**base))


def contexts(rng, params, l=5, n=2):
    c = params.config
    video = rng.normal(size=(n, l, c.d_v))
    subs = {lang: rng.normal(size=(n, l, c.d_t)) for lang in c.languages}
    return video, subs


# config ---------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(d=10, n_heads=4), dict(conv_kernel=4), dict(clip_seconds=0),
                                dict(inputs="audio"), dict(languages=("en", "en")), dict(dtype="int8")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_config_dict_round_trip():
    c = ModelConfig(d=16, languages=("en", "zh"), share_encoders=False)
    assert ModelConfig.from_dict(c.to_dict()) == c


# embed_input ------------------------------------------------------------------

def test_embed_zero_input_gives_positional_rows():
    p = small()
    w, b = p.text_proj("en")
    b.data[:] = 0
    pe = p.params["pos_embed.table"]
    out = embed_input(Tensor(np.zeros((4, 6))), (w, b), pe)
    np.testing.assert_array_equal(out.data, pe.data[:4])


def test_embed_single_row(rng):
    p = small()
    w, b = p.video_proj()
    pe = p.params["pos_embed.table"]
    raw = rng.normal(size=(1, 5))
    out = embed_input(Tensor(raw), (w, b), pe)
    np.testing.assert_allclose(out.data, raw @ w.data + b.data + pe.data[:1])


def test_embed_query_offset_uses_query_rows(rng):
    p = small()
    pe = p.params["pos_embed.table"]
    out = embed_input(Tensor(np.zeros((2, 6))), p.text_proj("en"), pe, offset=10, limit=6)
    np.testing.assert_allclose(out.data, pe.data[10:12] + p.text_proj("en")[1].data)


def test_embed_too_long_is_length_error():
    p = small()
    with pytest.raises(ShapeError, match="exceeds"):
        embed_input(Tensor(np.zeros((11, 5))), p.video_proj(), p.params["pos_embed.table"], 0, 10)


@given(st.integers(1, 10))
def test_embed_shape_and_finite(n):
    p = small()
    out = embed_input(Tensor(np.random.default_rng(n).normal(size=(n, 5))), p.video_proj(),
                      p.params["pos_embed.table"], 0, 10)
    assert out.shape == (n, 8) and np.isfinite(out.data).all()


# self_encode ------------------------------------------------------------------

def test_singleton_attends_to_itself(rng):
    p = small()
    _, att = self_attention(Tensor(rng.normal(size=(1, 8))), p.encoder("query", "en"), np.ones(1, bool))
    np.testing.assert_array_equal(att, np.ones((2, 1, 1)))


def test_padded_rows_are_zero(rng):
    p = small()
    mask = np.array([True, True, True, False, False])
    out = self_encode(Tensor(rng.normal(size=(5, 8))), p.encoder("video", index=0), mask)
    assert not out.data[3:].any()
    assert np.abs(out.data[:3]).sum() > 0


def test_padding_does_not_change_valid_rows(rng):
    p = small()
    x = rng.normal(size=(5, 8))
    enc = p.encoder("video", index=0)
    short = self_encode(Tensor(x[:3]), enc).data
    padded = self_encode(Tensor(np.concatenate([x[:3], 99 * np.ones((2, 8))])), enc,
                         np.array([1, 1, 1, 0, 0], bool)).data
    np.testing.assert_allclose(padded[:3], short, atol=1e-12)


def test_permutation_equivariance(rng):
    p = small()
    enc = p.encoder("video", index=0)
    raw = rng.normal(size=(4, 5))
    pe = p.params["pos_embed.table"]
    perm = np.array([2, 0, 3, 1])
    x = embed_input(Tensor(raw), p.video_proj(), pe, 0, 10)
    pe_perm = Tensor(pe.data.copy())
    pe_perm.data[:4] = pe.data[:4][perm]
    x_perm = embed_input(Tensor(raw[perm]), p.video_proj(), pe_perm, 0, 10)
    np.testing.assert_allclose(self_encode(x_perm, enc).data, self_encode(x, enc).data[perm], atol=1e-12)


def test_all_masked_is_error(rng):
    p = small()
    with pytest.raises(ShapeError, match="empty"):
        self_encode(Tensor(rng.normal(size=(3, 8))), p.encoder("video", index=0), np.zeros(3, bool))


def test_residual_wiring_reduces_to_layer_norm(rng):
    p = small()
    enc = p.encoder("video", index=0)
    for t in (enc.wo, enc.bo, enc.w_ff, enc.b_ff):
        t.data[:] = 0
    x = Tensor(rng.normal(size=(4, 8)))
    np.testing.assert_allclose(self_encode(x, enc).data,
                               nm.layer_norm(x, enc.ln_gain, enc.ln_bias).data, atol=1e-12)


def test_self_encode_shape_preserved(rng):
    p = small()
    x = Tensor(rng.normal(size=(3, 5, 8)))
    assert self_encode(x, p.encoder("query", "zh"), np.ones((3, 5), bool)).shape == (3, 5, 8)


# modular attention and queries -----------------------------------------------

def test_single_token_query_pools_to_that_row(rng):
    p = small()
    q = encode_query(p, rng.normal(size=(1, 6)), "en")
    np.testing.assert_array_equal(q.q_v.data, q.q_s.data)
    x = embed_input(Tensor(rng.normal(size=(1, 6))), p.text_proj("en"), p.params["pos_embed.table"], 10, 6)
    assert q.q_v.shape == (8,)


def test_query_attention_weights_sum_to_one(rng):
    p = small()
    q = encode_query(p, rng.normal(size=(5, 6)), "zh")
    for m in ("v", "s"):
        assert abs(q.weights[m].data.sum() - 1) < 1e-6
        assert (q.weights[m].data >= 0).all()


def test_equal_modular_weights_give_equal_vectors(rng):
    p = small()
    p.params["modular_attn.w_s"].data[:] = p.params["modular_attn.w_v"].data
    q = encode_query(p, rng.normal(size=(4, 6)), "en")
    np.testing.assert_array_equal(q.q_v.data, q.q_s.data)


def test_modular_attention_bias_cancels(rng):
    H = Tensor(rng.normal(size=(5, 8)))
    w = Tensor(rng.normal(size=8))
    a, _ = modular_attention(H, np.ones(5, bool), w)
    b, _ = modular_attention(H, np.ones(5, bool), w, Tensor(np.array(3.7)))
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_empty_query_is_error():
    p = small()
    with pytest.raises(ShapeError):
        encode_query(p, np.zeros((0, 6)), "en")


def test_unknown_language_is_config_error(rng):
    with pytest.raises(ConfigError):
        encode_query(small(), rng.normal(size=(3, 6)), "fr")


def test_batched_query_matches_single(rng):
    p = small()
    tokens = rng.normal(size=(2, 4, 6))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], bool)
    batched = encode_query(p, tokens, "en", mask)
    one = encode_query(p, tokens[1, :2], "en")
    np.testing.assert_allclose(batched.q_v.data[1], one.q_v.data, atol=1e-12)


# video context ----------------------------------------------------------------

def test_context_shapes(rng):
    p = small()
    video, subs = contexts(rng, p)
    ctx = encode_video_context(p, video, subs)
    for t in (ctx.H_v_vr, ctx.H_v_mr, *ctx.H_s_vr.values(), *ctx.H_s_mr.values()):
        assert t.shape == (2, 5, 8)


def test_single_video_context(rng):
    p = small()
    video, subs = contexts(rng, p, n=1)
    ctx = encode_video_context(p, video[0], {k: v[0] for k, v in subs.items()})
    assert ctx.H_v_vr.shape == (1, 5, 8)


def test_context_is_deterministic(rng):
    p = small()
    video, subs = contexts(rng, p)
    a = encode_video_context(p, video, subs)
    b = encode_video_context(p, video, subs)
    assert np.array_equal(a.H_s_mr["zh"].data, b.H_s_mr["zh"].data)


def test_alignment_error(rng):
    p = small()
    video, subs = contexts(rng, p)
    subs["zh"] = subs["zh"][:, :4]
    with pytest.raises(ShapeError, match="alignment"):
        encode_video_context(p, video, subs)


def test_zero_clips_error():
    p = small()
    with pytest.raises(ShapeError):
        encode_video_context(p, np.zeros((1, 0, 5)), {"en": np.zeros((1, 0, 6)), "zh": np.zeros((1, 0, 6))})


def test_video_only_inputs_skip_subtitles(rng):
    p = small(inputs="video")
    video, subs = contexts(rng, p)
    ctx = encode_video_context(p, video, subs)
    assert ctx.H_s_vr == {} and ctx.H_v_vr is not None


# sharing --------------------------------------------------------------------

def test_shared_encoders_resolve_to_identical_objects():
    p = small()
    for kind in ("query", "subtitle"):
        en, zh = p.encoder(kind, "en"), p.encoder(kind, "zh")
        assert all(a is b for a, b in zip(en.parameters(), zh.parameters()))
    assert p.modular_attn("en")["v"] is p.modular_attn("zh")["v"]
    assert p.text_proj("en")[0] is not p.text_proj("zh")[0]


def test_language_branches_touch_same_encoder_entries():
    p = small()
    en = {id(t) for t in p.language_branch("en")}
    zh = {id(t) for t in p.language_branch("zh")}
    proj = {id(t) for lang in ("en", "zh") for t in p.text_proj(lang)}
    assert en - proj == zh - proj


def test_unshared_encoders_are_distinct():
    p = small(share_encoders=False)
    assert p.encoder("query", "en").wq is not p.encoder("query", "zh").wq
    assert p.encoder("subtitle", "en", 1).wq is not p.encoder("subtitle", "zh", 1).wq


def test_update_through_chinese_branch_moves_english_output(rng):
    p = small()
    tokens_en, tokens_zh = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    before = encode_query(p, tokens_en, "en").q_v.data.copy()
    enc = p.encoder("query", "zh")
    with GradTape() as tape:
        loss = nm.tsum(encode_query(p, tokens_zh, "zh").q_v)
    for t, g in zip(enc.parameters(), tape.gradient(loss, enc.parameters())):
        t.data = t.data - 0.1 * g
    after = encode_query(p, tokens_en, "en").q_v.data
    assert not np.allclose(before, after)


@given(st.sampled_from([8, 16, 32]), st.integers(1, 64), st.integers(1, 64), st.booleans())
def test_shared_bilingual_is_less_than_two_monolinguals(d, d_v, d_t, per_lang_conv):
    kw = dict(d=d, d_v=d_v, d_t=d_t, l_max=8, lq_max=4, per_language_convse=per_lang_conv)
    bi = ModelParams(ModelConfig(languages=("en", "zh"), **kw)).param_count()
    mono = ModelParams(ModelConfig(languages=("en",), **kw)).param_count()
    assert bi < 2 * mono


def test_unshared_bilingual_is_larger_than_shared():
    assert small(share_encoders=False).param_count() > small().param_count()


def test_groups_cover_every_parameter():
    p = small()
    assert set(p.groups) == set(p.params)
    assert "query_encoder" in p.group_names() and "subtitle_encoder.1" in p.group_names()
    assert group_of("subtitle_encoder.zh.0.attn.q.w") == "subtitle_encoder.zh.0"
    assert group_of("text_proj.en.w") == "text_proj.en"


def test_no_inert_biases_are_registered():
    names = small().params
    assert not any(n.endswith("attn.k.b") for n in names)
    assert not any(n.startswith("modular_attn") and ".b_" in n for n in names)


# checkpoint -------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    p = ModelParams(ModelConfig(d=8, d_v=5, d_t=6, l_max=10, lq_max=6, seed=4))
    save_checkpoint(p, tmp_path / "m.mxml", {"note": "x"})
    q, extra = load_checkpoint(tmp_path / "m.mxml")
    assert extra == {"note": "x"}
    assert q.config == p.config
    for n, t in p.params.items():
        assert q.params[n].data.tobytes() == t.data.tobytes()
    save_checkpoint(q, tmp_path / "again.mxml", {"note": "x"})
    assert (tmp_path / "m.mxml").read_bytes() == (tmp_path / "again.mxml").read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "x")


def test_checkpoint_truncated(tmp_path):
    p = ModelParams(ModelConfig(d=8, d_v=5, d_t=6, l_max=10, lq_max=6))
    save_checkpoint(p, tmp_path / "m.mxml")
    blob = (tmp_path / "m.mxml").read_bytes()
    (tmp_path / "t.mxml").write_bytes(blob[:-7])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(tmp_path / "t.mxml")


def test_checkpoint_params_must_match_config(tmp_path):
    p = ModelParams(ModelConfig(d=8, d_v=5, d_t=6, l_max=10, lq_max=6))
    del p.params["convse.end"]
    save_checkpoint(p, tmp_path / "m.mxml")
    with pytest.raises(FormatError, match="convse.end"):
        load_checkpoint(tmp_path / "m.mxml")
