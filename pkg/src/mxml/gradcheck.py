"""Finite-difference audit of the full training loss, grouped by parameter module."""
from __future__ import annotations

import numpy as np

from . import numeric as nm
from .dataio import Batch
from .model import ModelConfig, ModelParams
from .objectives import LossSettings, total_loss

TOLERANCE = 1e-4


def toy_batch(seed, b=4, l=6, lq=5, d_v=6, d_t=6, languages=("en", "zh")) -> Batch:
    """Random paired batch: b queries over b distinct videos with ragged lengths."""
    rng = np.random.default_rng(seed)
    lengths = [l] + list(rng.integers(max(2, l - 2), l + 1, size=b - 1))
    clip_mask = np.arange(l)[None, :] < np.asarray(lengths)[:, None]
    qlens = {lang: [lq] + list(rng.integers(2, lq + 1, size=b - 1)) for lang in languages}
    gt_st, gt_ed = [], []
    for n in lengths:
        s = int(rng.integers(0, n))
        gt_st.append(s)
        gt_ed.append(int(rng.integers(s, n)))
    z = lambda *shape: rng.normal(0, 1, shape)
    return Batch(
        pair_ids=[f"p{i}" for i in range(b)],
        query_ids={lang: [f"p{i}.{lang}" for i in range(b)] for lang in languages},
        tokens={lang: z(b, lq, d_t) for lang in languages},
        token_mask={lang: np.arange(lq)[None, :] < np.asarray(qlens[lang])[:, None] for lang in languages},
        video_ids=[f"v{i}" for i in range(b)],
        video=z(b, l, d_v) * clip_mask[..., None],
        subs={lang: z(b, l, d_t) * clip_mask[..., None] for lang in languages},
        clip_mask=clip_mask,
        vid_index=np.arange(b),
        gt_st=np.asarray(gt_st), gt_ed=np.asarray(gt_ed),
        qtypes=["video+sub"] * b,
    )


def run_gradcheck(seed=0, d=8, l=6, lq=5, b=4, share_encoders=True, eps=1e-4, settings=None):
    """Max relative error per parameter group for total_loss in float64."""
    cfg = ModelConfig(d=d, d_v=6, d_t=6, l_max=l, lq_max=lq, n_heads=4, conv_kernel=5,
                      share_encoders=share_encoders, dtype="float64", seed=seed)
    params = ModelParams(cfg)
    # Perturb the zero-initialised biases so every adjoint path carries signal.
    rng = np.random.default_rng(seed + 1)
    for t in params.parameters():
        t.data = t.data + rng.normal(0, 0.1, t.shape)
    batch = toy_batch(seed, b, l, lq, cfg.d_v, cfg.d_t, cfg.languages)
    settings = settings or LossSettings()
    f = lambda: total_loss(params, batch, np.random.default_rng(seed), settings).total
    names = [n for n, _ in params.named_parameters()]
    _, per_param = nm.grad_check(f, params.parameters(), eps=eps, return_per_param=True, replay=True)
    groups = {}
    for name, err in zip(names, per_param):
        g = params.groups[name]
        groups[g] = max(groups.get(g, 0.0), err)
    return dict(sorted(groups.items()))
