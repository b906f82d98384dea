"""Full classifier: scaled input convolution, a stack of gated SSM
blocks, per-timestep classifier and length-aware aggregation.

The input conv kernel width follows k = max(k_min, floor(seq_ratio * L)),
capped at L, so longer series get a wider receptive field.  Aggregation
modes: multi-head adaptive pooling (default), full (flattened affine
readout, equal-length data only), avg, max, last.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import block as blk
from . import rng as rngmod
from .block import BlockParams
from .errors import DataError
from .ssm import SsmParams, inv_softplus


def kernel_size(length, seq_ratio=0.02, k_min=3):
    """Input conv width for series of length ``length``, capped at length."""
    if length < 1:
        raise ValueError("length must be >= 1")
    return min(max(k_min, int(seq_ratio * length)), length)


@dataclass
class ModelParams:
    conv_in_w: np.ndarray          # [d_m, d_x, k]
    conv_in_b: np.ndarray          # [d_m]
    blocks: list                   # depth x BlockParams
    clf_w: np.ndarray              # [d_m, d_y]
    clf_b: np.ndarray              # [d_y]
    gate_w: np.ndarray             # [n_heads, d_m]
    gate_b: np.ndarray             # [n_heads]
    full_w: np.ndarray | None = None   # [max_len * d_m, d_y], full mode only
    full_b: np.ndarray | None = None   # [d_y]

    def flat(self):
        """Name -> array views in a fixed order (shared references)."""
        out = {"conv_in.w": self.conv_in_w, "conv_in.b": self.conv_in_b}
        for i, bp in enumerate(self.blocks):
            pre = f"blocks.{i}."
            out[pre + "w_in"] = bp.w_in
            out[pre + "conv_k"] = bp.conv_k
            out[pre + "conv_b"] = bp.conv_b
            out[pre + "w_out"] = bp.w_out
            out[pre + "norm_gamma"] = bp.norm_gamma
            for name in ("a_log", "d", "dt_raw", "w_dt1", "w_dt2", "b_dt",
                         "b_ti", "w_b", "c_ti", "w_c"):
                out[pre + "ssm." + name] = getattr(bp.ssm, name)
        out["clf.w"] = self.clf_w
        out["clf.b"] = self.clf_b
        out["gates.w"] = self.gate_w
        out["gates.b"] = self.gate_b
        if self.full_w is not None:
            out["full.w"] = self.full_w
            out["full.b"] = self.full_b
        return out

    def zeros_like(self):
        return ModelParams(
            conv_in_w=np.zeros_like(self.conv_in_w),
            conv_in_b=np.zeros_like(self.conv_in_b),
            blocks=[bp.zeros_like() for bp in self.blocks],
            clf_w=np.zeros_like(self.clf_w),
            clf_b=np.zeros_like(self.clf_b),
            gate_w=np.zeros_like(self.gate_w),
            gate_b=np.zeros_like(self.gate_b),
            full_w=None if self.full_w is None else np.zeros_like(self.full_w),
            full_b=None if self.full_b is None else np.zeros_like(self.full_b),
        )

    def astype(self, dtype):
        return _retype(self, dtype)

    @property
    def k(self):
        return self.conv_in_w.shape[2]


def _retype(params, dtype):
    def conv(a):
        return None if a is None else a.astype(dtype)
    return ModelParams(
        conv_in_w=conv(params.conv_in_w),
        conv_in_b=conv(params.conv_in_b),
        blocks=[BlockParams(
            w_in=conv(bp.w_in), conv_k=conv(bp.conv_k), conv_b=conv(bp.conv_b),
            w_out=conv(bp.w_out), norm_gamma=conv(bp.norm_gamma),
            ssm=SsmParams(**{f.name: conv(getattr(bp.ssm, f.name))
                             for f in dataclasses.fields(SsmParams)}),
        ) for bp in params.blocks],
        clf_w=conv(params.clf_w), clf_b=conv(params.clf_b),
        gate_w=conv(params.gate_w), gate_b=conv(params.gate_b),
        full_w=conv(params.full_w), full_b=conv(params.full_b),
    )


def resolved_kernel(cfg, max_len):
    k = cfg.fixed_k if cfg.fixed_k is not None else kernel_size(
        max_len, cfg.seq_ratio, cfg.k_min)
    return min(k, max_len)


def empty_params(cfg, max_len, dtype=np.float64):
    """Zero-valued parameter arrays of the right shapes (the single
    source of shape truth for init and checkpoint loading)."""
    j = cfg.d_inner
    n = cfg.ssm.d_state
    r = cfg.ssm.resolve_rank(j)
    k = resolved_kernel(cfg, max_len)
    ja = 1 if cfg.ssm.share_a else j
    z = lambda *shape: np.zeros(shape, dtype=dtype)  # noqa: E731
    blocks = [BlockParams(
        w_in=z(cfg.d_m, 2 * j), conv_k=z(j, cfg.block.d_conv), conv_b=z(j),
        w_out=z(j, cfg.d_m), norm_gamma=z(cfg.d_m),
        ssm=SsmParams(a_log=z(ja, n), d=z(j), dt_raw=z(j), w_dt1=z(j, r),
                      w_dt2=z(r, j), b_dt=z(j), b_ti=z(j, n), w_b=z(j, n),
                      c_ti=z(j, n), w_c=z(j, n)),
    ) for _ in range(cfg.depth)]
    full_w = full_b = None
    if cfg.aggregation == "full":
        full_w = z(max_len * cfg.d_m, cfg.d_y)
        full_b = z(cfg.d_y)
    return ModelParams(
        conv_in_w=z(cfg.d_m, cfg.d_x, k), conv_in_b=z(cfg.d_m), blocks=blocks,
        clf_w=z(cfg.d_m, cfg.d_y), clf_b=z(cfg.d_y),
        gate_w=z(cfg.n_heads, cfg.d_m), gate_b=z(cfg.n_heads),
        full_w=full_w, full_b=full_b)


def init_params(cfg, max_len, seed, dtype=np.float32):
    """Draw initial parameters; deterministic in (cfg, max_len, seed).

    Step sizes start with softplus outputs uniform in [0.001, 0.1]; the
    state matrix rows are -exp(log(1..d_state)); gates start at zero so
    adaptive pooling begins as exact averaging.
    """
    gen = rngmod.stream(seed, rngmod.STREAM_INIT)
    j = cfg.d_inner
    n = cfg.ssm.d_state
    r = cfg.ssm.resolve_rank(j)
    k = resolved_kernel(cfg, max_len)
    params = empty_params(cfg, max_len, dtype=np.float64)

    def unif(bound, *shape):
        return gen.uniform(-bound, bound, size=shape)

    def kaiming(fan_in, *shape):
        return unif(np.sqrt(6.0 / fan_in), *shape)

    def dt_bias(size):
        return inv_softplus(gen.uniform(0.001, 0.1, size=size))

    params.conv_in_w[...] = kaiming(cfg.d_x * k, cfg.d_m, cfg.d_x, k)
    for bp in params.blocks:
        bp.w_in[...] = kaiming(cfg.d_m, cfg.d_m, 2 * j)
        bp.conv_k[...] = unif(1.0 / np.sqrt(cfg.block.d_conv), j, cfg.block.d_conv)
        bp.w_out[...] = kaiming(j, j, cfg.d_m)
        bp.norm_gamma[...] = 1.0
        s = bp.ssm
        s.a_log[...] = np.log(np.arange(1, n + 1, dtype=float))
        s.d[...] = 1.0
        s.dt_raw[...] = dt_bias(j)
        s.w_dt1[...] = kaiming(j, j, r)
        s.w_dt2[...] = unif(r ** -0.5, r, j)
        s.b_dt[...] = dt_bias(j)
        s.b_ti[...] = 1.0
        s.w_b[...] = kaiming(j, j, n)
        s.c_ti[...] = gen.standard_normal((j, n))
        s.w_c[...] = kaiming(j, j, n)
    params.clf_w[...] = kaiming(cfg.d_m, cfg.d_m, cfg.d_y)
    if cfg.aggregation == "full":
        params.full_w[...] = kaiming(max_len * cfg.d_m, max_len * cfg.d_m, cfg.d_y)
    return _retype(params, dtype)


def active_param_names(cfg):
    """Names of the tensors the forward pass actually reads."""
    names = ["conv_in.w", "conv_in.b"]
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        names += [pre + "w_in", pre + "conv_k", pre + "conv_b", pre + "w_out"]
        if cfg.block.use_norm:
            names.append(pre + "norm_gamma")
        names.append(pre + "ssm.a_log")
        if cfg.ssm.use_d:
            names.append(pre + "ssm.d")
        if cfg.ssm.theta_dt:
            names += [pre + "ssm.w_dt1", pre + "ssm.w_dt2", pre + "ssm.b_dt"]
        else:
            names.append(pre + "ssm.dt_raw")
        names.append(pre + "ssm.w_b" if cfg.ssm.theta_b else pre + "ssm.b_ti")
        names.append(pre + "ssm.w_c" if cfg.ssm.theta_c else pre + "ssm.c_ti")
    if cfg.aggregation == "full":
        names += ["full.w", "full.b"]
    else:
        names += ["clf.w", "clf.b"]
    if cfg.aggregation == "adaptive":
        names += ["gates.w", "gates.b"]
    return names


def param_count(cfg, k, max_len=None):
    """Closed-form count of the active parameters.

    conv (d_m*d_x*k + d_m) + depth * per-block + readout + gates; the
    step-size path contributes J*(2R+1) when time-variant and J when
    time-invariant, while the B/C maps are J*N either way.
    """
    j = cfg.d_inner
    n = cfg.ssm.d_state
    r = cfg.ssm.resolve_rank(j)
    total = cfg.d_m * cfg.d_x * k + cfg.d_m
    per_block = cfg.d_m * 2 * j + j * cfg.block.d_conv + j + j * cfg.d_m
    if cfg.block.use_norm:
        per_block += cfg.d_m
    per_block += (1 if cfg.ssm.share_a else j) * n
    if cfg.ssm.use_d:
        per_block += j
    per_block += (2 * j * r + j) if cfg.ssm.theta_dt else j
    per_block += 2 * j * n
    total += cfg.depth * per_block
    if cfg.aggregation == "full":
        if max_len is None:
            raise ValueError("full aggregation count needs max_len")
        total += max_len * cfg.d_m * cfg.d_y + cfg.d_y
    else:
        total += cfg.d_m * cfg.d_y + cfg.d_y
    if cfg.aggregation == "adaptive":
        total += cfg.n_heads * (cfg.d_m + 1)
    return total


def input_projection(x, w, b, lengths):
    """Causal conv d_x -> d_m with left zero padding of k-1 steps.

    x: [B, L, d_x]; w: [d_m, d_x, k] with tap k-1 on the current step.
    Rows at t >= lengths[b] come out zero.
    """
    b_sz, seq, _ = x.shape
    k = w.shape[2]
    xp = np.concatenate(
        [np.zeros((b_sz, k - 1, x.shape[2]), dtype=x.dtype), x], axis=1)
    y = np.broadcast_to(b, (b_sz, seq, w.shape[0])).copy()
    for i in range(k):
        y += xp[:, i:i + seq] @ w[:, :, i].T
    mask = np.arange(seq)[None, :] < np.asarray(lengths)[:, None]
    return np.where(mask[:, :, None], y, 0.0)


def _input_projection_backward(x, w, mask, dy):
    b_sz, seq, _ = x.shape
    k = w.shape[2]
    dy = np.where(mask[:, :, None], dy, 0.0)
    xp = np.concatenate(
        [np.zeros((b_sz, k - 1, x.shape[2]), dtype=x.dtype), x], axis=1)
    dw = np.zeros_like(w)
    for i in range(k):
        dw[:, :, i] = np.einsum("blm,blc->mc", dy, xp[:, i:i + seq])
    db = dy.sum((0, 1))
    return dw, db


def adaptive_pool(f, l_t, gate_w, gate_b, mask):
    """Attention over time from max-of-heads gate scores.

    g_{t,h} = w_h . f_t + b_h; g_t = max_h g_{t,h}; alpha = softmax of g
    over valid steps (exact zeros on padding); returns (sum_t alpha_t
    l_t, alpha, argmax head indices).
    """
    if not mask.any(axis=1).all():
        raise DataError("adaptive pooling needs at least one valid step per sample")
    scores = f @ gate_w.T + gate_b                     # [B, L, H]
    heads = np.argmax(scores, axis=-1)                 # ties: lowest head
    g = np.take_along_axis(scores, heads[..., None], axis=-1)[..., 0]
    neg = np.finfo(f.dtype).min
    gm = np.where(mask, g, neg)
    e = np.exp(gm - gm.max(axis=1, keepdims=True))
    e = np.where(mask, e, 0.0)
    alpha = e / e.sum(axis=1, keepdims=True)
    out = np.einsum("bl,bly->by", alpha, l_t)
    return out, alpha, heads


def aggregate(f, l_t, mode, mask, full_w=None, full_b=None,
              gate_w=None, gate_b=None):
    """Reduce per-step logits (or features, for full mode) to one logit
    vector per sample. Returns (logits, aggregation cache dict)."""
    if mode == "adaptive":
        out, alpha, heads = adaptive_pool(f, l_t, gate_w, gate_b, mask)
        return out, {"alpha": alpha, "heads": heads}
    if mode == "avg":
        counts = mask.sum(axis=1)
        # same weighted-sum path as adaptive pooling with uniform alpha,
        # so the zero-gate reduction is bitwise exact
        alpha = mask.astype(l_t.dtype) / counts.astype(l_t.dtype)[:, None]
        out = np.einsum("bl,bly->by", alpha, l_t)
        return out, {"counts": counts}
    if mode == "max":
        neg = np.finfo(l_t.dtype).min
        masked = np.where(mask[:, :, None], l_t, neg)
        idx = masked.argmax(axis=1)                    # [B, d_y], ties: lowest t
        out = np.take_along_axis(masked, idx[:, None, :], axis=1)[:, 0]
        return out, {"idx": idx}
    if mode == "last":
        idx = mask.sum(axis=1) - 1
        out = l_t[np.arange(l_t.shape[0]), idx]
        return out, {"idx": idx}
    if mode == "full":
        if not mask.all():
            raise DataError("full aggregation requires an equal-length batch "
                            "spanning the whole padded width")
        flat = f.reshape(f.shape[0], -1)
        if full_w is None or flat.shape[1] != full_w.shape[0]:
            raise DataError("full aggregation weights do not match L * d_m")
        return flat @ full_w + full_b, {"flat": flat}
    raise ValueError(f"unknown aggregation mode {mode!r}")


@dataclass
class ForwardCache:
    x: np.ndarray
    lengths: np.ndarray
    mask: np.ndarray
    proj: np.ndarray             # input conv output
    block_caches: list
    f_pre_drop: np.ndarray
    drop_keep: np.ndarray | None
    f: np.ndarray                # block stack output after dropout
    l_t: np.ndarray | None
    agg: dict
    cfg: object
    params: ModelParams


def model_forward(x, lengths, params, cfg, train_mode=False, rng=None):
    """x: [B, L, d_x], lengths: [B]. Returns (logits [B, d_y], cache)."""
    lengths = np.asarray(lengths)
    mask = np.arange(x.shape[1])[None, :] < lengths[:, None]
    block_cfg = dataclasses.replace(cfg.block, use_block_residual=cfg.block_residual())

    h = input_projection(x, params.conv_in_w, params.conv_in_b, lengths)
    proj = h
    block_caches = []
    for bp in params.blocks:
        h, c = blk.block_forward(h, lengths, bp, block_cfg, cfg.ssm)
        block_caches.append(c)

    f_pre = h
    keep = None
    if train_mode and cfg.dropout > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng stream")
        keep = (rng.random(size=h.shape) >= cfg.dropout).astype(h.dtype)
        h = h * keep / (1.0 - cfg.dropout)

    l_t = None
    if cfg.aggregation != "full":
        l_t = h @ params.clf_w + params.clf_b
        l_t = np.where(mask[:, :, None], l_t, 0.0)
    logits, agg = aggregate(h, l_t, cfg.aggregation, mask,
                            full_w=params.full_w, full_b=params.full_b,
                            gate_w=params.gate_w, gate_b=params.gate_b)
    cache = ForwardCache(x=x, lengths=lengths, mask=mask, proj=proj,
                         block_caches=block_caches, f_pre_drop=f_pre,
                         drop_keep=keep, f=h, l_t=l_t, agg=agg,
                         cfg=cfg, params=params)
    return logits, cache


def _aggregate_backward(cache, dlogits):
    """Returns (dl_t or None, df_direct, gate/full grad contributions)."""
    cfg, params = cache.cfg, cache.params
    mask, f, l_t = cache.mask, cache.f, cache.l_t
    extras = {}
    if cfg.aggregation == "adaptive":
        alpha, heads = cache.agg["alpha"], cache.agg["heads"]
        dl_t = alpha[:, :, None] * dlogits[:, None, :]
        dalpha = np.einsum("bly,by->bl", l_t, dlogits)
        inner = (alpha * dalpha).sum(axis=1, keepdims=True)
        dg = alpha * (dalpha - inner)
        dscores = np.zeros(f.shape[:2] + (params.gate_w.shape[0],), dtype=f.dtype)
        np.put_along_axis(dscores, heads[..., None], dg[..., None], axis=-1)
        extras["gate_w"] = np.einsum("blh,blm->hm", dscores, f)
        extras["gate_b"] = dscores.sum((0, 1))
        df = dscores @ params.gate_w
        return dl_t, df, extras
    if cfg.aggregation == "avg":
        counts = cache.agg["counts"]
        dl_t = mask[:, :, None] * (dlogits / counts[:, None])[:, None, :]
        return dl_t, np.zeros_like(f), extras
    if cfg.aggregation == "max":
        idx = cache.agg["idx"]
        dl_t = np.zeros_like(l_t)
        np.put_along_axis(dl_t, idx[:, None, :], dlogits[:, None, :], axis=1)
        return dl_t, np.zeros_like(f), extras
    if cfg.aggregation == "last":
        idx = cache.agg["idx"]
        dl_t = np.zeros_like(l_t)
        dl_t[np.arange(l_t.shape[0]), idx] = dlogits
        return dl_t, np.zeros_like(f), extras
    # full
    flat = cache.agg["flat"]
    extras["full_w"] = flat.T @ dlogits
    extras["full_b"] = dlogits.sum(0)
    df = (dlogits @ params.full_w.T).reshape(f.shape)
    return None, df, extras


def model_backward(cache, dlogits):
    """Exact reverse-mode of model_forward; returns ModelParams-shaped grads."""
    cfg, params = cache.cfg, cache.params
    g = params.zeros_like()
    dl_t, df, extras = _aggregate_backward(cache, dlogits)
    if "gate_w" in extras:
        g.gate_w += extras["gate_w"]
        g.gate_b += extras["gate_b"]
    if "full_w" in extras:
        g.full_w += extras["full_w"]
        g.full_b += extras["full_b"]
    if dl_t is not None:
        dl_t = np.where(cache.mask[:, :, None], dl_t, 0.0)
        g.clf_w += np.einsum("blm,bly->my", cache.f, dl_t)
        g.clf_b += dl_t.sum((0, 1))
        df = df + dl_t @ params.clf_w.T

    if cache.drop_keep is not None:
        df = df * cache.drop_keep / (1.0 - cfg.dropout)

    for bp_cache, bg in zip(reversed(cache.block_caches), reversed(g.blocks)):
        df, got = blk.block_backward(bp_cache, df)
        for fname in ("w_in", "conv_k", "conv_b", "w_out", "norm_gamma"):
            getattr(bg, fname)[...] += getattr(got, fname)
        for fname in ("a_log", "d", "dt_raw", "w_dt1", "w_dt2", "b_dt",
                      "b_ti", "w_b", "c_ti", "w_c"):
            getattr(bg.ssm, fname)[...] += getattr(got.ssm, fname)

    dw, db = _input_projection_backward(cache.x, params.conv_in_w, cache.mask, df)
    g.conv_in_w += dw
    g.conv_in_b += db
    return g


def predict(logits):
    """Class indices from logits; ties resolve to the lowest index."""
    return np.argmax(logits, axis=-1)
