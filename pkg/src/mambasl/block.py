"""Gated block around the selective scan.

Pipeline per block:  optional pre-RMSNorm -> input projection splitting
into (u, z) -> depthwise causal conv + SiLU on u -> selective scan ->
multiplicative SiLU gate with z -> output projection -> optional
additive residual.  All passes are batched [B, L, ...] with right
padding controlled by per-sample lengths.
"""

from dataclasses import dataclass

import numpy as np

from . import ssm
from .ssm import SsmParams, sigmoid

RMS_EPS = 1e-5


def silu(x):
    return x * sigmoid(x)


def _silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def rmsnorm(x, gamma, eps=RMS_EPS):
    """x / sqrt(mean(x^2) + eps) * gamma over the feature axis."""
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * r * gamma


def _rmsnorm_forward(x, gamma, eps=RMS_EPS):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * r * gamma, r


def _rmsnorm_backward(x, gamma, r, dy):
    d = x.shape[-1]
    dgamma = (x * r * dy).sum(tuple(range(x.ndim - 1)))
    gdy = dy * gamma
    dot = (gdy * x).sum(-1, keepdims=True)
    dx = r * gdy - (r ** 3 / d) * x * dot
    return dx, dgamma


@dataclass
class BlockParams:
    w_in: np.ndarray       # [d_m, 2*J] no bias
    conv_k: np.ndarray     # [J, d_conv] depthwise taps, last tap is current step
    conv_b: np.ndarray     # [J]
    w_out: np.ndarray      # [J, d_m] no bias
    norm_gamma: np.ndarray  # [d_m]
    ssm: SsmParams

    def zeros_like(self):
        return BlockParams(
            w_in=np.zeros_like(self.w_in),
            conv_k=np.zeros_like(self.conv_k),
            conv_b=np.zeros_like(self.conv_b),
            w_out=np.zeros_like(self.w_out),
            norm_gamma=np.zeros_like(self.norm_gamma),
            ssm=self.ssm.zeros_like(),
        )


@dataclass
class BlockCache:
    x: np.ndarray
    mask: np.ndarray
    h: np.ndarray          # post-norm input
    rms_r: np.ndarray | None
    u: np.ndarray          # conv input
    c: np.ndarray          # conv output, pre-SiLU
    z: np.ndarray          # gate branch pre-activation
    y: np.ndarray          # scan output
    scan_cache: ssm.ScanCache
    params: BlockParams
    cfg: object


def depthwise_causal_conv(x, kernel, bias, lengths):
    """Per-channel causal conv along time with left zero padding.

    x: [B, L, J]; kernel: [J, K] with kernel[:, -1] multiplying the
    current step; rows at t >= lengths[b] come out zero.
    """
    b_sz, seq, j = x.shape
    k = kernel.shape[1]
    xp = np.concatenate([np.zeros((b_sz, k - 1, j), dtype=x.dtype), x], axis=1)
    y = np.broadcast_to(bias, x.shape).copy()
    for i in range(k):
        y += xp[:, i:i + seq] * kernel[:, i]
    mask = np.arange(seq)[None, :] < np.asarray(lengths)[:, None]
    return np.where(mask[:, :, None], y, 0.0)


def _conv_backward(x, kernel, mask, dy):
    b_sz, seq, j = x.shape
    k = kernel.shape[1]
    dy = np.where(mask[:, :, None], dy, 0.0)
    xp = np.concatenate([np.zeros((b_sz, k - 1, j), dtype=x.dtype), x], axis=1)
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernel)
    for i in range(k):
        dxp[:, i:i + seq] += dy * kernel[:, i]
        dk[:, i] = (dy * xp[:, i:i + seq]).sum((0, 1))
    db = dy.sum((0, 1))
    return dxp[:, k - 1:], dk, db


def block_forward(x, lengths, p, cfg, ssm_cfg):
    """x: [B, L, d_m] with zero padded rows. Returns (f: [B, L, d_m], cache)."""
    j = p.w_out.shape[0]
    mask = np.arange(x.shape[1])[None, :] < np.asarray(lengths)[:, None]
    if cfg.use_norm:
        h, rms_r = _rmsnorm_forward(x, p.norm_gamma)
        h = np.where(mask[:, :, None], h, 0.0)
    else:
        h, rms_r = x, None
    uz = h @ p.w_in
    u, z = uz[..., :j], uz[..., j:]
    c = depthwise_causal_conv(u, p.conv_k, p.conv_b, lengths)
    u_act = silu(c)
    y, scan_cache = ssm.scan_forward(u_act, lengths, p.ssm, ssm_cfg)
    g = y * silu(z)
    f = g @ p.w_out
    if cfg.use_block_residual:
        f = f + x
    cache = BlockCache(x=x, mask=mask, h=h, rms_r=rms_r, u=u, c=c, z=z,
                       y=y, scan_cache=scan_cache, params=p, cfg=cfg)
    return f, cache


def block_backward(cache, dout):
    """Exact reverse-mode of block_forward: returns (dx, BlockParams grads)."""
    p, cfg = cache.params, cache.cfg
    if dout.shape != cache.x.shape:
        raise ValueError(f"dout shape {dout.shape} != input shape {cache.x.shape}")
    g = p.zeros_like()
    silu_z = silu(cache.z)
    gate_out = cache.y * silu_z

    dgate = dout @ p.w_out.T
    g.w_out += np.einsum("blj,blm->jm", gate_out, dout)
    dy = dgate * silu_z
    dz = dgate * cache.y * _silu_grad(cache.z)

    du_act, g.ssm = ssm.scan_backward(cache.scan_cache, dy)
    dc = du_act * _silu_grad(cache.c)
    du, dk, db = _conv_backward(cache.u, p.conv_k, cache.mask, dc)
    g.conv_k += dk
    g.conv_b += db

    duz = np.concatenate([du, dz], axis=-1)
    dh = duz @ p.w_in.T
    g.w_in += np.einsum("blm,blk->mk", cache.h, duz)

    if cfg.use_norm:
        dh = np.where(cache.mask[:, :, None], dh, 0.0)
        dx, dgamma = _rmsnorm_backward(cache.x, p.norm_gamma, cache.rms_r, dh)
        g.norm_gamma += dgamma
    else:
        dx = dh
    if cfg.use_block_residual:
        dx = dx + dout
    return dx, g
