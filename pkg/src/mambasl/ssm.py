"""Modularized selective state-space scan.

The scan runs the per-channel recurrence

    s_t = a_bar_t * s_{t-1} + b_bar_t * x_t,    f_t = <C_t, s_t> + D * x_t

where (a_bar, b_bar) come from zero-order-hold discretization of a
diagonal negative A with a per-channel step size.  Step size, input map
and readout map each switch independently between a time-invariant
learned parameter and a time-variant projection of the current input.

Everything here is a pure function of (inputs, params); the backward
pass is analytic and exact, including the Taylor branch of the
discretization and the softplus reparameterization of the step size.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericError

# Below this |dt*a| the cubic Taylor expansion of expm1(dt*a)/a is more
# accurate than the direct quotient in float64.
TAYLOR_THRESHOLD = 1e-6


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def inv_softplus(y):
    """Inverse of softplus for y > 0."""
    y = np.asarray(y)
    return y + np.log(-np.expm1(-y))


@dataclass
class SsmParams:
    """Parameter arrays of one scan. Shapes use J = d_inner, N = d_state,
    R = rank of the low-rank step-size projection.

    a_log: [J, N] (or [1, N] when A is shared across channels); the state
    matrix is diagonal with entries a = -exp(a_log) < 0.
    """

    a_log: np.ndarray          # [Ja, N]
    d: np.ndarray              # [J]       skip weights
    dt_raw: np.ndarray         # [J]       TI step size, dt = softplus(dt_raw)
    w_dt1: np.ndarray          # [J, R]    TV step: low-rank down-projection
    w_dt2: np.ndarray          # [R, J]    TV step: up-projection
    b_dt: np.ndarray           # [J]       TV step: bias
    b_ti: np.ndarray           # [J, N]    TI input map, per channel
    w_b: np.ndarray            # [J, N]    TV input map, shared across channels
    c_ti: np.ndarray           # [J, N]    TI readout, per channel
    w_c: np.ndarray            # [J, N]    TV readout, shared across channels

    @property
    def a(self):
        return -np.exp(self.a_log)

    def zeros_like(self):
        return SsmParams(**{
            k: np.zeros_like(getattr(self, k))
            for k in ("a_log", "d", "dt_raw", "w_dt1", "w_dt2", "b_dt",
                      "b_ti", "w_b", "c_ti", "w_c")
        })


@dataclass
class ScanCache:
    x: np.ndarray              # [B, L, J]
    mask: np.ndarray           # [B, L] bool
    dt_eff: np.ndarray         # [B, L, J] effective step sizes
    r_dt: np.ndarray | None    # [B, L, R] low-rank intermediate (TV step only)
    b_tv: np.ndarray | None    # [B, L, N] (TV input map only)
    c_tv: np.ndarray | None    # [B, L, N] (TV readout only)
    states: np.ndarray         # [B, L, J, N]
    params: SsmParams
    cfg: object


def _discretize(dt, a, euler_b=False):
    """ZOH factors: a_bar = exp(dt*a) and the increment phi with
    b_bar = phi * B.  phi = expm1(dt*a)/a, with a cubic Taylor branch for
    |dt*a| below the float64 crossover; ``euler_b`` swaps in the
    simplified phi = dt rule."""
    da = dt * a
    abar = np.exp(da)
    if euler_b:
        return abar, dt * np.ones_like(da)
    taylor = np.abs(da) < TAYLOR_THRESHOLD
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        exact = np.expm1(da) / a
    phi = np.where(taylor, dt * (1.0 + da / 2.0 + da * da / 6.0), exact)
    return abar, phi


def zoh_discretize(dt, a, b):
    """Discretize (a, b) with step dt > 0, a < 0: returns (a_bar, b_bar)."""
    dt = np.asarray(dt, dtype=float)
    a = np.asarray(a, dtype=float)
    abar, phi = _discretize(dt, a)
    return abar, phi * np.asarray(b, dtype=float)


def _dt_eff(x, p, cfg):
    """Effective step sizes for inputs x: [..., J] -> ([..., J], r or None)."""
    if cfg.theta_dt:
        r = x @ p.w_dt1                       # [..., R]
        dt = softplus(r @ p.w_dt2 + p.b_dt)   # [..., J]
        return dt, r
    dt = np.broadcast_to(softplus(p.dt_raw), x.shape).copy()
    return dt, None


def effective_params(x, p, cfg):
    """Per-step effective (dt, B, C) for inputs x: [..., J].

    Returns dt: [..., J] > 0 and B, C: [..., J, N]; the time-variant B/C
    are shared across channels and broadcast along J.
    """
    j, n = p.b_ti.shape
    dt, _ = _dt_eff(x, p, cfg)
    target = x.shape[:-1] + (j, n)
    if cfg.theta_b:
        b = np.broadcast_to(np.expand_dims(x @ p.w_b, -2), target).copy()
    else:
        b = np.broadcast_to(p.b_ti, target).copy()
    if cfg.theta_c:
        c = np.broadcast_to(np.expand_dims(x @ p.w_c, -2), target).copy()
    else:
        c = np.broadcast_to(p.c_ti, target).copy()
    return dt, b, c


def _locate_nonfinite(arr):
    idx = np.argwhere(~np.isfinite(arr))
    return tuple(int(i) for i in idx[0]) if len(idx) else ()


def scan_forward(x, lengths, p, cfg):
    """Run the selective scan over a padded batch.

    x: [B, L, J]; lengths: [B]. Rows at t >= lengths[b] are treated as
    padding: they never touch the state and come out as exact zeros.
    Returns (f: [B, L, J], ScanCache).
    """
    b_sz, seq, j = x.shape
    n = p.b_ti.shape[1]
    a = p.a                                   # [Ja, N]
    mask = np.arange(seq)[None, :] < np.asarray(lengths)[:, None]
    all_valid = bool(mask.all())

    dt_eff, r_dt = _dt_eff(x, p, cfg)
    b_tv = x @ p.w_b if cfg.theta_b else None   # [B, L, N]
    c_tv = x @ p.w_c if cfg.theta_c else None

    f = np.zeros_like(x)
    states = np.empty((b_sz, seq, j, n), dtype=x.dtype)
    s = np.zeros((b_sz, j, n), dtype=x.dtype)

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for t in range(seq):
            abar, phi = _discretize(dt_eff[:, t, :, None], a, cfg.euler_b)
            bst = b_tv[:, t, None, :] if cfg.theta_b else p.b_ti[None]
            s_new = abar * s + (phi * bst) * x[:, t, :, None]
            if not all_valid:
                s_new = np.where(mask[:, t, None, None], s_new, s)
            s = s_new
            states[:, t] = s
            cst = c_tv[:, t, None, :] if cfg.theta_c else p.c_ti[None]
            f_t = (s * cst).sum(-1)
            if cfg.use_d:
                f_t = f_t + p.d * x[:, t]
            if not all_valid:
                f_t = np.where(mask[:, t, None], f_t, 0.0)
            f[:, t] = f_t
            if not np.all(np.isfinite(s)):
                where = _locate_nonfinite(s)
                raise NumericError(
                    f"non-finite state at t={t}, sample={where[0]}, channel={where[1]}")
            if not np.all(np.isfinite(f_t)):
                where = _locate_nonfinite(f_t)
                raise NumericError(
                    f"non-finite output at t={t}, sample={where[0]}, channel={where[1]}")

    cache = ScanCache(x=x, mask=mask, dt_eff=dt_eff, r_dt=r_dt,
                      b_tv=b_tv, c_tv=c_tv, states=states, params=p, cfg=cfg)
    return f, cache


def scan_backward(cache, dout):
    """Exact reverse-mode of scan_forward.

    dout: [B, L, J] gradient w.r.t. f. Returns (dx: [B, L, J], SsmGrads
    as an SsmParams of gradient arrays). Switched-off branches receive
    exactly zero gradients.
    """
    p, cfg = cache.params, cache.cfg
    x, mask, states = cache.x, cache.mask, cache.states
    dt_eff = cache.dt_eff
    b_sz, seq, j = x.shape
    n = p.b_ti.shape[1]
    if dout.shape != x.shape:
        raise ValueError(f"dout shape {dout.shape} != input shape {x.shape}")
    a = p.a
    all_valid = bool(mask.all())

    g = p.zeros_like()
    dx = np.zeros_like(x)
    g_a = np.zeros((j, n), dtype=x.dtype)
    d_dt = np.zeros_like(dt_eff)                      # [B, L, J]
    d_btv = np.zeros((b_sz, seq, n), dtype=x.dtype) if cfg.theta_b else None
    d_ctv = np.zeros((b_sz, seq, n), dtype=x.dtype) if cfg.theta_c else None

    ds = np.zeros((b_sz, j, n), dtype=x.dtype)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for t in range(seq - 1, -1, -1):
            gt = dout[:, t]
            if not all_valid:
                gt = np.where(mask[:, t, None], gt, 0.0)
            s_t = states[:, t]
            s_prev = states[:, t - 1] if t > 0 else np.zeros_like(s_t)
            x_t = x[:, t]

            if cfg.use_d:
                g.d += (gt * x_t).sum(0)
                dx[:, t] += gt * p.d

            cst = cache.c_tv[:, t, None, :] if cfg.theta_c else p.c_ti[None]
            dc = gt[:, :, None] * s_t                 # [B, J, N]
            if cfg.theta_c:
                d_ctv[:, t] = dc.sum(1)
            else:
                g.c_ti += dc.sum(0)
            ds_t = ds + cst * gt[:, :, None]

            dt_t = dt_eff[:, t, :, None]              # [B, J, 1]
            da = dt_t * a
            abar = np.exp(da)
            bst = cache.b_tv[:, t, None, :] if cfg.theta_b else p.b_ti[None]
            if cfg.euler_b:
                phi = np.broadcast_to(dt_t, da.shape)
            else:
                taylor = np.abs(da) < TAYLOR_THRESHOLD
                phi = np.where(taylor, dt_t * (1.0 + da / 2.0 + da * da / 6.0),
                               np.expm1(da) / a)

            dabar = ds_t * s_prev
            dbbar = ds_t * x_t[:, :, None]
            dx[:, t] += (ds_t * (phi * bst)).sum(-1)
            ds_next = ds_t * abar
            if not all_valid:
                ds_next = np.where(mask[:, t, None, None], ds_next, ds)
            ds = ds_next

            dphi = dbbar * bst
            dbst = dbbar * phi
            if cfg.theta_b:
                d_btv[:, t] = dbst.sum(1)
            else:
                g.b_ti += dbst.sum(0)

            dda = dabar * abar
            if cfg.euler_b:
                d_dt[:, t] = (dda * a).sum(-1) + dphi.sum(-1)
                g_a += (dda * dt_t).sum(0)
            else:
                dphi_ddt = np.where(taylor, 1.0 + da + 0.5 * da * da, abar)
                dphi_da = np.where(taylor, dt_t * dt_t * (0.5 + da / 3.0),
                                   (dt_t * abar - phi) / a)
                d_dt[:, t] = (dda * a).sum(-1) + (dphi * dphi_ddt).sum(-1)
                g_a += (dda * dt_t + dphi * dphi_da).sum(0)

    # A path: a = -exp(a_log)  =>  d a_log = g_a * a
    if p.a_log.shape[0] == 1:
        g.a_log += g_a.sum(0, keepdims=True) * a
    else:
        g.a_log += g_a * a

    # step-size path, through the softplus (sigma(pre) == 1 - exp(-softplus(pre)))
    if cfg.theta_dt:
        dpre = d_dt * (1.0 - np.exp(-dt_eff))         # [B, L, J]
        g.b_dt += dpre.sum((0, 1))
        g.w_dt2 += np.einsum("blr,blj->rj", cache.r_dt, dpre)
        dr = dpre @ p.w_dt2.T
        g.w_dt1 += np.einsum("blj,blr->jr", x, dr)
        dx += dr @ p.w_dt1.T
    else:
        sig = 1.0 - np.exp(-softplus(p.dt_raw))
        g.dt_raw += d_dt.sum((0, 1)) * sig

    if cfg.theta_b:
        g.w_b += np.einsum("blj,bln->jn", x, d_btv)
        dx += d_btv @ p.w_b.T
    if cfg.theta_c:
        g.w_c += np.einsum("blj,bln->jn", x, d_ctv)
        dx += d_ctv @ p.w_c.T

    return dx, g


def lti_kernel(p, cfg, length):
    """Explicit convolution kernel of the scan in its fully
    time-invariant configuration: h[n, j] = sum_m C[j,m] abar[j,m]^n bbar[j,m].

    Only valid with all three switches off; used as an independent
    cross-check of the recurrence.
    """
    if cfg.theta_dt or cfg.theta_b or cfg.theta_c:
        raise ValueError("kernel form requires a fully time-invariant scan")
    dt = softplus(p.dt_raw)[:, None]               # [J, 1]
    abar, bbar = zoh_discretize(dt, p.a, p.b_ti)   # [J, N]
    powers = abar[None] ** np.arange(length)[:, None, None]   # [L, J, N]
    return np.einsum("jn,ljn->lj", p.c_ti * bbar, powers)
