"""Finite-difference validation of every analytic gradient.

All checks run in float64: central differences with h = 1e-5 against the
analytic backward pass, reported as the max relative error per parameter
tensor.  The relative error uses max(|analytic|, |numeric|, 1e-6) in the
denominator so near-zero entries are compared absolutely instead of
amplifying round-off.
"""

from dataclasses import dataclass

import numpy as np

from . import model as modelmod
from . import rng as rngmod
from . import training as trainmod
from .config import BlockConfig, ModelConfig, SsmConfig

FD_STEP = 1e-5
REL_TOL = 1e-4
DENOM_FLOOR = 1e-6

PRESETS = {
    "tiny": dict(length=8, d_x=3, d_m=4, d_state=2, d_y=3, batch=4,
                 n_heads=2, depth=1),
    "small": dict(length=12, d_x=4, d_m=6, d_state=4, d_y=4, batch=5,
                  n_heads=3, depth=2),
}


@dataclass
class TensorCheck:
    case: str
    name: str
    max_rel_err: float

    @property
    def ok(self):
        return self.max_rel_err < REL_TOL


def relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def finite_difference(loss_fn, arrays, h=FD_STEP):
    """Central-difference gradient of loss_fn for each named float64 array,
    perturbing entries in place."""
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def make_case(length, d_x, d_m, d_state, d_y, batch, n_heads, depth,
              use_d, aggregation="adaptive", theta=(1, 1, 1), seed=7,
              variable_lengths=True):
    """A float64 model plus a synthetic batch, deterministic in seed."""
    cfg = ModelConfig(
        d_x=d_x, d_y=d_y, d_m=d_m, depth=depth, n_heads=n_heads, dropout=0.0,
        aggregation=aggregation,
        ssm=SsmConfig(d_state=d_state, theta_dt=theta[0], theta_b=theta[1],
                      theta_c=theta[2], use_d=use_d),
        block=BlockConfig())
    params = modelmod.init_params(cfg, length, seed, dtype=np.float64)
    gen = rngmod.stream(seed, rngmod.STREAM_GRADCHECK)
    # gates start at exact zero, which puts max-over-heads on a tie:
    # a subgradient point where central differences are meaningless.
    # Randomize them so the check runs at a smooth point.
    params.gate_w[...] = 0.3 * gen.standard_normal(params.gate_w.shape)
    params.gate_b[...] = 0.3 * gen.standard_normal(params.gate_b.shape)
    x = gen.standard_normal((batch, length, d_x))
    if variable_lengths and aggregation != "full":
        lengths = np.maximum(length - 2 * np.arange(batch), 1)
        lengths[0] = length
    else:
        lengths = np.full(batch, length)
    mask = np.arange(length)[None, :] < lengths[:, None]
    x = np.where(mask[:, :, None], x, 0.0)
    labels = gen.integers(0, d_y, size=batch)
    return cfg, params, x, lengths, labels


def check_model_case(case_label, cfg, params, x, lengths, labels,
                     corrupt=False):
    """FD-check every parameter tensor of one model case."""
    def loss_fn():
        logits, _ = modelmod.model_forward(x, lengths, params, cfg)
        losses, _ = trainmod.softmax_cross_entropy(logits, labels)
        return float(losses.mean())

    logits, cache = modelmod.model_forward(x, lengths, params, cfg)
    _, dlogits = trainmod.softmax_cross_entropy(logits, labels)
    grads = modelmod.model_backward(cache, dlogits / len(labels))
    flat_grads = grads.flat()
    if corrupt:
        first = next(iter(flat_grads))
        flat_grads[first].reshape(-1)[0] += 1e-2

    active = set(modelmod.active_param_names(cfg))
    results = []
    fd = finite_difference(loss_fn, {n: a for n, a in params.flat().items()
                                     if n in active})
    for name, num in fd.items():
        results.append(TensorCheck(
            case=case_label, name=name,
            max_rel_err=relative_error(flat_grads[name], num)))
    return results


def run_preset(preset, corrupt=False, seed=7):
    """Both use_d settings of a preset; returns a list of TensorCheck."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r} (expected tiny or small)")
    spec = PRESETS[preset]
    out = []
    for use_d in (0, 1):
        label = f"{preset}/use_d={use_d}"
        cfg, params, x, lengths, labels = make_case(
            use_d=use_d, seed=seed, **spec)
        out.extend(check_model_case(label, cfg, params, x, lengths, labels,
                                    corrupt=corrupt))
    return out
