"""Loss, RAdam, the seeded training loop and evaluation.

Two checkpoint-selection protocols are supported: ``eval-metric`` keeps
the parameters with the best test accuracy seen so far (the common but
leaky benchmark default) and ``train-loss`` keeps the epoch with the
lowest mean training loss (leak-free).  Early stopping counts epochs
without improvement of whichever metric is active.
"""

import math
import time
from dataclasses import dataclass

import numpy as np

from . import data as datamod
from . import model as modelmod
from . import rng as rngmod


def softmax_cross_entropy(logits, labels):
    """Cross entropy with the max-shift trick.

    1-D logits with an int label returns (loss, dlogits); a batch
    [B, d_y] with labels [B] returns per-sample losses [B] and dlogits
    [B, d_y] of the summed loss.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    l2 = logits[None] if single else logits
    lab = np.array([labels]) if single else np.asarray(labels)
    shifted = l2 - l2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(l2.shape[0]), lab]
    losses = lse - picked
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    dlogits = probs.copy()
    dlogits[np.arange(l2.shape[0]), lab] -= 1.0
    if single:
        return float(losses[0]), dlogits[0]
    return losses, dlogits


@dataclass
class OptimizerState:
    t: int
    m: dict
    v: dict


def radam_init(flat_params):
    return OptimizerState(
        t=0,
        m={k: np.zeros_like(p) for k, p in flat_params.items()},
        v={k: np.zeros_like(p) for k, p in flat_params.items()},
    )


def radam_step(flat_params, flat_grads, state, cfg):
    """One rectified-Adam update, in place on the parameter arrays.

    Variance rectification kicks in once rho_t > 4; below that the step
    is plain bias-corrected momentum (at t=1 with beta2=0.999, rho_1=1,
    so the very first update is theta -= lr * g).
    """
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    b2t = b2 ** t
    rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
    bias1 = 1.0 - b1 ** t
    for name, p in flat_params.items():
        g = flat_grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bias1
        if rho_t > 4.0:
            r_t = math.sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                            / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
            vhat = np.sqrt(v / (1.0 - b2t)) + cfg.eps
            p -= cfg.lr * r_t * mhat / vhat
        else:
            p -= cfg.lr * mhat
    return state


@dataclass
class TrainReport:
    train_losses: list
    eval_accuracies: list
    selected_epoch: int
    epochs_run: int
    final_accuracy: float
    model_cfg: dict
    train_cfg: dict
    provenance: dict
    wall_clock_s: float = 0.0

    def to_dict(self, include_timing=False):
        """Serializable view; timing is excluded by default so identical
        runs serialize to identical bytes."""
        out = {
            "train_losses": [float(x) for x in self.train_losses],
            "eval_accuracies": [float(x) for x in self.eval_accuracies],
            "selected_epoch": self.selected_epoch,
            "epochs_run": self.epochs_run,
            "final_accuracy": float(self.final_accuracy),
            "model_cfg": self.model_cfg,
            "train_cfg": self.train_cfg,
            "provenance": self.provenance,
        }
        if include_timing:
            out["wall_clock_s"] = self.wall_clock_s
        return out


def evaluate(ds, params, model_cfg, batch_size=64):
    """Accuracy in percent under eval mode (no dropout)."""
    dtype = params.clf_w.dtype
    correct = 0
    for batch in datamod.batch_iter(ds, batch_size, shuffle=False, dtype=dtype):
        logits, _ = modelmod.model_forward(
            batch.padded, batch.lengths, params, model_cfg, train_mode=False)
        correct += int((modelmod.predict(logits) == batch.labels).sum())
    return 100.0 * correct / len(ds.samples)


def _snapshot(flat):
    return {k: v.copy() for k, v in flat.items()}


def _restore(flat, snap):
    for k, v in flat.items():
        v[...] = snap[k]


def train(train_ds, eval_ds, model_cfg, train_cfg, dtype=np.float32,
          provenance=None):
    """Seeded deterministic training; returns (TrainReport, ModelParams of
    the selected checkpoint)."""
    if train_ds.meta.d_x != eval_ds.meta.d_x or train_ds.meta.d_y != eval_ds.meta.d_y:
        raise ValueError("train/eval dataset metadata mismatch")
    if model_cfg.d_x != train_ds.meta.d_x or model_cfg.d_y != train_ds.meta.d_y:
        raise ValueError(
            f"model dims (d_x={model_cfg.d_x}, d_y={model_cfg.d_y}) do not "
            f"match data (d_x={train_ds.meta.d_x}, d_y={train_ds.meta.d_y})")
    started = time.perf_counter()
    seed = train_cfg.seed
    max_len = train_ds.max_length
    params = modelmod.init_params(model_cfg, max_len, seed, dtype=dtype)
    flat = params.flat()
    state = radam_init(flat)

    n_train = len(train_ds.samples)
    train_losses = []
    eval_accs = []
    best_metric = -np.inf
    best_epoch = -1
    best_snap = _snapshot(flat)
    stale = 0
    step = 0
    epochs_run = 0

    for epoch in range(train_cfg.epochs):
        loss_sum = 0.0
        for batch in datamod.batch_iter(train_ds, train_cfg.batch_size,
                                        shuffle=True, seed=seed, epoch=epoch,
                                        dtype=dtype):
            drop_rng = rngmod.stream(seed, rngmod.STREAM_DROPOUT, step)
            logits, cache = modelmod.model_forward(
                batch.padded, batch.lengths, params, model_cfg,
                train_mode=True, rng=drop_rng)
            losses, dlogits = softmax_cross_entropy(logits, batch.labels)
            loss_sum += float(losses.sum())
            grads = modelmod.model_backward(
                cache, (dlogits / len(batch.labels)).astype(dtype))
            radam_step(flat, grads.flat(), state, train_cfg)
            step += 1
        epochs_run = epoch + 1
        train_loss = loss_sum / n_train
        eval_acc = evaluate(eval_ds, params, model_cfg)
        train_losses.append(train_loss)
        eval_accs.append(eval_acc)

        metric = eval_acc if train_cfg.selection == "eval-metric" else -train_loss
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_snap = _snapshot(flat)
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break

    _restore(flat, best_snap)
    final_acc = evaluate(eval_ds, params, model_cfg)
    prov = {
        "dataset": train_ds.meta.name,
        "max_len": int(max_len),
        "k": int(params.k),
        "selection": train_cfg.selection,
        "dtype": np.dtype(dtype).name,
    }
    prov.update(provenance or {})
    report = TrainReport(
        train_losses=train_losses, eval_accuracies=eval_accs,
        selected_epoch=best_epoch, epochs_run=epochs_run,
        final_accuracy=final_acc, model_cfg=model_cfg.to_dict(),
        train_cfg=train_cfg.to_dict(), provenance=prov,
        wall_clock_s=time.perf_counter() - started)
    return report, params
