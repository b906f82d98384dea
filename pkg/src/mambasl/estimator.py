"""scikit-learn style estimator facade over the training engine.

Accepts X as a [n, L, d_x] array or a list of per-sample [L_i, d_x]
arrays (variable lengths welcome); y as any 1-D label vector.  All
constructor arguments are hyperparameters in the sklearn sense and are
stored untouched; fitted state lives in trailing-underscore attributes.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import data as datamod
from . import model as modelmod
from . import training as trainmod
from .config import BlockConfig, ModelConfig, SsmConfig, TrainConfig


def _as_samples(X):
    if isinstance(X, np.ndarray) and X.ndim == 3:
        return [np.asarray(X[i], dtype=np.float64) for i in range(X.shape[0])]
    if isinstance(X, np.ndarray) and X.ndim == 2:
        # single multivariate series
        return [np.asarray(X, dtype=np.float64)]
    return [np.asarray(x, dtype=np.float64) for x in X]


class MambaSLClassifier(BaseEstimator, ClassifierMixin):
    """Single-layer selective state-space classifier for multivariate
    time series.

    Parameters mirror the engine's model/training configs: switch
    theta_dt/theta_b/theta_c between time-invariant (0) and
    time-variant (1) step size / input map / readout, pick an
    aggregation mode, and choose the checkpoint-selection protocol
    ("train-loss" is leak-free; "eval-metric" replicates the common
    benchmark default and needs an eval_set passed to fit).
    """

    def __init__(self, d_m=64, depth=1, d_state=8, d_rank=0,
                 theta_dt=1, theta_b=1, theta_c=1, use_d=0, share_a=False,
                 aggregation="adaptive", n_heads=4, dropout=0.1,
                 seq_ratio=0.02, k_min=3, fixed_k=None,
                 expand=1, d_conv=4, use_norm=True, use_block_residual=None,
                 normalization="zscore", batch_size=16, lr=0.001,
                 epochs=100, patience=10, selection="train-loss", seed=2021):
        self.d_m = d_m
        self.depth = depth
        self.d_state = d_state
        self.d_rank = d_rank
        self.theta_dt = theta_dt
        self.theta_b = theta_b
        self.theta_c = theta_c
        self.use_d = use_d
        self.share_a = share_a
        self.aggregation = aggregation
        self.n_heads = n_heads
        self.dropout = dropout
        self.seq_ratio = seq_ratio
        self.k_min = k_min
        self.fixed_k = fixed_k
        self.expand = expand
        self.d_conv = d_conv
        self.use_norm = use_norm
        self.use_block_residual = use_block_residual
        self.normalization = normalization
        self.batch_size = batch_size
        self.lr = lr
        self.epochs = epochs
        self.patience = patience
        self.selection = selection
        self.seed = seed

    def _dataset(self, samples, labels, label_names, name, split):
        mapping = {nm: i for i, nm in enumerate(label_names)}
        recs = [datamod.SeriesSample(values=s, label=mapping[lab])
                for s, lab in zip(samples, labels)]
        lengths = {r.length for r in recs}
        meta = datamod.DatasetMeta(
            name=name, d_x=recs[0].values.shape[1], d_y=len(label_names),
            equal_length=len(lengths) == 1,
            series_length=recs[0].length if len(lengths) == 1 else None,
            label_names=[str(nm) for nm in label_names], split=split)
        return datamod.TimeSeriesDataset(meta=meta, samples=recs)

    def _model_cfg(self, d_x, d_y):
        return ModelConfig(
            d_x=d_x, d_y=d_y, d_m=self.d_m, depth=self.depth,
            seq_ratio=self.seq_ratio, k_min=self.k_min, fixed_k=self.fixed_k,
            aggregation=self.aggregation, n_heads=self.n_heads,
            dropout=self.dropout,
            ssm=SsmConfig(d_state=self.d_state, d_rank=self.d_rank,
                          theta_dt=self.theta_dt, theta_b=self.theta_b,
                          theta_c=self.theta_c, use_d=self.use_d,
                          share_a=self.share_a),
            block=BlockConfig(expand=self.expand, d_conv=self.d_conv,
                              use_norm=self.use_norm,
                              use_block_residual=self.use_block_residual))

    def fit(self, X, y, eval_set=None):
        """eval_set: optional (X_eval, y_eval) pair; required when
        selection="eval-metric", used for the per-epoch accuracy curve
        otherwise (defaults to the training data)."""
        samples = _as_samples(X)
        y = np.asarray(y)
        if len(samples) != len(y):
            raise ValueError(f"X has {len(samples)} samples but y has {len(y)}")
        self.classes_ = np.unique(y)
        train_ds = self._dataset(samples, y, list(self.classes_), "fit", "train")
        if eval_set is not None:
            ex, ey = eval_set
            eval_ds = self._dataset(_as_samples(ex), np.asarray(ey),
                                    list(self.classes_), "fit", "test")
        elif self.selection == "eval-metric":
            raise ValueError('selection="eval-metric" needs an eval_set; '
                             'use selection="train-loss" to select on '
                             "training loss alone")
        else:
            eval_ds = train_ds
        train_ds, eval_ds, self.norm_stats_ = datamod.normalize_splits(
            train_ds, eval_ds, self.normalization)

        cfg = self._model_cfg(train_ds.meta.d_x, train_ds.meta.d_y)
        tcfg = TrainConfig(batch_size=self.batch_size, lr=self.lr,
                           epochs=self.epochs, patience=self.patience,
                           seed=self.seed, selection=self.selection)
        report, params = trainmod.train(train_ds, eval_ds, cfg, tcfg,
                                        provenance={"normalization": self.normalization})
        self.model_cfg_ = cfg
        self.train_cfg_ = tcfg
        self.params_ = params
        self.report_ = report
        self.n_features_in_ = train_ds.meta.d_x
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("fit this classifier before predicting")

    def decision_function(self, X):
        self._check_fitted()
        samples = _as_samples(X)
        if self.normalization == "zscore":
            samples = [(s - self.norm_stats_.mean) / self.norm_stats_.std
                       for s in samples]
        elif self.normalization == "instance":
            samples = [(s - s.mean(0)) / np.maximum(s.std(0), datamod.EPS_STD)
                       for s in samples]
        out = np.zeros((len(samples), self.model_cfg_.d_y))
        dtype = self.params_.clf_w.dtype
        for start in range(0, len(samples), 64):
            chunk = samples[start:start + 64]
            lmax = max(s.shape[0] for s in chunk)
            padded = np.zeros((len(chunk), lmax, self.n_features_in_), dtype=dtype)
            lengths = np.zeros(len(chunk), dtype=np.int64)
            for i, s in enumerate(chunk):
                padded[i, :s.shape[0]] = s
                lengths[i] = s.shape[0]
            logits, _ = modelmod.model_forward(
                padded, lengths, self.params_, self.model_cfg_)
            out[start:start + len(chunk)] = logits
        return out

    def predict_proba(self, X):
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[modelmod.predict(logits)]
