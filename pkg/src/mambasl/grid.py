"""Grid search over model configurations and the ablation presets.

A space is a mapping from override keys to value lists; configs are the
cartesian product in declaration order.  ``theta`` takes [dt, b, c]
triples so the TI/TV switches can be swept jointly; individual switch
keys sweep them independently (the full published grid is d_m x d_state
x the three switches).
"""

import dataclasses
import itertools
import json
from concurrent.futures import ProcessPoolExecutor

from . import model as modelmod
from . import training as trainmod
from .config import AGGREGATIONS, BlockConfig, ModelConfig, SsmConfig
from .errors import SchemaError

_SSM_KEYS = {f.name for f in dataclasses.fields(SsmConfig)}
_BLOCK_KEYS = {f.name for f in dataclasses.fields(BlockConfig)}
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"ssm", "block"}


def _apply_override(cfg_dict, key, value):
    if key == "theta":
        if not (isinstance(value, (list, tuple)) and len(value) == 3):
            raise SchemaError("theta override must be a [dt, b, c] triple")
        cfg_dict["ssm"]["theta_dt"] = value[0]
        cfg_dict["ssm"]["theta_b"] = value[1]
        cfg_dict["ssm"]["theta_c"] = value[2]
    elif key in _SSM_KEYS:
        cfg_dict["ssm"][key] = value
    elif key in _BLOCK_KEYS:
        cfg_dict["block"][key] = value
    elif key in _MODEL_KEYS:
        cfg_dict[key] = value
    else:
        raise SchemaError(f"unknown grid key {key!r}")


def expand_space(base_cfg, space):
    """Cartesian product of the space over a base config, in declaration
    order (first key varies slowest)."""
    if not isinstance(space, dict) or not space:
        raise SchemaError("grid space must be a non-empty mapping of lists")
    keys = list(space.keys())
    for k in keys:
        if not isinstance(space[k], list) or not space[k]:
            raise SchemaError(f"grid space entry {k!r} must be a non-empty list")
    configs = []
    for combo in itertools.product(*(space[k] for k in keys)):
        d = base_cfg.to_dict()
        for k, v in zip(keys, combo):
            _apply_override(d, k, v)
        configs.append(ModelConfig.from_dict(d))
    return configs


def _run_one(args):
    index, model_cfg, train_ds, test_ds, train_cfg = args
    report, params = trainmod.train(train_ds, test_ds, model_cfg, train_cfg)
    return index, report, params


def grid_search(configs, train_ds, test_ds, train_cfg, jobs=1, labels=None):
    """Train/evaluate each config once; returns (records, best_index,
    best_params, reports).

    Best = highest test accuracy, ties broken by fewer parameters, then
    by declaration order.  Records are emitted in declaration order and
    contain no timing, so the same grid yields the same bytes no matter
    how many jobs ran it.
    """
    if not configs:
        raise SchemaError("empty grid")
    tasks = [(i, cfg, train_ds, test_ds, train_cfg)
             for i, cfg in enumerate(configs)]
    results = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for index, report, params in pool.map(_run_one, tasks):
                results[index] = (report, params)
    else:
        for task in tasks:
            index, report, params = _run_one(task)
            results[index] = (report, params)

    records = []
    scored = []
    for i, cfg in enumerate(configs):
        report, params = results[i]
        n_params = modelmod.param_count(
            cfg, params.k, max_len=report.provenance["max_len"])
        rec = {
            "index": i,
            "label": labels[i] if labels else None,
            "model_cfg": cfg.to_dict(),
            "seed": train_cfg.seed,
            "epochs_run": report.epochs_run,
            "selected_epoch": report.selected_epoch,
            "train_losses": [float(x) for x in report.train_losses],
            "test_accuracy": float(report.final_accuracy),
            "param_count": n_params,
        }
        records.append(rec)
        scored.append((report.final_accuracy, -n_params, -i))
    best_index = scored.index(max(scored))
    return records, best_index, results[best_index][1], [results[i][0] for i in range(len(configs))]


def write_records(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def theta_grid():
    """The eight TI/TV switch settings, (0,0,0) through (1,1,1)."""
    return [list(c) for c in itertools.product((0, 1), repeat=3)]


def ablation_variants(which, base_cfg):
    """Named config variants for one hypothesis tag; ``which`` is one of
    h1 (kernel scaling), h2 (TI/TV switches), h3 (skip term), h4
    (aggregation), depth."""
    base = base_cfg.to_dict()

    def variant(label, **overrides):
        d = json.loads(json.dumps(base))
        for k, v in overrides.items():
            _apply_override(d, k, v)
        return label, ModelConfig.from_dict(d)

    tag = which.lower()
    if tag == "h1":
        return [variant("scaled-k", fixed_k=None),
                variant("fixed-k3", fixed_k=3)]
    if tag == "h2":
        out = []
        for t in theta_grid():
            names = [n for n, flag in zip(("dt", "b", "c"), t) if flag]
            label = "tv-" + "+".join(names) if names else "ti-all"
            out.append(variant(label, theta=t))
        return out
    if tag == "h3":
        return [variant("no-skip", use_d=0), variant("with-skip", use_d=1)]
    if tag == "h4":
        return [variant(mode, aggregation=mode) for mode in AGGREGATIONS]
    if tag == "depth":
        return [variant(f"depth-{d}", depth=d) for d in (1, 2, 3)]
    raise SchemaError(f"unknown ablation tag {which!r} "
                      "(expected h1, h2, h3, h4 or depth)")
