"""Command-line entry point.

Commands: inspect, train, grid, ablate, gradcheck.  Run configuration is
one JSON file validated up front (unknown keys rejected).  Exit codes:
0 success, 1 usage or schema problem, 2 data problem, 3 numeric failure.
"""

import argparse
import dataclasses
import json
import os
import sys
import time

import jsonschema

from . import checkpoint as ckptmod
from . import data as datamod
from . import gradcheck as gcmod
from . import grid as gridmod
from . import model as modelmod
from . import training as trainmod
from .config import ModelConfig, TrainConfig
from .errors import (CheckpointError, DataError, MambaSLError, NumericError,
                     SchemaError, TsParseError)

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data"],
    "properties": {
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["train", "test"],
            "properties": {
                "train": {"type": "string"},
                "test": {"type": "string"},
                "normalization": {"enum": ["zscore", "instance", "none"]},
            },
        },
        "model": {"type": "object"},
        "train": {"type": "object"},
        "space": {"type": "object"},
        "out": {"type": "string"},
    },
}


class UsageError(MambaSLError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_run_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}") from None
    try:
        jsonschema.validate(cfg, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"{path}: {exc.message}") from None
    model_section = cfg.get("model", {})
    for key in ("d_x", "d_y"):
        if key in model_section:
            raise SchemaError(f"{path}: model.{key} is derived from the data, "
                              "remove it from the config")
    return cfg


def _load_splits(data_section):
    train_ds = datamod.parse_ts_file(data_section["train"], split="train")
    test_ds = datamod.parse_ts_file(data_section["test"], split="test")
    mode = data_section.get("normalization", "zscore")
    train_n, test_n, _ = datamod.normalize_splits(train_ds, test_ds, mode)
    return train_n, test_n, mode


def _build_model_cfg(model_section, train_ds):
    cfg = ModelConfig.from_dict(model_section)
    return dataclasses.replace(cfg, d_x=train_ds.meta.d_x, d_y=train_ds.meta.d_y)


def _out_dir(args, cfg):
    out = args.out or cfg.get("out") or os.path.join(
        "runs", time.strftime("%Y%m%d-%H%M%S"))
    os.makedirs(out, exist_ok=True)
    return out


def cmd_inspect(args):
    ds = datamod.parse_ts_file(args.path)
    m = ds.meta
    n = len(ds.samples)
    lengths = [s.length for s in ds.samples]
    span = (f"L={lengths[0]}" if m.equal_length
            else f"L={min(lengths)}-{max(lengths)}")
    plural = "s" if n != 1 else ""
    print(f"{m.name}: {n} sample{plural}, {span}, "
          f"{m.d_x} vars, {m.d_y} classes")
    return 0


def cmd_train(args):
    cfg = load_run_config(args.config)
    train_ds, test_ds, norm_mode = _load_splits(cfg["data"])
    model_cfg = _build_model_cfg(cfg.get("model", {}), train_ds)
    train_cfg = TrainConfig.from_dict(cfg.get("train", {}))
    out = _out_dir(args, cfg)

    report, params = trainmod.train(
        train_ds, test_ds, model_cfg, train_cfg,
        provenance={"normalization": norm_mode})
    prov = dict(report.provenance)
    prov["selected_epoch"] = report.selected_epoch
    ckptmod.save_checkpoint(os.path.join(out, "model.mbsl"),
                            model_cfg, train_cfg, params, prov)
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"final test accuracy: {report.final_accuracy:.3f}")
    print(f"wrote {out}/model.mbsl and {out}/report.json "
          f"({report.wall_clock_s:.1f}s)")
    return 0


def cmd_grid(args):
    cfg = load_run_config(args.config)
    if "space" not in cfg:
        raise SchemaError(f"{args.config}: grid needs a \"space\" section")
    train_ds, test_ds, norm_mode = _load_splits(cfg["data"])
    base_cfg = _build_model_cfg(cfg.get("model", {}), train_ds)
    train_cfg = TrainConfig.from_dict(cfg.get("train", {}))
    configs = gridmod.expand_space(base_cfg, cfg["space"])
    out = _out_dir(args, cfg)

    records, best_idx, best_params, reports = gridmod.grid_search(
        configs, train_ds, test_ds, train_cfg, jobs=args.jobs)
    gridmod.write_records(records, os.path.join(out, "results.jsonl"))
    prov = dict(reports[best_idx].provenance)
    prov.update({"normalization": norm_mode, "grid_index": best_idx,
                 "selected_epoch": reports[best_idx].selected_epoch})
    ckptmod.save_checkpoint(os.path.join(out, "best.mbsl"),
                            configs[best_idx], train_cfg, best_params, prov)
    best = records[best_idx]
    print(f"ran {len(records)} configs; best #{best_idx}: "
          f"accuracy {best['test_accuracy']:.3f} "
          f"({best['param_count']} params)")
    print(f"wrote {out}/results.jsonl and {out}/best.mbsl")
    return 0


def _find_split(data_dir, suffix):
    hits = sorted(f for f in os.listdir(data_dir)
                  if f.upper().endswith(f"_{suffix}.TS"))
    if len(hits) != 1:
        raise DataError(f"{data_dir}: expected exactly one *_{suffix}.ts file, "
                        f"found {hits or 'none'}")
    return os.path.join(data_dir, hits[0])


def cmd_ablate(args):
    train_ds = datamod.parse_ts_file(_find_split(args.data, "TRAIN"), split="train")
    test_ds = datamod.parse_ts_file(_find_split(args.data, "TEST"), split="test")
    model_section, train_section, norm_mode = {}, {}, "zscore"
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        model_section = raw.get("model", {})
        train_section = raw.get("train", {})
        norm_mode = raw.get("data", {}).get("normalization", "zscore")
    train_ds, test_ds, _ = datamod.normalize_splits(train_ds, test_ds, norm_mode)
    base_cfg = _build_model_cfg(model_section, train_ds)
    train_cfg = TrainConfig.from_dict(train_section)

    variants = gridmod.ablation_variants(args.which, base_cfg)
    labels = [label for label, _ in variants]
    configs = [c for _, c in variants]
    out = args.out or os.path.join("runs", time.strftime("%Y%m%d-%H%M%S"))
    os.makedirs(out, exist_ok=True)
    records, best_idx, _, _ = gridmod.grid_search(
        configs, train_ds, test_ds, train_cfg, jobs=args.jobs, labels=labels)
    gridmod.write_records(records, os.path.join(out, "ablation.jsonl"))
    width = max(len(lb) for lb in labels)
    print(f"{args.which} ablation on {train_ds.meta.name}:")
    for rec in records:
        print(f"  {rec['label']:<{width}}  acc {rec['test_accuracy']:7.3f}  "
              f"params {rec['param_count']}")
    print(f"best: {records[best_idx]['label']}")
    return 0


def cmd_gradcheck(args):
    results = gcmod.run_preset(args.preset, corrupt=args.corrupt)
    failed = 0
    for res in results:
        status = "PASS" if res.ok else "FAIL"
        print(f"{res.case:16s} {res.name:24s} rel={res.max_rel_err:.3e} {status}")
        failed += 0 if res.ok else 1
    if failed:
        print(f"{failed} tensor(s) above tolerance {gcmod.REL_TOL}")
        return 3
    print(f"all {len(results)} tensors within {gcmod.REL_TOL}")
    return 0


def build_parser():
    p = _Parser(prog="mambasl",
                description="Selective state-space time-series classifier")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("inspect", help="print dataset metadata")
    sp.add_argument("path")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("train", help="train one model from a JSON config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("grid", help="cartesian grid search")
    sp.add_argument("--config", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("ablate", help="run one hypothesis ablation")
    sp.add_argument("--data", required=True,
                    help="directory with *_TRAIN.ts and *_TEST.ts")
    sp.add_argument("--which", required=True,
                    help="h1 | h2 | h3 | h4 | depth")
    sp.add_argument("--config", default=None)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--preset", default="tiny", choices=sorted(gcmod.PRESETS))
    sp.add_argument("--corrupt", action="store_true",
                    help=argparse.SUPPRESS)  # negative-control test hook
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SchemaError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (TsParseError, DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
