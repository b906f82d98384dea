"""Shared fixtures: synthetic datasets and real-archive discovery."""

import os
from pathlib import Path

import numpy as np
import pytest

from mambasl import data as datamod

# Real UEA archives are looked up here (override with MAMBASL_UEA_DIR).
# Expected layout: <root>/<Name>/<Name>_TRAIN.ts and <Name>_TEST.ts.
DEFAULT_UEA_DIR = Path(__file__).resolve().parent.parent / "data" / "UEA"

TOY_TS = """@problemName toy
@timeStamps false
@dimensions 2
@equalLength true
@seriesLength 3
@classLabel true a b
@data
1,2,3:4,5,6:a
"""


def uea_root():
    return Path(os.environ.get("MAMBASL_UEA_DIR", DEFAULT_UEA_DIR))


def uea_split_path(name, split):
    return uea_root() / name / f"{name}_{split}.ts"


def load_uea(name):
    """Returns (train, test) datasets or None when the archive is absent."""
    train_p = uea_split_path(name, "TRAIN")
    test_p = uea_split_path(name, "TEST")
    if not (train_p.is_file() and test_p.is_file()):
        return None
    return (datamod.parse_ts_file(train_p, split="train"),
            datamod.parse_ts_file(test_p, split="test"))


def synthetic_dataset(n, d_x, d_y, lengths, seed, separation=1.5,
                      name="synthetic", split="train"):
    """Class-separable gaussian series: class c has a fixed random mean
    vector; lengths is an int (equal length) or an (lmin, lmax) range."""
    rng = np.random.default_rng(seed)
    means = np.random.default_rng(999).normal(0.0, separation, size=(d_y, d_x))
    samples = []
    for i in range(n):
        label = i % d_y
        if isinstance(lengths, tuple):
            length = int(rng.integers(lengths[0], lengths[1] + 1))
        else:
            length = lengths
        vals = rng.normal(means[label], 1.0, size=(length, d_x))
        samples.append(datamod.SeriesSample(values=vals, label=label))
    equal = not isinstance(lengths, tuple)
    meta = datamod.DatasetMeta(
        name=name, d_x=d_x, d_y=d_y, equal_length=equal,
        series_length=lengths if equal else None,
        label_names=[f"c{i}" for i in range(d_y)], split=split)
    return datamod.TimeSeriesDataset(meta=meta, samples=samples)


@pytest.fixture
def toy_ts_text():
    return TOY_TS


@pytest.fixture
def toy_ts_file(tmp_path):
    path = tmp_path / "toy.ts"
    path.write_text(TOY_TS, encoding="utf-8")
    return path


@pytest.fixture
def small_train_test():
    train = synthetic_dataset(24, 3, 2, 20, seed=11, split="train")
    test = synthetic_dataset(16, 3, 2, 20, seed=12, split="test")
    return train, test
