"""UEA `.ts` archive loading, normalization, batching and a binary cache.

The text format: `@`-prefixed header directives, then `@data`, then one
sample per line with `:`-separated dimensions, comma-separated values
and the class label as the final field.  Directive names are matched
case-insensitively; `#` lines are comments.
"""

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import CheckpointError, DataError, TsParseError

EPS_STD = 1e-8
CACHE_MAGIC = b"TSBC"
CACHE_VERSION = 1


@dataclass
class SeriesSample:
    values: np.ndarray          # [length, d_x] float64
    label: int

    @property
    def length(self):
        return self.values.shape[0]


@dataclass
class DatasetMeta:
    name: str
    d_x: int
    d_y: int
    equal_length: bool
    series_length: int | None
    label_names: list
    split: str = "train"


@dataclass
class TimeSeriesDataset:
    meta: DatasetMeta
    samples: list

    def __len__(self):
        return len(self.samples)

    @property
    def max_length(self):
        return max(s.length for s in self.samples)

    @property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)


@dataclass
class NormalizationStats:
    mean: np.ndarray            # [d_x]
    std: np.ndarray             # [d_x], clamped to >= EPS_STD


@dataclass
class Batch:
    padded: np.ndarray          # [B, L_max, d_x], zeros outside mask
    lengths: np.ndarray         # [B]
    labels: np.ndarray          # [B]
    mask: np.ndarray            # [B, L_max] bool, mask[i, t] = t < lengths[i]


def _parse_bool(token, lineno):
    t = token.lower()
    if t == "true":
        return True
    if t == "false":
        return False
    raise TsParseError(f"expected true/false, got {token!r}", line=lineno)


def _parse_values(dim_text, lineno):
    out = []
    for tok in dim_text.split(","):
        tok = tok.strip()
        if tok == "?":
            raise TsParseError("missing values unsupported", line=lineno)
        try:
            v = float(tok)
        except ValueError:
            raise TsParseError(f"non-numeric token {tok!r}", line=lineno) from None
        if not math.isfinite(v):
            raise TsParseError(f"non-numeric token {tok!r}", line=lineno)
        out.append(v)
    return out


def parse_ts(text, name=None, split="train"):
    """Parse `.ts` text (str or bytes) into a TimeSeriesDataset."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    d_x = None
    equal_length = None
    series_length = None
    label_names = None
    problem_name = name
    in_data = False
    samples = []
    label_index = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if not in_data and line.startswith("@"):
            parts = line[1:].split()
            key = parts[0].lower()
            args = parts[1:]
            if key == "data":
                in_data = True
            elif key == "problemname":
                problem_name = args[0] if args else problem_name
            elif key == "timestamps":
                if args and _parse_bool(args[0], lineno):
                    raise TsParseError("timestamped files unsupported", line=lineno)
            elif key == "univariate":
                if args and _parse_bool(args[0], lineno):
                    d_x = 1
            elif key == "dimensions":
                d_x = int(args[0])
            elif key == "equallength":
                equal_length = _parse_bool(args[0], lineno)
            elif key == "serieslength":
                series_length = int(args[0])
            elif key == "classlabel":
                if not args or not _parse_bool(args[0], lineno):
                    raise TsParseError("class labels required for classification",
                                       line=lineno)
                label_names = args[1:]
                label_index = {nm: i for i, nm in enumerate(label_names)}
            # unknown directives tolerated
            continue
        if not in_data:
            raise TsParseError(f"unexpected text before @data: {line!r}", line=lineno)

        fields = line.split(":")
        if len(fields) < 2:
            raise TsParseError("expected ':'-separated dimensions and a label",
                               line=lineno)
        label_tok = fields[-1].strip()
        dims = [_parse_values(f, lineno) for f in fields[:-1]]
        if d_x is None:
            d_x = len(dims)
        if len(dims) != d_x:
            raise TsParseError(
                f"dimension count mismatch: expected {d_x}, got {len(dims)}",
                line=lineno)
        lens = {len(d) for d in dims}
        if len(lens) != 1:
            raise TsParseError("dimension-length mismatch within sample", line=lineno)
        if lens == {0}:
            raise TsParseError("empty sample", line=lineno)
        if label_names is None:
            raise TsParseError("class labels required for classification",
                               line=lineno)
        if label_tok not in label_index:
            raise TsParseError(f"unknown class label {label_tok!r}", line=lineno)
        values = np.array(dims, dtype=np.float64).T   # [length, d_x]
        samples.append(SeriesSample(values=values, label=label_index[label_tok]))

    if not in_data:
        raise TsParseError("missing @data directive")
    if not samples:
        raise TsParseError("empty data section")

    lengths = {s.length for s in samples}
    if equal_length is None:
        equal_length = len(lengths) == 1
    if equal_length:
        if series_length is None:
            series_length = samples[0].length
        if lengths != {series_length}:
            raise TsParseError(
                f"equal-length dataset with lengths {sorted(lengths)} != "
                f"declared {series_length}")
    else:
        series_length = None

    meta = DatasetMeta(
        name=problem_name or "unnamed", d_x=d_x, d_y=len(label_names),
        equal_length=equal_length, series_length=series_length,
        label_names=list(label_names), split=split)
    return TimeSeriesDataset(meta=meta, samples=samples)


def parse_ts_file(path, split="train"):
    with open(path, "rb") as fh:
        return parse_ts(fh.read(), split=split)


def write_ts(ds):
    """Serialize back to `.ts` text; parse(write(ds)) reproduces ds."""
    m = ds.meta
    lines = [f"@problemName {m.name}", "@timeStamps false"]
    if m.d_x == 1:
        lines.append("@univariate true")
    else:
        lines.append(f"@dimensions {m.d_x}")
    lines.append(f"@equalLength {'true' if m.equal_length else 'false'}")
    if m.series_length is not None:
        lines.append(f"@seriesLength {m.series_length}")
    lines.append("@classLabel true " + " ".join(m.label_names))
    lines.append("@data")
    for s in ds.samples:
        dims = [",".join(repr(float(v)) for v in s.values[:, c])
                for c in range(m.d_x)]
        lines.append(":".join(dims) + ":" + m.label_names[s.label])
    return "\n".join(lines) + "\n"


def fit_normalizer(train):
    """Per-channel mean and population std over every timestep of every
    train sample; std clamped at EPS_STD so constant channels stay finite."""
    stacked = np.concatenate([s.values for s in train.samples], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), EPS_STD)
    return NormalizationStats(mean=mean, std=std)


def apply_normalizer(ds, stats):
    if ds.meta.d_x != stats.mean.shape[0]:
        raise DataError(
            f"normalizer dimension {stats.mean.shape[0]} != data {ds.meta.d_x}")
    samples = [SeriesSample(values=(s.values - stats.mean) / stats.std,
                            label=s.label) for s in ds.samples]
    return TimeSeriesDataset(meta=ds.meta, samples=samples)


def normalize_instance(ds):
    """Each sample standardized by its own per-channel stats."""
    samples = []
    for s in ds.samples:
        mean = s.values.mean(axis=0)
        std = np.maximum(s.values.std(axis=0), EPS_STD)
        samples.append(SeriesSample(values=(s.values - mean) / std, label=s.label))
    return TimeSeriesDataset(meta=ds.meta, samples=samples)


def normalize_splits(train, test, mode):
    """Apply the chosen normalization to both splits; stats always come
    from the train split only."""
    if mode == "zscore":
        stats = fit_normalizer(train)
        return apply_normalizer(train, stats), apply_normalizer(test, stats), stats
    if mode == "instance":
        return normalize_instance(train), normalize_instance(test), None
    if mode == "none":
        return train, test, None
    raise DataError(f"unknown normalization mode {mode!r}")


def make_batch(samples, dtype=np.float32):
    lmax = max(s.length for s in samples)
    d_x = samples[0].values.shape[1]
    padded = np.zeros((len(samples), lmax, d_x), dtype=dtype)
    lengths = np.zeros(len(samples), dtype=np.int64)
    labels = np.zeros(len(samples), dtype=np.int64)
    for i, s in enumerate(samples):
        padded[i, :s.length] = s.values
        lengths[i] = s.length
        labels[i] = s.label
    mask = np.arange(lmax)[None, :] < lengths[:, None]
    return Batch(padded=padded, lengths=lengths, labels=labels, mask=mask)


def batch_iter(ds, batch_size, shuffle=False, seed=0, epoch=0, dtype=np.float32):
    """Yield padded batches covering the dataset exactly once; shuffle
    order is a pure function of (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(ds.samples))
    if shuffle:
        order = rngmod.stream(seed, rngmod.STREAM_SHUFFLE, epoch).permutation(order)
    for start in range(0, len(order), batch_size):
        chunk = [ds.samples[i] for i in order[start:start + batch_size]]
        yield make_batch(chunk, dtype=dtype)


def save_cache(ds, path):
    """Binary cache: magic, u32 version, u32 JSON length, JSON meta block,
    then row-major float32 little-endian payloads in sample order."""
    m = ds.meta
    meta = {
        "name": m.name, "d_x": m.d_x, "d_y": m.d_y,
        "equal_length": m.equal_length, "series_length": m.series_length,
        "label_names": m.label_names, "split": m.split,
        "samples": [{"length": s.length, "label": int(s.label)}
                    for s in ds.samples],
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", CACHE_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for s in ds.samples:
            fh.write(np.ascontiguousarray(s.values, dtype="<f4").tobytes())


def load_cache(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CACHE_MAGIC:
        raise CheckpointError("not a dataset cache file (bad magic)")
    version, jlen = struct.unpack_from("<II", raw, 4)
    if version != CACHE_VERSION:
        raise CheckpointError(f"unsupported cache version {version}")
    meta = json.loads(raw[12:12 + jlen].decode("utf-8"))
    offset = 12 + jlen
    samples = []
    for rec in meta["samples"]:
        n = rec["length"] * meta["d_x"]
        vals = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
        offset += 4 * n
        samples.append(SeriesSample(
            values=vals.reshape(rec["length"], meta["d_x"]).astype(np.float64),
            label=rec["label"]))
    dmeta = DatasetMeta(
        name=meta["name"], d_x=meta["d_x"], d_y=meta["d_y"],
        equal_length=meta["equal_length"], series_length=meta["series_length"],
        label_names=meta["label_names"], split=meta["split"])
    return TimeSeriesDataset(meta=dmeta, samples=samples)
