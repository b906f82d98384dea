"""Configuration objects for the SSM core, the Mamba block, the full model
and the training protocol.

All configs are plain dataclasses that round-trip through dicts/JSON via
``to_dict`` / ``from_dict``; ``from_dict`` rejects unknown keys so that a
run-config typo fails loudly instead of silently using a default.
"""

import math
from dataclasses import dataclass, field, fields, asdict

from .errors import SchemaError

AGGREGATIONS = ("adaptive", "full", "avg", "max", "last")
NORMALIZATIONS = ("zscore", "instance", "none")
SELECTIONS = ("eval-metric", "train-loss")


def _from_dict(cls, d, nested=()):
    if not isinstance(d, dict):
        raise SchemaError(f"{cls.__name__}: expected a mapping, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise SchemaError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = dict(d)
    for name, sub in nested:
        if name in kwargs and isinstance(kwargs[name], dict):
            kwargs[name] = sub.from_dict(kwargs[name])
    return cls(**kwargs)


@dataclass
class SsmConfig:
    """Shape and switch settings of the selective state-space core.

    theta_dt / theta_b / theta_c pick the time-variant (1) or
    time-invariant (0) form of the step size, input map and readout map.
    """

    d_state: int = 8
    d_rank: int = 0          # 0 -> ceil(d_inner / 16), resolved at build time
    theta_dt: int = 1
    theta_b: int = 1
    theta_c: int = 1
    use_d: int = 0
    share_a: bool = False
    euler_b: bool = False    # simplified b_bar = dt * B rule, for cross-checks

    def __post_init__(self):
        for name in ("theta_dt", "theta_b", "theta_c", "use_d"):
            if getattr(self, name) not in (0, 1):
                raise SchemaError(f"SsmConfig.{name} must be 0 or 1")
        if self.d_state < 1:
            raise SchemaError("SsmConfig.d_state must be >= 1")
        if self.d_rank < 0:
            raise SchemaError("SsmConfig.d_rank must be >= 0")

    def resolve_rank(self, d_inner):
        return self.d_rank if self.d_rank > 0 else max(1, math.ceil(d_inner / 16))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


@dataclass
class BlockConfig:
    """Gated block around the SSM: expansion, local conv, norm, residual.

    use_block_residual left as None resolves by depth: off for a single
    block, on for stacks of two or more.
    """

    expand: int = 1
    d_conv: int = 4
    use_norm: bool = True
    use_block_residual: bool | None = None

    def __post_init__(self):
        if self.expand < 1:
            raise SchemaError("BlockConfig.expand must be >= 1")
        if self.d_conv < 1:
            raise SchemaError("BlockConfig.d_conv must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


@dataclass
class ModelConfig:
    """Every architectural degree of freedom of the classifier."""

    d_x: int = 1
    d_y: int = 2
    d_m: int = 64
    depth: int = 1
    seq_ratio: float = 0.02   # receptive-field scaling of the input conv
    k_min: int = 3
    fixed_k: int | None = None  # overrides the scaling policy when set
    aggregation: str = "adaptive"
    n_heads: int = 4
    dropout: float = 0.1
    ssm: SsmConfig = field(default_factory=SsmConfig)
    block: BlockConfig = field(default_factory=BlockConfig)

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise SchemaError(f"aggregation must be one of {AGGREGATIONS}")
        if self.n_heads < 1:
            raise SchemaError("n_heads must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise SchemaError("dropout must be in [0, 1)")
        if self.depth < 1:
            raise SchemaError("depth must be >= 1")
        if min(self.d_x, self.d_y, self.d_m) < 1:
            raise SchemaError("d_x, d_y, d_m must be >= 1")

    @property
    def d_inner(self):
        return self.block.expand * self.d_m

    def block_residual(self):
        if self.block.use_block_residual is None:
            return self.depth >= 2
        return bool(self.block.use_block_residual)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d, nested=(("ssm", SsmConfig), ("block", BlockConfig)))


@dataclass
class TrainConfig:
    """Optimization protocol; defaults follow the standard benchmark setup."""

    batch_size: int = 16
    lr: float = 0.001
    epochs: int = 100
    patience: int = 10
    seed: int = 2021
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    selection: str = "eval-metric"

    def __post_init__(self):
        if self.batch_size < 1:
            raise SchemaError("batch_size must be >= 1")
        if self.epochs < 0:
            raise SchemaError("epochs must be >= 0")
        if self.patience < 1:
            raise SchemaError("patience must be >= 1")
        if self.selection not in SELECTIONS:
            raise SchemaError(f"selection must be one of {SELECTIONS}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)
