"""Static descriptions of models, parallelism and workloads.

The configuration document is YAML with exactly three top-level lists::

    architectures:
      - {family_name: vicuna, variant_name: vicuna-tiny, hidden_size: 256, ...}
    parallelism:
      - {strategy: TensorParallel, degree: 2}
    workloads:
      - {batch_size: 8, seq_in: 32, seq_out: 32}

Unknown keys anywhere are schema errors. ``dtype_bytes`` defaults to 2.
"""

from __future__ import annotations

import enum
from dataclasses import MISSING, asdict, dataclass, fields
from functools import lru_cache
from importlib import resources
from typing import Any

import yaml

from .errors import ParseError, SchemaError, ValidationError


class Strategy(str, enum.Enum):
    TENSOR = "TensorParallel"
    PIPELINE = "PipelineParallel"
    DATA = "DataParallel"


class Activation(str, enum.Enum):
    PLAIN = "plain"
    GATED = "gated"


class NormKind(str, enum.Enum):
    LAYER_NORM = "layer_norm"
    RMS_NORM = "rms_norm"


@dataclass(frozen=True)
class ModelArch:
    family_name: str
    variant_name: str
    hidden_size: int
    num_layers: int
    num_heads: int
    num_kv_heads: int
    ffn_dim: int
    vocab_size: int
    activation_kind: Activation = Activation.GATED
    norm_kind: NormKind = NormKind.RMS_NORM
    dtype_bytes: int = 2

    def __post_init__(self):
        # accept plain strings from documents
        object.__setattr__(self, "activation_kind", Activation(self.activation_kind))
        object.__setattr__(self, "norm_kind", NormKind(self.norm_kind))

    @property
    def kv_dim(self) -> int:
        return self.hidden_size * self.num_kv_heads // self.num_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["activation_kind"] = self.activation_kind.value
        d["norm_kind"] = self.norm_kind.value
        return d


@dataclass(frozen=True)
class ParallelismConfig:
    strategy: Strategy
    degree: int

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))

    def to_dict(self) -> dict:
        return {"strategy": self.strategy.value, "degree": self.degree}


@dataclass(frozen=True)
class WorkloadConfig:
    batch_size: int
    seq_in: int
    seq_out: int

    @property
    def tokens(self) -> int:
        """Tokens processed per sequence: the prompt plus every generated token."""
        return self.seq_in + self.seq_out

    @property
    def forward_steps(self) -> int:
        """One prefill step followed by one decode step per output token."""
        return 1 + self.seq_out

    def to_dict(self) -> dict:
        return asdict(self)


_DIM_FIELDS = ("hidden_size", "num_layers", "num_heads", "num_kv_heads",
               "ffn_dim", "vocab_size", "dtype_bytes")


def _is_pos_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool) and v >= 1


def validate(arch: ModelArch | None = None, par: ParallelismConfig | None = None,
             work: WorkloadConfig | None = None) -> list[str]:
    """Return every violated invariant. An empty list means the combination is valid."""
    out: list[str] = []
    if arch is not None:
        for name in _DIM_FIELDS:
            if not _is_pos_int(getattr(arch, name)):
                out.append(f"{name} must be a positive integer")
        if _is_pos_int(arch.num_heads) and _is_pos_int(arch.num_kv_heads):
            if arch.num_heads % arch.num_kv_heads:
                out.append("num_heads not divisible by num_kv_heads")
        if _is_pos_int(arch.hidden_size) and _is_pos_int(arch.num_heads):
            if arch.hidden_size % arch.num_heads:
                out.append("hidden_size not divisible by num_heads")
    if par is not None:
        if not _is_pos_int(par.degree):
            out.append("degree must be a positive integer")
        elif arch is not None:
            if (par.strategy is Strategy.TENSOR and _is_pos_int(arch.num_heads)
                    and arch.num_heads % par.degree):
                out.append("num_heads not divisible by degree")
            if (par.strategy is Strategy.PIPELINE and _is_pos_int(arch.num_layers)
                    and par.degree > arch.num_layers):
                out.append("degree exceeds num_layers")
    if work is not None:
        for name in ("batch_size", "seq_in", "seq_out"):
            if not _is_pos_int(getattr(work, name)):
                out.append(f"{name} must be a positive integer")
    return out


def check(arch=None, par=None, work=None) -> None:
    """Raise ValidationError listing all violations, if any."""
    violations = validate(arch, par, work)
    if violations:
        raise ValidationError(violations)


# -- documents -------------------------------------------------------------

_SECTIONS = {
    "architectures": ModelArch,
    "parallelism": ParallelismConfig,
    "workloads": WorkloadConfig,
}


def _build(cls, entry: Any, where: str):
    if not isinstance(entry, dict):
        raise SchemaError(f"{where}: expected a mapping, got {type(entry).__name__}")
    known = {f.name: f for f in fields(cls)}
    extra = sorted(set(entry) - set(known))
    if extra:
        raise SchemaError(f"{where}: unknown field {extra[0]!r}")
    missing = [n for n, f in known.items() if n not in entry and f.default is MISSING]
    if missing:
        raise SchemaError(f"{where}: missing field {missing[0]!r}")
    try:
        return cls(**entry)
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from None


def parse_configs(data: Any):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise SchemaError("top level must be a mapping")
    extra = sorted(set(data) - set(_SECTIONS))
    if extra:
        raise SchemaError(f"unknown field {extra[0]!r} at top level")
    out = []
    for section, cls in _SECTIONS.items():
        entries = data.get(section) or []
        if not isinstance(entries, list):
            raise SchemaError(f"{section}: expected a list")
        out.append([_build(cls, e, f"{section}[{i}]") for i, e in enumerate(entries)])
    return tuple(out)


def load_configs(document: str):
    """Parse a YAML configuration document into (archs, parallelism, workloads)."""
    try:
        data = yaml.safe_load(document)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        locus = f"line {mark.line + 1}, column {mark.column + 1}: " if mark else ""
        raise ParseError(f"{locus}{getattr(exc, 'problem', None) or exc}") from None
    return parse_configs(data)


def dump_configs(archs=(), pars=(), works=()) -> str:
    doc = {
        "architectures": [a.to_dict() for a in archs],
        "parallelism": [p.to_dict() for p in pars],
        "workloads": [w.to_dict() for w in works],
    }
    return yaml.safe_dump(doc, sort_keys=False)


def load_config_file(path):
    with open(path, encoding="utf-8") as fh:
        return load_configs(fh.read())


# -- presets ---------------------------------------------------------------

@lru_cache(maxsize=None)
def _preset_table() -> dict[str, tuple[str, ModelArch]]:
    text = resources.files(__package__).joinpath("presets.yaml").read_text("utf-8")
    raw = yaml.safe_load(text)
    table = {}
    for scale in ("desk", "full"):
        for entry in raw[scale]:
            arch = _build(ModelArch, entry, f"presets.{scale}")
            table[arch.variant_name] = (scale, arch)
    return table


def preset(name: str) -> ModelArch:
    try:
        return _preset_table()[name][1]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}") from None


def preset_names(scale: str = "desk") -> list[str]:
    return [n for n, (s, _) in _preset_table().items() if s == scale]
