"""Adapter architectures and label-indexed adapter banks.

Architectures: LHUC (scale hidden units by 2*sigmoid(r)), HUB (add a bias r),
RAB (residual bottleneck: h + LN(DP(P_up GELU(P_down h)))), and the structured
speaker-deficiency cascade (a deficiency RAB followed by a speaker RAB).
Every adapter starts as the exact identity.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .backbone import ConfigurationError, InsertionPoint, digest
from .diffcore import DiffArray, DimensionError, UsageError

__all__ = [
    "LHUC", "HUB", "RAB", "STRUCTURED_RAB", "GLOBAL", "DEFICIENCY", "SPEAKER",
    "SPEAKER_PLUS_DEFICIENCY", "SEVERITIES", "ConditionKey", "AdapterSpec", "AdapterEntry",
    "AdapterBank", "ResolutionError", "apply_lhuc", "apply_hub", "apply_rab",
    "apply_structured", "resolve", "create_entry", "parameter_count",
]

LHUC, HUB, RAB, STRUCTURED_RAB = "lhuc", "hub", "rab", "structured_rab"
GLOBAL, DEFICIENCY, SPEAKER = "global", "deficiency", "speaker"
SPEAKER_PLUS_DEFICIENCY = "speaker+deficiency"
ARCHITECTURES = (LHUC, HUB, RAB, STRUCTURED_RAB)
GRANULARITIES = (GLOBAL, DEFICIENCY, SPEAKER, SPEAKER_PLUS_DEFICIENCY)
# least to most severe
SEVERITIES = ("H", "M", "L", "VL")


class ResolutionError(KeyError):
    pass


@dataclass(frozen=True, order=True)
class ConditionKey:
    kind: str
    value: str | None = None

    @classmethod
    def global_(cls) -> "ConditionKey":
        return cls("global")

    @classmethod
    def deficiency(cls, sd: str) -> "ConditionKey":
        return cls("defi", sd)

    @classmethod
    def speaker(cls, s: str) -> "ConditionKey":
        return cls("spk", s)

    @property
    def tag(self) -> str:
        return "global" if self.kind == "global" else f"{self.kind}:{self.value}"

    @classmethod
    def parse(cls, tag: str) -> "ConditionKey":
        if tag == "global":
            return cls("global")
        kind, sep, value = tag.partition(":")
        if not sep or kind not in ("defi", "spk") or not value:
            raise ValueError(f"bad condition key tag {tag!r}")
        return cls(kind, value)

    def __str__(self) -> str:
        return self.tag


@dataclass(frozen=True)
class AdapterSpec:
    """Architecture, insertion position(s) and label granularity of one system.

    ``positions`` uses table-style integers (0 = after the CNN encoder,
    x = output of the x-th transformer block); structured specs carry
    ``(deficiency_position, speaker_position)``.
    """

    architecture: str
    positions: tuple = (0,)
    label_granularity: str = SPEAKER
    bottleneck_k: int | None = None
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.architecture!r}")
        if self.label_granularity not in GRANULARITIES:
            raise ConfigurationError(f"unknown label granularity {self.label_granularity!r}")
        structured = self.architecture == STRUCTURED_RAB
        if structured != (self.label_granularity == SPEAKER_PLUS_DEFICIENCY):
            raise ConfigurationError("structured RAB goes with speaker+deficiency labels and only those")
        positions = tuple(int(p) for p in (self.positions if isinstance(self.positions, (tuple, list))
                                          else (self.positions,)))
        object.__setattr__(self, "positions", positions)
        if len(positions) != (2 if structured else 1):
            raise ConfigurationError(f"{self.architecture} needs {2 if structured else 1} position(s)")
        needs_k = self.architecture in (RAB, STRUCTURED_RAB)
        if needs_k and (self.bottleneck_k is None or self.bottleneck_k < 1):
            raise ConfigurationError("bottleneck_k is required for RAB adapters")
        if not needs_k and self.bottleneck_k is not None:
            raise ConfigurationError("bottleneck_k only applies to RAB adapters")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError("dropout_p must lie in [0, 1)")

    @property
    def entry_architecture(self) -> str:
        return RAB if self.architecture == STRUCTURED_RAB else self.architecture

    def point_for(self, key: ConditionKey) -> InsertionPoint:
        if self.architecture == STRUCTURED_RAB:
            return InsertionPoint.from_position(self.positions[0 if key.kind == "defi" else 1])
        return InsertionPoint.from_position(self.positions[0])

    def required_keys(self, speaker: str, deficiency: str) -> list[ConditionKey]:
        g = self.label_granularity
        if g == GLOBAL:
            return [ConditionKey.global_()]
        if g == DEFICIENCY:
            return [ConditionKey.deficiency(deficiency)]
        if g == SPEAKER:
            return [ConditionKey.speaker(speaker)]
        return [ConditionKey.deficiency(deficiency), ConditionKey.speaker(speaker)]

    @property
    def name(self) -> str:
        pos = ",".join(str(p) for p in self.positions)
        return f"{self.architecture}@{pos}/{self.label_granularity}"

    def to_dict(self) -> dict:
        return {"architecture": self.architecture, "positions": list(self.positions),
                "label_granularity": self.label_granularity, "bottleneck_k": self.bottleneck_k,
                "dropout_p": self.dropout_p}

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterSpec":
        return cls(d["architecture"], tuple(d["positions"]), d["label_granularity"],
                   d.get("bottleneck_k"), d.get("dropout_p", 0.1))


def _check_width(h, m):
    if h.shape[-1] != m:
        raise DimensionError(f"adapter width {m} does not match hidden width {h.shape[-1]}")


def apply_lhuc(h, r) -> DiffArray:
    """``2*sigmoid(r) * h`` broadcast over frames."""
    h, r = dc.as_array(h), dc.as_array(r)
    _check_width(h, r.shape[-1])
    return dc.mul(h, dc.scale(dc.sigmoid(r), 2.0))


def apply_hub(h, r) -> DiffArray:
    h, r = dc.as_array(h), dc.as_array(r)
    _check_width(h, r.shape[-1])
    return dc.add(h, r)


def apply_rab(h, params: dict, training: bool = False, rng=None, dropout_p: float = 0.0) -> DiffArray:
    """Residual adapter block ``h + LN(DP(P_up GELU(P_down h))))``."""
    h = dc.as_array(h)
    p_down, p_up = params["p_down"], params["p_up"]
    _check_width(h, p_down.shape[1])
    if p_up.shape != (p_down.shape[1], p_down.shape[0]):
        raise DimensionError(f"p_up {p_up.shape} does not mirror p_down {p_down.shape}")
    inner = dc.gelu(dc.matmul(h, dc.transpose(p_down)))
    inner = dc.matmul(inner, dc.transpose(p_up))
    inner = dc.dropout(inner, dropout_p, rng, training)
    return dc.add(h, dc.layernorm(inner, params["ln_gamma"], params["ln_beta"], 1e-5))


def apply_structured(h, theta_sd: dict, theta_s: dict, training: bool = False, rng=None,
                     dropout_p: float = 0.0) -> DiffArray:
    """Deficiency RAB first, then the speaker RAB on its output."""
    h_sd = apply_rab(h, theta_sd, training, rng, dropout_p)
    return apply_rab(h_sd, theta_s, training, rng, dropout_p)


def parameter_count(architecture: str, width: int, k: int | None = None) -> int:
    if architecture in (LHUC, HUB):
        return width
    return 2 * k * width + 2 * width


class AdapterEntry:
    """Parameters of one adapter for one condition label at one insertion point."""

    def __init__(self, key: ConditionKey, architecture: str, point: InsertionPoint,
                 params: dict[str, DiffArray], dropout_p: float = 0.0):
        self.key = key
        self.architecture = architecture
        self.point = point
        self.params = params
        self.dropout_p = dropout_p

    @property
    def width(self) -> int:
        if self.architecture == RAB:
            return self.params["p_down"].shape[1]
        return self.params["r"].shape[0]

    def apply(self, h, training: bool = False, rng=None) -> DiffArray:
        if self.architecture == LHUC:
            return apply_lhuc(h, self.params["r"])
        if self.architecture == HUB:
            return apply_hub(h, self.params["r"])
        return apply_rab(h, self.params, training, rng, self.dropout_p)

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def named_parameters(self) -> list[tuple[str, DiffArray]]:
        return [(f"adapter.{self.key.tag}.{n}", p) for n, p in self.params.items()]

    def digest(self) -> str:
        return digest(self.named_parameters())

    def copy(self) -> "AdapterEntry":
        params = {n: DiffArray(p.data, requires_grad=True) for n, p in self.params.items()}
        return AdapterEntry(self.key, self.architecture, self.point, params, self.dropout_p)

    def __repr__(self) -> str:
        return f"AdapterEntry({self.key.tag}, {self.architecture} at {self.point})"


def _identity_params(architecture: str, width: int, k: int | None, rng) -> dict[str, np.ndarray]:
    if architecture in (LHUC, HUB):
        return {"r": np.zeros(width)}
    lim = np.sqrt(6.0 / (width + k))
    return {"p_down": rng.uniform(-lim, lim, size=(k, width)),
            "p_up": np.zeros((width, k)),
            "ln_gamma": np.ones(width),
            "ln_beta": np.zeros(width)}


class AdapterBank:
    """Map from condition keys to adapter parameter sets for one :class:`AdapterSpec`."""

    def __init__(self, spec: AdapterSpec, width: int, seed: int = 0):
        self.spec = spec
        self.width = width
        self.seed = seed
        self.entries: dict[ConditionKey, AdapterEntry] = {}

    def __contains__(self, key: ConditionKey) -> bool:
        return key in self.entries

    def __getitem__(self, key: ConditionKey) -> AdapterEntry:
        try:
            return self.entries[key]
        except KeyError:
            raise ResolutionError(f"adapter bank has no entry for {key.tag}") from None

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self) -> list[ConditionKey]:
        return list(self.entries)

    def create(self, key: ConditionKey, point: InsertionPoint | None = None,
               width: int | None = None) -> AdapterEntry:
        return create_entry(self, key, point or self.spec.point_for(key), width or self.width, self.spec)

    def ensure(self, key: ConditionKey) -> AdapterEntry:
        return self.entries[key] if key in self.entries else self.create(key)

    def remove(self, key: ConditionKey) -> None:
        self.entries.pop(key, None)

    def named_parameters(self) -> list[tuple[str, DiffArray]]:
        out = []
        for key in sorted(self.entries):
            out.extend(self.entries[key].named_parameters())
        return out

    def parameters(self, kind: str | None = None) -> list[DiffArray]:
        return [p for key in sorted(self.entries) if kind is None or key.kind == kind
                for p in self.entries[key].params.values()]

    def n_parameters(self) -> int:
        return sum(e.n_parameters() for e in self.entries.values())

    def digest(self, kind: str | None = None) -> str:
        items = [(n, p) for key in sorted(self.entries) if kind is None or key.kind == kind
                 for n, p in self.entries[key].named_parameters()]
        return digest(items)

    def set_trainable(self, flag: bool, kind: str | None = None) -> None:
        for key, entry in self.entries.items():
            if kind is None or key.kind == kind:
                entry.set_trainable(flag)

    def copy(self) -> "AdapterBank":
        other = AdapterBank(self.spec, self.width, self.seed)
        other.entries = {k: e.copy() for k, e in self.entries.items()}
        return other


def create_entry(bank: AdapterBank, key: ConditionKey, insertion_point: InsertionPoint,
                 width: int, spec: AdapterSpec) -> AdapterEntry:
    """Add an identity-initialised entry for ``key``; duplicates are an error."""
    if key in bank.entries:
        raise UsageError(f"adapter entry {key.tag} already exists")
    arch = spec.entry_architecture
    seq = np.random.SeedSequence([bank.seed, zlib.crc32(key.tag.encode()), insertion_point.position])
    values = _identity_params(arch, width, spec.bottleneck_k, np.random.default_rng(seq))
    params = {n: DiffArray(v, requires_grad=True, name=f"adapter.{key.tag}.{n}") for n, v in values.items()}
    entry = AdapterEntry(key, arch, insertion_point, params, spec.dropout_p)
    bank.entries[key] = entry
    return entry


def resolve(spec: AdapterSpec, bank: AdapterBank, speaker: str, deficiency: str) -> list[AdapterEntry]:
    """Ordered adapter stack for one utterance; deficiency before speaker."""
    return [bank[key] for key in spec.required_keys(speaker, deficiency)]
