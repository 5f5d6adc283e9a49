"""Miniature self-supervised-style acoustic model.

Raw waveform -> strided conv feature encoder -> feature layernorm and
projection -> pre-norm transformer blocks -> linear CTC head.  Adapters are
applied at two kinds of hooks: right after the conv encoder (before the
positional encoding is added) and at the output of a transformer block.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import DiffArray

__all__ = ["BackboneConfig", "BackboneModel", "InsertionPoint", "AFTER_CNN", "IN_BLOCK",
           "InputError", "ConfigurationError", "encode", "encoder_features",
           "encode_from_features", "named_parameters", "output_length", "digest"]

AFTER_CNN = "after_cnn"
IN_BLOCK = "in_block"


class InputError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class InsertionPoint:
    kind: str = AFTER_CNN
    block_index: int | None = None

    def __post_init__(self):
        if self.kind not in (AFTER_CNN, IN_BLOCK):
            raise ConfigurationError(f"unknown insertion kind {self.kind!r}")
        if (self.kind == IN_BLOCK) != (self.block_index is not None):
            raise ConfigurationError("block_index is required exactly for in-block insertion")

    @classmethod
    def from_position(cls, pos: int) -> "InsertionPoint":
        """Table-style position: 0 is after the CNN, x >= 1 is the x-th block."""
        if pos < 0:
            raise ConfigurationError(f"position must be >= 0, got {pos}")
        return cls(AFTER_CNN) if pos == 0 else cls(IN_BLOCK, pos - 1)

    @property
    def position(self) -> int:
        return 0 if self.kind == AFTER_CNN else self.block_index + 1

    def __str__(self) -> str:
        return "cnn" if self.kind == AFTER_CNN else f"block{self.block_index}"


@dataclass
class BackboneConfig:
    conv_layers: Sequence[tuple[int, int, int]] = ((16, 64, 16), (32, 5, 4), (32, 5, 5))
    d_model: int = 32
    n_blocks: int = 2
    n_heads: int = 2
    d_ff: int = 64
    vocab_size: int = 41
    dropout_p: float = 0.1
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.conv_layers = tuple(tuple(int(v) for v in layer) for layer in self.conv_layers)
        if not self.conv_layers:
            raise ConfigurationError("at least one conv layer is required")
        if self.d_model % self.n_heads:
            raise ConfigurationError("d_model must be divisible by n_heads")
        if self.vocab_size < 2:
            raise ConfigurationError("vocab_size must include blank plus one token")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError("dropout_p must lie in [0, 1)")
        if self.ln_eps <= 0:
            raise ConfigurationError("ln_eps must be positive")
        if self.n_blocks < 1:
            raise ConfigurationError("n_blocks must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_layers"] = [list(layer) for layer in self.conv_layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


def output_length(n_samples: int, conv_layers) -> int:
    t = n_samples
    for _, k, s in conv_layers:
        if t < k:
            return 0
        t = (t - k) // s + 1
    return t


def _xavier(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class BackboneModel:
    """Parameter registry plus configuration; the forward pass lives in :func:`encode`."""

    def __init__(self, config: BackboneConfig | None = None):
        self.config = config or BackboneConfig()
        self.params: dict[str, DiffArray] = {}
        self.banks: list = []
        self._init_params()

    def _add(self, name, value):
        self.params[name] = DiffArray(value, requires_grad=True, name=name)

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        cin = 1
        for i, (cout, k, _) in enumerate(cfg.conv_layers):
            # He scaling keeps activations O(1) through the GELU stack
            self._add(f"conv.{i}.kernel", rng.normal(0.0, math.sqrt(2.0 / (k * cin)), size=(k, cin, cout)))
            self._add(f"conv.{i}.bias", np.zeros(cout))
            cin = cout
        d = cfg.d_model
        self._add("feat.ln.gamma", np.ones(cin))
        self._add("feat.ln.beta", np.zeros(cin))
        self._add("feat.proj.weight", _xavier(rng, cin, d))
        self._add("feat.proj.bias", np.zeros(d))
        for b in range(cfg.n_blocks):
            p = f"block.{b}"
            self._add(f"{p}.ln1.gamma", np.ones(d))
            self._add(f"{p}.ln1.beta", np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                self._add(f"{p}.attn.{w}", _xavier(rng, d, d))
                self._add(f"{p}.attn.b{w[1]}", np.zeros(d))
            self._add(f"{p}.ln2.gamma", np.ones(d))
            self._add(f"{p}.ln2.beta", np.zeros(d))
            self._add(f"{p}.ffn.w1", _xavier(rng, d, cfg.d_ff))
            self._add(f"{p}.ffn.b1", np.zeros(cfg.d_ff))
            self._add(f"{p}.ffn.w2", _xavier(rng, cfg.d_ff, d))
            self._add(f"{p}.ffn.b2", np.zeros(d))
        self._add("final_ln.gamma", np.ones(d))
        self._add("final_ln.beta", np.zeros(d))
        self._add("ctc_head.weight", _xavier(rng, d, cfg.vocab_size))
        self._add("ctc_head.bias", np.zeros(cfg.vocab_size))

    def __getitem__(self, name: str) -> DiffArray:
        return self.params[name]

    def attach(self, bank) -> None:
        if bank not in self.banks:
            self.banks.append(bank)

    def detach(self, bank=None) -> None:
        self.banks = [] if bank is None else [b for b in self.banks if b is not bank]

    def copy(self) -> "BackboneModel":
        clone = BackboneModel.__new__(BackboneModel)
        clone.config = BackboneConfig.from_dict(self.config.to_dict())
        clone.params = {k: DiffArray(v.data, requires_grad=True, name=k) for k, v in self.params.items()}
        clone.banks = []
        return clone

    def digest(self) -> str:
        return digest(self.params.items())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def digest(named: Iterable[tuple[str, DiffArray]]) -> str:
    """SHA-256 over names, shapes and raw float64 bytes."""
    h = hashlib.sha256()
    for name, arr in named:
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr.data, dtype="<f8").tobytes())
    return h.hexdigest()


def named_parameters(model: BackboneModel, filter: str = "all") -> list[tuple[str, DiffArray]]:
    """Deterministically ordered (name, parameter) pairs.

    ``backbone_only`` leaves out every parameter of attached adapter banks.
    """
    if filter not in ("all", "backbone_only"):
        raise ValueError(f"unknown filter {filter!r}")
    out = list(model.params.items())
    if filter == "all":
        for bank in model.banks:
            out.extend(bank.named_parameters())
    return out


def _linear(x, w, b):
    return dc.add(dc.matmul(x, w), b)


def _positional(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def _attention(model, p, x, training, rng):
    cfg = model.config
    B, T, d = x.shape
    H = cfg.n_heads
    dh = d // H

    def heads(t):
        return dc.transpose(dc.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

    q = heads(dc.scale(_linear(x, model[f"{p}.attn.wq"], model[f"{p}.attn.bq"]), 1.0 / math.sqrt(dh)))
    k = heads(_linear(x, model[f"{p}.attn.wk"], model[f"{p}.attn.bk"]))
    v = heads(_linear(x, model[f"{p}.attn.wv"], model[f"{p}.attn.bv"]))
    att = dc.softmax(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))), axis=-1)
    ctx = dc.reshape(dc.transpose(dc.matmul(att, v), (0, 2, 1, 3)), (B, T, d))
    return _linear(ctx, model[f"{p}.attn.wo"], model[f"{p}.attn.bo"])


def _block(model, b, x, training, rng):
    cfg = model.config
    p = f"block.{b}"
    eps = cfg.ln_eps
    h = dc.layernorm(x, model[f"{p}.ln1.gamma"], model[f"{p}.ln1.beta"], eps)
    x = dc.add(x, dc.dropout(_attention(model, p, h, training, rng), cfg.dropout_p, rng, training))
    h = dc.layernorm(x, model[f"{p}.ln2.gamma"], model[f"{p}.ln2.beta"], eps)
    h = dc.gelu(_linear(h, model[f"{p}.ffn.w1"], model[f"{p}.ffn.b1"]))
    h = _linear(h, model[f"{p}.ffn.w2"], model[f"{p}.ffn.b2"])
    return dc.add(x, dc.dropout(h, cfg.dropout_p, rng, training))


def _as_batch(waveform) -> tuple[np.ndarray, bool]:
    w = np.asarray(waveform, dtype=np.float64)
    if w.ndim == 1:
        return w[None], True
    if w.ndim != 2:
        raise InputError(f"waveform must be 1-D or a [B, N] batch, got shape {w.shape}")
    return w, False


def encoder_features(model: BackboneModel, waveform) -> DiffArray:
    """Conv encoder + feature projection output, ``[B, T, d_model]``."""
    cfg = model.config
    w, _ = _as_batch(waveform)
    if output_length(w.shape[1], cfg.conv_layers) < 1:
        raise InputError(f"waveform of {w.shape[1]} samples is too short for the conv encoder")
    mu = w.mean(axis=1, keepdims=True)
    sd = w.std(axis=1, keepdims=True)
    x = DiffArray._wrap(((w - mu) / (sd + 1e-7))[:, :, None])
    for i, (_, _, stride) in enumerate(cfg.conv_layers):
        x = dc.gelu(dc.conv1d(x, model[f"conv.{i}.kernel"], model[f"conv.{i}.bias"], stride))
    x = dc.layernorm(x, model["feat.ln.gamma"], model["feat.ln.beta"], cfg.ln_eps)
    return _linear(x, model["feat.proj.weight"], model["feat.proj.bias"])


def _apply_at(stack, point, h, training, rng):
    for entry in stack:
        if entry.point == point:
            if entry.width != h.shape[-1]:
                raise ConfigurationError(
                    f"adapter width {entry.width} does not match hidden width {h.shape[-1]} at {point}")
            h = entry.apply(h, training, rng)
    return h


def encode_from_features(model: BackboneModel, feats, adapters=None, training: bool = False,
                         rng: np.random.Generator | None = None) -> DiffArray:
    """Everything after the conv encoder; returns ``[B, T, V]`` log-probabilities."""
    cfg = model.config
    stack = list(adapters or ())
    for entry in stack:
        if entry.point.kind == "in_block" and entry.point.block_index >= cfg.n_blocks:
            raise ConfigurationError(f"adapter at {entry.point} but model has {cfg.n_blocks} blocks")
    h = dc.as_array(feats)
    h = _apply_at(stack, InsertionPoint(AFTER_CNN), h, training, rng)
    h = dc.add(h, _positional(h.shape[1], cfg.d_model))
    for b in range(cfg.n_blocks):
        h = _block(model, b, h, training, rng)
        h = _apply_at(stack, InsertionPoint(IN_BLOCK, b), h, training, rng)
    h = dc.layernorm(h, model["final_ln.gamma"], model["final_ln.beta"], cfg.ln_eps)
    return dc.log_softmax(_linear(h, model["ctc_head.weight"], model["ctc_head.bias"]), axis=-1)


def encode(model: BackboneModel, waveform, adapters=None, training: bool = False,
           rng: np.random.Generator | None = None) -> DiffArray:
    """Per-frame CTC log-probabilities for one waveform ``[T, V]`` or a batch ``[B, T, V]``."""
    _, single = _as_batch(waveform)
    out = encode_from_features(model, encoder_features(model, waveform), adapters, training, rng)
    return dc.reshape(out, out.shape[1:]) if single else out
