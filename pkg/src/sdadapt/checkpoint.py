"""JSON checkpoint container for a backbone, adapter banks and a severity classifier.

Arrays are stored as base64 of their little-endian float64 bytes together
with name and shape, so a round trip is bit-exact.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .adapters import AdapterBank, AdapterEntry, AdapterSpec, ConditionKey
from .backbone import BackboneConfig, BackboneModel, InsertionPoint
from .classifier import Classifier
from .diffcore import DiffArray

FORMAT = "sdadapt-checkpoint"
VERSION = 1

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "encode_array", "decode_array"]


class CheckpointError(ValueError):
    pass


def encode_array(a) -> dict:
    a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    try:
        raw = base64.b64decode(d["data"], validate=True)
        shape = tuple(int(s) for s in d["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad array record: {exc}") from exc
    if len(raw) != 8 * int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"array payload of {len(raw)} bytes does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def _bank_to_dict(bank: AdapterBank) -> dict:
    return {"spec": bank.spec.to_dict(), "width": bank.width, "seed": bank.seed,
            "entries": {key.tag: {"architecture": e.architecture, "position": e.point.position,
                                  "dropout_p": e.dropout_p,
                                  "params": {n: encode_array(p.data) for n, p in e.params.items()}}
                        for key, e in sorted(bank.entries.items())}}


def _bank_from_dict(d: dict) -> AdapterBank:
    bank = AdapterBank(AdapterSpec.from_dict(d["spec"]), int(d["width"]), int(d["seed"]))
    for tag, e in d["entries"].items():
        key = ConditionKey.parse(tag)
        params = {n: DiffArray(decode_array(a), requires_grad=True, name=f"adapter.{tag}.{n}")
                  for n, a in e["params"].items()}
        bank.entries[key] = AdapterEntry(key, e["architecture"], InsertionPoint.from_position(e["position"]),
                                         params, float(e["dropout_p"]))
    return bank


def save_checkpoint(path, model: BackboneModel, banks: dict | None = None,
                    classifier: Classifier | None = None, extra: dict | None = None) -> Path:
    """Write ``model`` plus optional named banks, classifier and metadata."""
    doc = {"format": FORMAT, "version": VERSION,
           "config": model.config.to_dict(),
           "params": {n: encode_array(p.data) for n, p in model.params.items()},
           "banks": {name: _bank_to_dict(b) for name, b in (banks or {}).items()},
           "classifier": None if classifier is None else classifier.to_dict(),
           "extra": extra or {}}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[BackboneModel, dict, Classifier | None, dict]:
    """Return ``(model, banks, classifier, extra)``; corrupt files raise CheckpointError."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    try:
        model = BackboneModel(BackboneConfig.from_dict(doc["config"]))
        stored = doc["params"]
        if set(stored) != set(model.params):
            raise CheckpointError(f"{path}: parameter names do not match the configuration")
        for name, p in model.params.items():
            value = decode_array(stored[name])
            if value.shape != p.data.shape:
                raise CheckpointError(f"{path}: {name} has shape {value.shape}, expected {p.data.shape}")
            p.data = value
        banks = {name: _bank_from_dict(b) for name, b in doc["banks"].items()}
        classifier = None if doc["classifier"] is None else Classifier.from_dict(doc["classifier"])
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    return model, banks, classifier, doc.get("extra", {})
