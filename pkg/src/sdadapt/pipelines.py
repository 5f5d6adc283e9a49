"""Baseline fine-tuning, adaptive fine-tuning (AFT) and test-time adaptation (TTA).

AFT trains the backbone together with label-conditioned adapters on ground
truth transcripts; for structured adapters the deficiency adapters are fitted
first on each severity's pooled data, then frozen while the speaker adapters
are fitted per speaker.  TTA runs the same two stages on test data with the
backbone frozen, using either reference transcripts or a single greedy decode
from the un-adapted model as supervision.
"""

from __future__ import annotations

import csv
import fnmatch
import json
import logging
import zlib
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .adapters import (DEFICIENCY, GLOBAL, LHUC, RAB, SEVERITIES, SPEAKER, SPEAKER_PLUS_DEFICIENCY,
                       STRUCTURED_RAB, AdapterBank, AdapterSpec, ConditionKey, resolve)
from .backbone import BackboneModel, encode_from_features, encoder_features, output_length
from .classifier import Classifier, predict_speaker
from .corpus import Manifest
from .ctc import ctc_loss_batch, greedy_decode_batch, min_frames
from .optim import make_optimizer
from .scoring import UttScore, aggregate, score

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "SupervisionMode", "TrainingError", "DataError", "TTAResult",
           "finetune_baseline", "adaptive_finetune", "test_time_adapt", "decode", "score_decodes",
           "predict_severities", "utterance_batches", "SystemSpec", "MatrixResult", "default_specs",
           "default_systems", "run_experiment_matrix", "write_results_csv", "summarize_rows",
           "RESULT_COLUMNS"]


class TrainingError(RuntimeError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class DataError(ValueError):
    pass


def _default_epochs():
    return {"baseline": 16, "aft_stage1": 3, "aft_stage2": 3, "tta_stage1": 8, "tta_stage2": 8}


def _default_steps():
    return {"baseline": 2e-3, "aft": 1e-3, "aft_adapter": 1e-2, "tta": 3e-4}


@dataclass
class TrainConfig:
    epochs_per_phase: dict = field(default_factory=_default_epochs)
    batch_size: int = 16
    step_size: dict = field(default_factory=_default_steps)
    optimizer: str = "adam"
    grad_clip_norm: float = 5.0
    rng_seed: int = 0
    # phase ("baseline" / "aft") -> glob patterns of backbone parameters held fixed
    freeze_policy: dict = field(default_factory=dict)
    reuse_speaker_adapters: bool = True
    decode_batch_size: int = 32
    # runtime only: not part of to_dict, so it never changes a config digest
    decode_threads: int = 1

    def __post_init__(self):
        self.epochs_per_phase = {**_default_epochs(), **self.epochs_per_phase}
        self.step_size = {**_default_steps(), **self.step_size}
        if any(v <= 0 for v in self.step_size.values()):
            raise ValueError("step sizes must be positive")
        if any(v < 0 for v in self.epochs_per_phase.values()):
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def epochs(self, phase: str) -> int:
        return int(self.epochs_per_phase[phase])

    def rng(self, *tags) -> np.random.Generator:
        words = [zlib.crc32(str(t).encode()) for t in tags]
        return np.random.default_rng(np.random.SeedSequence([self.rng_seed, *words]))

    def to_dict(self) -> dict:
        return {"epochs_per_phase": dict(self.epochs_per_phase), "batch_size": self.batch_size,
                "step_size": dict(self.step_size), "optimizer": self.optimizer,
                "grad_clip_norm": self.grad_clip_norm, "rng_seed": self.rng_seed,
                "freeze_policy": {k: list(v) for k, v in self.freeze_policy.items()},
                "reuse_speaker_adapters": self.reuse_speaker_adapters,
                "decode_batch_size": self.decode_batch_size}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class SupervisionMode:
    """``gt`` uses reference transcripts; ``pseudo`` decodes with ``decoder`` once."""

    mode: str = "pseudo"
    decoder: BackboneModel | None = None
    labels: dict | None = None

    def __post_init__(self):
        if self.mode not in ("gt", "pseudo"):
            raise ValueError(f"unknown supervision mode {self.mode!r}")


def utterance_batches(utts: Sequence, batch_size: int, rng: np.random.Generator | None,
                      group: Callable = lambda u: None) -> list[list]:
    """Split into batches sharing a group key and a waveform length.

    With an rng, utterances are shuffled inside each group and the batch order
    is shuffled; without one the order is deterministic and sorted.
    """
    buckets: dict = defaultdict(list)
    for u in utts:
        buckets[(group(u), len(u.waveform))].append(u)
    batches = []
    for key in sorted(buckets, key=lambda k: (str(k[0]), k[1])):
        items = buckets[key]
        if rng is not None:
            items = [items[i] for i in rng.permutation(len(items))]
        batches.extend(items[i:i + batch_size] for i in range(0, len(items), batch_size))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def _frames(model: BackboneModel, utt) -> int:
    return output_length(len(utt.waveform), model.config.conv_layers)


def _snapshot(params: Sequence[dc.DiffArray]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params, snap) -> None:
    for p, v in zip(params, snap):
        p.data[...] = v


def _trainable_backbone(model: BackboneModel, phase: str, cfg: TrainConfig) -> list[dc.DiffArray]:
    patterns = cfg.freeze_policy.get(phase, ())
    out = []
    for name, p in model.params.items():
        frozen = any(fnmatch.fnmatchcase(name, pat) for pat in patterns)
        p.requires_grad = not frozen
        if not frozen:
            out.append(p)
    return out


def _run_epochs(model, utts, targets, stack_for, group, groups, epochs, cfg, rng, phase,
                feats=None, history=None, after_epoch=None):
    """Minibatch CTC training over ``utts``; returns per-epoch mean losses.

    ``groups`` is a list of ``{"params": [...], "lr": x}`` optimizer groups.
    ``after_epoch`` may return extra fields for the epoch's history record.
    """
    losses = []
    groups = [g for g in groups if g["params"]]
    params = [p for g in groups for p in g["params"]]
    if not params or epochs == 0 or not utts:
        return losses
    opt = make_optimizer(cfg.optimizer, groups, None, cfg.grad_clip_norm)
    for epoch in range(epochs):
        snap = _snapshot(params)
        total, count = 0.0, 0
        for batch in utterance_batches(utts, cfg.batch_size, rng, group):
            stack = stack_for(batch[0])
            try:
                if feats is not None:
                    x = dc.DiffArray._wrap(np.stack([feats[u.utt_id] for u in batch]))
                    lp = encode_from_features(model, x, stack, training=True, rng=rng)
                else:
                    x = encoder_features(model, np.stack([u.waveform for u in batch]))
                    lp = encode_from_features(model, x, stack, training=True, rng=rng)
                loss = dc.mean_all(ctc_loss_batch(lp, [targets[u.utt_id] for u in batch]))
                opt.zero_grad()
                loss.backward()
                opt.step()
            except FloatingPointError as exc:
                _restore(params, snap)
                raise TrainingError(f"{phase}: training diverged in epoch {epoch} ({exc})",
                                    last_good=snap) from exc
            total += loss.item() * len(batch)
            count += len(batch)
        losses.append(total / count)
        log.info("%s epoch %d loss %.4f", phase, epoch, losses[-1])
        if history is not None:
            extra = after_epoch() if after_epoch is not None else {}
            history.append({"phase": phase, "epoch": epoch, "loss": losses[-1], **extra})
    for p in params:
        p.grad = None
    return losses


def finetune_baseline(model: BackboneModel, train: Manifest, cfg: TrainConfig,
                      history: list | None = None, heldout: Manifest | None = None) -> BackboneModel:
    """Fine-tune every (non-frozen) backbone parameter on reference transcripts, in place.

    With ``history`` and ``heldout`` each epoch record also carries the
    held-out token error rate.
    """
    if model.banks:
        raise ValueError("baseline fine-tuning expects a model without adapters")
    utts = [u for u in train if min_frames(u.transcript) <= _frames(model, u)]
    targets = {u.utt_id: u.transcript for u in utts}
    params = _trainable_backbone(model, "baseline", cfg)
    _run_epochs(model, utts, targets, lambda u: [], lambda u: None,
                [{"params": params, "lr": cfg.step_size["baseline"]}], cfg.epochs("baseline"),
                cfg, cfg.rng("baseline"), "baseline", history=history,
                after_epoch=None if heldout is None else lambda: {"heldout_ter": _ter(model, heldout, cfg)})
    for p in model.params.values():
        p.requires_grad = True
    return model


def _severities(manifest: Manifest) -> dict[str, str]:
    out = {}
    for u in manifest:
        if u.severity not in SEVERITIES:
            raise DataError(f"utterance {u.utt_id} has unknown severity {u.severity!r}")
        if out.setdefault(u.speaker_id, u.severity) != u.severity:
            raise DataError(f"speaker {u.speaker_id} carries more than one severity label")
    return out


def adaptive_finetune(model: BackboneModel, spec: AdapterSpec, train: Manifest, cfg: TrainConfig,
                      history: list | None = None) -> tuple[BackboneModel, AdapterBank]:
    """Adapter-aware fine-tuning of a copy of ``model``; returns ``(model, bank)``.

    Stage 1 fits deficiency adapters on each severity's pooled data, stage 2
    fits speaker adapters with the deficiency adapters frozen.  The backbone
    is trained in both stages.  Single-attribute specs run only their stage.
    """
    sev = _severities(train)
    model = model.copy()
    bank = AdapterBank(spec, model.config.d_model, seed=cfg.rng_seed)
    model.attach(bank)
    utts = [u for u in train if min_frames(u.transcript) <= _frames(model, u)]
    targets = {u.utt_id: u.transcript for u in utts}
    lr, lr_adapter = cfg.step_size["aft"], cfg.step_size["aft_adapter"]
    g = spec.label_granularity
    digests = {}

    if g in (DEFICIENCY, SPEAKER_PLUS_DEFICIENCY):
        for sd in sorted(set(sev.values()), key=SEVERITIES.index):
            bank.create(ConditionKey.deficiency(sd))
        groups = [{"params": _trainable_backbone(model, "aft", cfg), "lr": lr},
                  {"params": bank.parameters("defi"), "lr": lr_adapter}]
        _run_epochs(model, utts, targets,
                    lambda u: [bank[ConditionKey.deficiency(sev[u.speaker_id])]],
                    lambda u: sev[u.speaker_id], groups, cfg.epochs("aft_stage1"), cfg,
                    cfg.rng("aft", spec.name, 1), "aft_stage1", history=history)
        digests["after_stage1"] = bank.digest("defi")
    if g in (SPEAKER, SPEAKER_PLUS_DEFICIENCY, GLOBAL):
        bank.set_trainable(False, "defi")
        if g == GLOBAL:
            bank.create(ConditionKey.global_())
            group = lambda u: None  # noqa: E731
        else:
            for s in sorted(sev):
                bank.create(ConditionKey.speaker(s))
            group = lambda u: u.speaker_id  # noqa: E731
        kind = "global" if g == GLOBAL else "spk"
        groups = [{"params": _trainable_backbone(model, "aft", cfg), "lr": lr},
                  {"params": bank.parameters(kind), "lr": lr_adapter}]
        _run_epochs(model, utts, targets,
                    lambda u: resolve(spec, bank, u.speaker_id, sev[u.speaker_id]),
                    group, groups, cfg.epochs("aft_stage2"), cfg,
                    cfg.rng("aft", spec.name, 2), "aft_stage2", history=history)
        digests["after_stage2"] = bank.digest("defi")
    for p in model.params.values():
        p.requires_grad = True
    bank.set_trainable(True)
    if history is not None:
        history.append({"phase": "aft_digests", **digests})
    return model, bank


def predict_severities(classifier: Classifier, manifest: Manifest) -> dict[str, str]:
    """Speaker -> predicted severity, from audio only."""
    return {spk: predict_speaker(classifier, utts) for spk, utts in manifest.by_speaker().items()}


def decode(model: BackboneModel, manifest: Manifest | Sequence, spec: AdapterSpec | None = None,
           bank: AdapterBank | None = None, severity: dict | None = None,
           batch_size: int = 32, feats: dict | None = None, threads: int = 1) -> dict[str, list[int]]:
    """Greedy decodes keyed by utt_id, adapters resolved per speaker.

    With ``threads > 1`` batches are decoded concurrently; parameters are only
    read, and each batch's result does not depend on the others.
    """
    utts = list(manifest)

    def run(batch):
        u0 = batch[0]
        stack = [] if spec is None else resolve(spec, bank, u0.speaker_id,
                                                (severity or {}).get(u0.speaker_id, u0.severity))
        with dc.no_grad():
            if feats is not None:
                x = dc.DiffArray._wrap(np.stack([feats[u.utt_id] for u in batch]))
            else:
                x = encoder_features(model, np.stack([u.waveform for u in batch]))
            lp = encode_from_features(model, x, stack, training=False)
        return [(u.utt_id, hyp) for u, hyp in zip(batch, greedy_decode_batch(lp))]

    batches = utterance_batches(utts, batch_size, None, lambda u: u.speaker_id)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, batches))
    else:
        results = [run(b) for b in batches]
    return {utt_id: hyp for part in results for utt_id, hyp in part}


def score_decodes(manifest: Manifest | Sequence, hyps: dict) -> list[UttScore]:
    return [score(u.transcript, hyps[u.utt_id], u.utt_id, u.severity, u.seen, u.speaker_id)
            for u in manifest]


def _ter(model: BackboneModel, manifest, cfg: TrainConfig) -> float:
    hyps = decode(model, manifest, batch_size=cfg.decode_batch_size, threads=cfg.decode_threads)
    return aggregate(score_decodes(manifest, hyps), decimals=None)["overall"]


@dataclass
class TTAResult:
    hyps: dict
    bank: AdapterBank | None
    supervision: dict
    skipped: list
    severity: dict
    n_pseudo_decodes: int = 0
    history: list = field(default_factory=list)
    stage_digests: dict = field(default_factory=dict)


def _cached_features(model, utts, batch_size):
    feats = {}
    with dc.no_grad():
        for batch in utterance_batches(utts, batch_size, None):
            x = encoder_features(model, np.stack([u.waveform for u in batch])).data
            for u, row in zip(batch, x):
                feats[u.utt_id] = row
    return feats


def test_time_adapt(model: BackboneModel, bank: AdapterBank | None, spec: AdapterSpec,
                    test: Manifest, supervision: SupervisionMode, cfg: TrainConfig,
                    classifier: Classifier | None = None, oracle_deficiency: bool = False,
                    severity: dict | None = None) -> TTAResult:
    """Estimate adapters on test speakers with the backbone frozen, then decode.

    ``bank`` is the AFT bank (copied, never modified) or None to start from
    fresh adapters.  Deficiency labels come from ``severity`` if given, the
    true labels with ``oracle_deficiency``, else ``classifier``.
    """
    utts = list(test)
    speakers = sorted({u.speaker_id for u in utts})
    g = spec.label_granularity
    if severity is None:
        if oracle_deficiency or g in (GLOBAL, SPEAKER):
            severity = {u.speaker_id: u.severity for u in utts}
        elif classifier is not None:
            severity = predict_severities(classifier, test)
        else:
            raise ValueError("deficiency labels need a classifier or oracle_deficiency=True")

    bank = AdapterBank(spec, model.config.d_model, seed=cfg.rng_seed) if bank is None else bank.copy()
    for s in speakers:
        for key in spec.required_keys(s, severity[s]):
            if key.kind == "spk" and key in bank and not cfg.reuse_speaker_adapters:
                bank.remove(key)
            bank.ensure(key)
    initial_bank_digest = bank.digest()

    # supervision is fixed once, before any stage
    n_decodes = 0
    if supervision.mode == "gt":
        labels = {u.utt_id: u.transcript for u in utts}
    elif supervision.labels is not None:
        labels = {u.utt_id: list(supervision.labels[u.utt_id]) for u in utts}
    else:
        decoder = supervision.decoder if supervision.decoder is not None else model
        labels = decode(decoder, utts, batch_size=cfg.decode_batch_size, threads=cfg.decode_threads)
        n_decodes = len(utts)
    skipped = [u.utt_id for u in utts
               if not labels[u.utt_id] or min_frames(labels[u.utt_id]) > _frames(model, u)]
    train_utts = [u for u in utts if u.utt_id not in set(skipped)]
    if skipped:
        log.info("TTA skips %d utterances with empty or infeasible labels", len(skipped))

    saved_flags = {n: p.requires_grad for n, p in model.params.items()}
    backbone_digest = model.digest()
    history: list = []
    digests = {"backbone_before": backbone_digest}
    try:
        for p in model.params.values():
            p.requires_grad = False
        feats = _cached_features(model, utts, cfg.decode_batch_size)
        lr = cfg.step_size["tta"]
        bank.set_trainable(False)
        if g in (DEFICIENCY, SPEAKER_PLUS_DEFICIENCY):
            levels = sorted({severity[s] for s in speakers}, key=SEVERITIES.index)
            for sd in levels:
                bank[ConditionKey.deficiency(sd)].set_trainable(True)
            params = [p for sd in levels for p in bank[ConditionKey.deficiency(sd)].params.values()]
            _run_epochs(model, train_utts, labels,
                        lambda u: [bank[ConditionKey.deficiency(severity[u.speaker_id])]],
                        lambda u: severity[u.speaker_id], [{"params": params, "lr": lr}],
                        cfg.epochs("tta_stage1"), cfg,
                        cfg.rng("tta", spec.name, 1), "tta_stage1", feats=feats, history=history)
            bank.set_trainable(False)
            digests["defi_after_stage1"] = bank.digest("defi")
        if g in (SPEAKER, SPEAKER_PLUS_DEFICIENCY, GLOBAL):
            keys = [ConditionKey.global_()] if g == GLOBAL else [ConditionKey.speaker(s) for s in speakers]
            for k in keys:
                bank[k].set_trainable(True)
            params = [p for k in keys for p in bank[k].params.values()]
            group = (lambda u: None) if g == GLOBAL else (lambda u: u.speaker_id)
            _run_epochs(model, train_utts, labels,
                        lambda u: resolve(spec, bank, u.speaker_id, severity[u.speaker_id]),
                        group, [{"params": params, "lr": lr}], cfg.epochs("tta_stage2"), cfg,
                        cfg.rng("tta", spec.name, 2), "tta_stage2", feats=feats, history=history)
            bank.set_trainable(False)
            digests["defi_after_stage2"] = bank.digest("defi")
        hyps = decode(model, utts, spec, bank, severity, cfg.decode_batch_size, feats=feats,
                      threads=cfg.decode_threads)
    finally:
        for n, p in model.params.items():
            p.requires_grad = saved_flags[n]
        bank.set_trainable(True)
    digests["backbone_after"] = model.digest()
    digests["bank_before"] = initial_bank_digest
    return TTAResult(hyps, bank, labels, skipped, severity, n_decodes, history, digests)


@dataclass(frozen=True)
class SystemSpec:
    """One row of the experiment matrix."""

    system_id: str
    adapter: AdapterSpec | None = None
    aft: bool = False
    supervision: str = "pseudo"
    oracle_deficiency: bool = False

    def __post_init__(self):
        if self.supervision not in ("gt", "pseudo"):
            raise ValueError(f"unknown supervision {self.supervision!r}")
        if self.adapter is None and self.aft:
            raise ValueError("a system without adapters cannot use adaptive fine-tuning")

    def to_dict(self) -> dict:
        return {"system_id": self.system_id,
                "adapter": None if self.adapter is None else self.adapter.to_dict(),
                "aft": self.aft, "supervision": self.supervision,
                "oracle_deficiency": self.oracle_deficiency}

    @classmethod
    def from_dict(cls, d: dict) -> "SystemSpec":
        adapter = None if d.get("adapter") is None else AdapterSpec.from_dict(d["adapter"])
        return cls(str(d["system_id"]), adapter, bool(d.get("aft", False)),
                   d.get("supervision", "pseudo"), bool(d.get("oracle_deficiency", False)))


def default_specs(bottleneck_k: int = 8) -> dict[str, AdapterSpec]:
    return {"global": AdapterSpec(RAB, (0,), GLOBAL, bottleneck_k),
            "lhuc_spk": AdapterSpec(LHUC, (0,), SPEAKER),
            "rab_spk": AdapterSpec(RAB, (0,), SPEAKER, bottleneck_k),
            "rab_defi": AdapterSpec(RAB, (0,), DEFICIENCY, bottleneck_k),
            "structured": AdapterSpec(STRUCTURED_RAB, (0, 0), SPEAKER_PLUS_DEFICIENCY, bottleneck_k)}


def default_systems(bottleneck_k: int = 8) -> list[SystemSpec]:
    """The comparison grid: baseline, global, speaker, deficiency and structured
    adapters with and without AFT, plus reference-supervised upper bounds."""
    s = default_specs(bottleneck_k)
    return [SystemSpec("1"),
            SystemSpec("2", s["global"]),
            SystemSpec("2*", s["global"], supervision="gt"),
            SystemSpec("3", s["lhuc_spk"], aft=True),
            SystemSpec("4", s["rab_spk"]),
            SystemSpec("5", s["rab_spk"], aft=True),
            SystemSpec("6", s["rab_defi"]),
            SystemSpec("7", s["rab_defi"], aft=True),
            SystemSpec("8", s["structured"]),
            SystemSpec("9", s["structured"], aft=True),
            SystemSpec("9*", s["structured"], aft=True, supervision="gt")]


RESULT_COLUMNS = ("system_id", "adapt_arch", "adapt_label", "aft", "supervision", "wer_overall",
                  "wer_VL", "wer_L", "wer_M", "wer_H", "wer_seen", "wer_unseen", "n_adapter_params")


@dataclass
class MatrixResult:
    """Per-system outputs keyed by system id.

    ``digests`` holds the AFT stage digests (``aft_*``) and the TTA stage
    digests of each adapted system.
    """

    rows: list
    scores: dict
    hyps: dict
    skipped: dict
    severity: dict
    digests: dict = field(default_factory=dict)


def _result_row(system: SystemSpec, scores: list[UttScore], n_params: int) -> dict:
    by_sev = aggregate(scores, "severity", decimals=None)
    by_seen = aggregate(scores, "seen_unseen", decimals=None)
    a = system.adapter
    return {"system_id": system.system_id,
            "adapt_arch": "none" if a is None else a.architecture,
            "adapt_label": "none" if a is None else a.label_granularity,
            "aft": system.aft, "supervision": "none" if a is None else system.supervision,
            "wer_overall": aggregate(scores, decimals=None)["overall"],
            **{f"wer_{s}": by_sev.get(s) for s in ("VL", "L", "M", "H")},
            "wer_seen": by_seen.get("seen"), "wer_unseen": by_seen.get("unseen"),
            "n_adapter_params": n_params}


def _params_per_speaker(spec: AdapterSpec, bank: AdapterBank, severity: dict) -> int:
    """Adapter parameters resolved for one test speaker, averaged over speakers."""
    if not severity:
        return 0
    total = sum(e.n_parameters() for s, sd in severity.items() for e in resolve(spec, bank, s, sd))
    return int(round(total / len(severity)))


def run_experiment_matrix(train: Manifest, test: Manifest, systems: Sequence[SystemSpec],
                          cfg: TrainConfig, baseline: BackboneModel,
                          classifier: Classifier | None = None,
                          aft_cache: dict | None = None) -> MatrixResult:
    """Run every system against one baseline; AFT is shared between rows with the same spec.

    ``baseline`` must already be fine-tuned.  Pseudo labels come from one
    decode of the baseline and are shared by every test-time row.
    """
    ids = [s.system_id for s in systems]
    if len(set(ids)) != len(ids):
        raise ValueError("system ids must be unique")
    aft_cache = {} if aft_cache is None else aft_cache
    digests: dict = {}
    base_hyps = decode(baseline, test, batch_size=cfg.decode_batch_size, threads=cfg.decode_threads)
    pseudo = SupervisionMode("pseudo", labels=base_hyps)
    predicted = predict_severities(classifier, test) if classifier is not None else None
    oracle = {u.speaker_id: u.severity for u in test}
    rows, scores, hyps, skipped, severity = [], {}, {}, {}, {}
    for system in systems:
        log.info("system %s", system.system_id)
        if system.adapter is None:
            sys_hyps, n_params, sev = base_hyps, 0, {}
            skipped[system.system_id] = []
        else:
            spec = system.adapter
            needs_defi = spec.label_granularity in (DEFICIENCY, SPEAKER_PLUS_DEFICIENCY)
            if system.oracle_deficiency or not needs_defi:
                sev = oracle
            elif predicted is not None:
                sev = predicted
            else:
                raise ValueError(f"system {system.system_id} needs a classifier or oracle deficiency labels")
            aft_digests = {}
            if system.aft:
                key = json.dumps(spec.to_dict(), sort_keys=True)
                if key not in aft_cache:
                    history: list = []
                    aft_cache[key] = (*adaptive_finetune(baseline, spec, train, cfg, history), history[-1])
                model, bank, record = aft_cache[key]
                aft_digests = {f"aft_{k}": v for k, v in record.items() if k != "phase"}
            else:
                model, bank = baseline, None
            sup = SupervisionMode("gt") if system.supervision == "gt" else pseudo
            result = test_time_adapt(model, bank, spec, test, sup, cfg, severity=sev)
            sys_hyps = result.hyps
            skipped[system.system_id] = result.skipped
            digests[system.system_id] = {**aft_digests, **result.stage_digests}
            n_params = _params_per_speaker(spec, result.bank, sev)
        sc = score_decodes(test, sys_hyps)
        scores[system.system_id] = sc
        hyps[system.system_id] = sys_hyps
        severity[system.system_id] = dict(sev)
        rows.append(_result_row(system, sc, n_params))
    return MatrixResult(rows, scores, hyps, skipped, severity, digests)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)


def write_results_csv(rows: Sequence[dict], path, leading: Sequence[str] = ()) -> Path:
    """CSV with ``leading`` columns (e.g. seed) followed by the result columns."""
    path = Path(path)
    columns = list(leading) + list(RESULT_COLUMNS)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])
    return path


def summarize_rows(rows: Sequence[dict]) -> list[dict]:
    """Seed-averaged rows, one per system id in first-seen order."""
    groups: dict = {}
    for row in rows:
        groups.setdefault(row["system_id"], []).append(row)
    out = []
    for sid, items in groups.items():
        merged = {k: items[0][k] for k in ("system_id", "adapt_arch", "adapt_label", "aft", "supervision",
                                          "n_adapter_params")}
        for col in RESULT_COLUMNS:
            if col.startswith("wer_"):
                vals = [r[col] for r in items if r.get(col) is not None]
                merged[col] = float(np.mean(vals)) if vals else None
        out.append(merged)
    return out
