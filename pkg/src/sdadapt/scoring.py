"""Word error scoring, subgroup aggregation and the MAPSSWE paired test."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = ["UttScore", "MapssweResult", "edit_counts", "score", "aggregate", "wer", "prefixed",
           "mapsswe", "significance_report", "write_significance"]

GROUPINGS = ("overall", "severity", "seen_unseen", "speaker")
SEVERITY_ORDER = ("VL", "L", "M", "H")


@dataclass(frozen=True)
class UttScore:
    utt_id: str
    n_ref_words: int
    substitutions: int
    deletions: int
    insertions: int
    severity: str | None = None
    seen_flag: bool | None = None
    speaker_id: str | None = None

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return 100.0 * self.errors / self.n_ref_words


def edit_counts(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """(substitutions, deletions, insertions) of a minimal unit-cost alignment.

    Among minimal alignments the backtrace takes the diagonal first, so a
    substitution is preferred over an insertion+deletion pair.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                          d[i - 1, j] + 1, d[i, j - 1] + 1)
    i, j = n, m
    s = dl = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dl += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), dl, ins


def score(ref: Sequence, hyp: Sequence, utt_id: str = "", severity: str | None = None,
          seen_flag: bool | None = None, speaker_id: str | None = None) -> UttScore:
    if len(ref) == 0:
        raise ValueError("reference must not be empty")
    s, dl, ins = edit_counts(list(ref), list(hyp))
    return UttScore(utt_id, len(ref), s, dl, ins, severity, seen_flag, speaker_id)


def _group_key(sc: UttScore, grouping: str):
    if grouping == "overall":
        return "overall"
    if grouping == "severity":
        return sc.severity
    if grouping == "seen_unseen":
        return None if sc.seen_flag is None else ("seen" if sc.seen_flag else "unseen")
    return sc.speaker_id


def wer(scores: Iterable[UttScore]) -> float:
    scores = list(scores)
    n = sum(s.n_ref_words for s in scores)
    return 100.0 * sum(s.errors for s in scores) / n


def aggregate(scores: Iterable[UttScore], grouping: str = "overall", decimals: int | None = 2) -> dict:
    """WER (%) per group; groups without utterances are left out."""
    if grouping not in GROUPINGS:
        raise ValueError(f"unknown grouping {grouping!r}")
    scores = list(scores)
    if not scores:
        raise ValueError("no scores to aggregate")
    err: dict = {}
    ref: dict = {}
    for sc in scores:
        key = _group_key(sc, grouping)
        if key is None:
            continue
        err[key] = err.get(key, 0) + sc.errors
        ref[key] = ref.get(key, 0) + sc.n_ref_words
    if grouping == "severity":
        order = [k for k in SEVERITY_ORDER if k in err] + sorted(k for k in err if k not in SEVERITY_ORDER)
    else:
        order = sorted(err)
    out = {}
    for key in order:
        value = 100.0 * err[key] / ref[key]
        out[key] = round(value, decimals) if decimals is not None else value
    return out


def prefixed(scores: Iterable[UttScore], prefix) -> list[UttScore]:
    """Copies with ``<prefix>/`` prepended to the utt_id, for pooling runs that reuse ids."""
    return [replace(s, utt_id=f"{prefix}/{s.utt_id}") for s in scores]


@dataclass(frozen=True)
class MapssweResult:
    z: float
    p: float
    significant: bool
    n: int
    degenerate: bool = False


def mapsswe(scores_a: Iterable[UttScore], scores_b: Iterable[UttScore], alpha: float = 0.05,
            segment: str = "utterance") -> MapssweResult:
    """Matched-pairs test on per-utterance error counts, two-sided normal p-value."""
    if segment != "utterance":
        raise ValueError("only utterance segments are supported")
    a = {s.utt_id: s.errors for s in scores_a}
    b = {s.utt_id: s.errors for s in scores_b}
    if set(a) != set(b):
        raise ValueError("systems must be scored on the same utterances")
    ids = sorted(a)
    d = np.array([a[k] - b[k] for k in ids], dtype=np.float64)
    n = d.size
    if n < 30:
        warnings.warn(f"MAPSSWE on only {n} segments; normal approximation is rough", stacklevel=2)
    if n < 2:
        return MapssweResult(0.0, 1.0, False, n, True)
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        return MapssweResult(0.0, 1.0, False, n, True)
    z = float(d.mean() * math.sqrt(n) / sd)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return MapssweResult(z, p, p < alpha, n)


def significance_report(system_a: str, system_b: str, result: MapssweResult, alpha: float) -> dict:
    return {"system_a": system_a, "system_b": system_b, "n": result.n, "z": result.z,
            "p": result.p, "alpha": alpha, "significant": bool(result.significant)}


def write_significance(path, report: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=2) + "\n")
    return path
