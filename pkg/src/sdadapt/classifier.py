"""Severity predictor for test speakers.

Utterances are summarised by log filterbank statistics (per-band mean and
standard deviation plus frame-energy mean and standard deviation, 42 values
for 20 bands) and classified with a multinomial logistic regression.  A
speaker's label is the majority vote of its utterances.  Only audio goes in;
transcripts and true labels of test speakers are never consulted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .adapters import SEVERITIES

__all__ = ["SpeakerEmbedding", "Classifier", "TrainingError", "filterbank", "extract_embedding",
           "train_classifier", "predict", "predict_speaker", "high_band_blur", "N_BANDS",
           "EMBEDDING_DIM"]

N_BANDS = 20
EMBEDDING_DIM = 2 * N_BANDS + 2
WIN_S, HOP_S = 0.025, 0.010


class TrainingError(ValueError):
    pass


def _mel(f):
    return 2595.0 * np.log10(1.0 + f / 700.0)


def _mel_inv(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def _mel_bank(sr: int, n_fft: int, n_bands: int) -> np.ndarray:
    edges = _mel_inv(np.linspace(_mel(0.0), _mel(sr / 2.0), n_bands + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    bank = np.zeros((n_bands, freqs.size))
    for b in range(n_bands):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        bank[b] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def filterbank(waveform, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    """Log band energies ``[frames, 20]`` and log frame energies ``[frames]``."""
    x = np.asarray(waveform, dtype=np.float64)
    win = int(round(WIN_S * sample_rate))
    hop = int(round(HOP_S * sample_rate))
    if x.size < win:
        raise ValueError(f"utterance of {x.size} samples is shorter than one {win}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop] * np.hamming(win)
    n_fft = 1 << (win - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    bands = np.log(power @ _mel_bank(sample_rate, n_fft, N_BANDS).T + 1e-10)
    energy = np.log((frames ** 2).sum(axis=1) + 1e-10)
    return bands, energy


@dataclass(frozen=True)
class SpeakerEmbedding:
    speaker_id: str
    features: np.ndarray


def extract_embedding(utterances: Sequence, speaker_id: str | None = None) -> SpeakerEmbedding:
    """Pool filterbank statistics over all frames of the given utterances."""
    utterances = list(utterances)
    if not utterances:
        raise ValueError("need at least one utterance")
    bands, energy = zip(*(filterbank(u.waveform, u.sample_rate) for u in utterances))
    bands = np.concatenate(bands)
    energy = np.concatenate(energy)
    feats = np.concatenate([bands.mean(axis=0), bands.std(axis=0), [energy.mean(), energy.std()]])
    sid = speaker_id if speaker_id is not None else utterances[0].speaker_id
    return SpeakerEmbedding(sid, feats)


def high_band_blur(embedding: SpeakerEmbedding, n_high: int = 5) -> float:
    """Loss of temporal modulation in the top bands: minus their mean log-energy std."""
    stds = embedding.features[N_BANDS:2 * N_BANDS]
    return float(-stds[-n_high:].mean())


@dataclass
class Classifier:
    classes: tuple
    mean: np.ndarray
    scale: np.ndarray
    weights: np.ndarray
    bias: np.ndarray

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "mean": self.mean.tolist(), "scale": self.scale.tolist(),
                "weights": self.weights.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Classifier":
        return cls(tuple(d["classes"]), np.array(d["mean"]), np.array(d["scale"]),
                   np.array(d["weights"]), np.array(d["bias"]))

    def logits(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.scale) @ self.weights + self.bias


def train_classifier(embeddings: Sequence[SpeakerEmbedding], labels: Sequence[str], epochs: int = 2000,
                     lr: float = 0.5, l2: float = 1e-3, seed: int = 0) -> Classifier:
    """Full-batch gradient descent on the softmax cross-entropy."""
    labels = list(labels)
    present = set(labels)
    if len(present) < 2:
        raise TrainingError("need at least two severity classes to train")
    classes = tuple(s for s in SEVERITIES if s in present)
    X = np.stack([e.features for e in embeddings])
    y = np.array([classes.index(s) for s in labels])
    mean = X.mean(axis=0)
    scale = X.std(axis=0) + 1e-8
    Z = (X - mean) / scale
    n, d = Z.shape
    k = len(classes)
    rng = np.random.default_rng(seed)
    W = 0.01 * rng.standard_normal((d, k))
    b = np.zeros(k)
    Y = np.eye(k)[y]
    for _ in range(epochs):
        logits = Z @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        P = np.exp(logits)
        P /= P.sum(axis=1, keepdims=True)
        G = (P - Y) / n
        W -= lr * (Z.T @ G + l2 * W)
        b -= lr * G.sum(axis=0)
    return Classifier(classes, mean, scale, W, b)


def predict(classifier: Classifier, embedding: SpeakerEmbedding) -> str:
    """Most probable severity; ties go to the less severe class."""
    return classifier.classes[int(np.argmax(classifier.logits(embedding.features)))]


def predict_speaker(classifier: Classifier, utterances: Sequence) -> str:
    """Majority vote of per-utterance predictions, ties to the less severe class."""
    votes = [predict(classifier, extract_embedding([u])) for u in utterances]
    counts = [votes.count(c) for c in classifier.classes]
    return classifier.classes[int(np.argmax(counts))]
