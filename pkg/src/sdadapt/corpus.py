"""Deterministic synthetic multi-speaker, multi-severity word corpus.

Each word is a harmonic segment whose two formant peaks identify it.  A
speaker shifts the pitch, the formants and the speaking rate.  Severity
degrades the signal in a fixed order: time warping, spectral blur (moving
average), additive white noise and per-token formant jitter.  Everything is
drawn from per-speaker RNG streams derived from the master seed, so the
corpus does not depend on generation order.
"""

from __future__ import annotations

import json
import wave
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adapters import SEVERITIES

__all__ = ["CorpusConfig", "SpeakerProfile", "Utterance", "Manifest", "CorpusConfigError",
           "ManifestError", "generate_corpus", "make_speakers", "render_utterance",
           "write_manifest", "read_manifest", "word_name", "word_id", "word_formants"]

F1_GRID = (300.0, 450.0, 600.0, 750.0, 900.0)
F2_GRID = (1100.0, 1400.0, 1700.0, 2000.0, 2300.0, 2600.0, 2900.0, 3200.0)
FORMANT_BW = 120.0
SPEECH_RMS = 0.1
MANIFEST_FIELDS = ("utt_id", "speaker_id", "severity", "split", "words", "seen",
                   "audio_path", "sample_rate")


class CorpusConfigError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def word_name(index: int) -> str:
    return f"w{index:02d}"


def word_id(name: str) -> int:
    """Token id of a word (blank is 0, so ids start at 1)."""
    return int(name[1:]) + 1


def word_formants(index: int) -> tuple[float, float]:
    return F1_GRID[index % len(F1_GRID)], F2_GRID[(index // len(F1_GRID)) % len(F2_GRID)]


def _per_severity(values) -> dict[str, float]:
    if isinstance(values, dict):
        return {s: float(values[s]) for s in SEVERITIES}
    return {s: float(v) for s, v in zip(SEVERITIES, values)}


@dataclass
class CorpusConfig:
    n_train_speakers: int = 20
    n_test_speakers: int = 8
    severity_distribution: dict = field(default_factory=lambda: {s: 0.25 for s in SEVERITIES})
    vocab_size: int = 40
    utterances_per_speaker: int = 60
    test_utterances_per_speaker: int = 30
    split_mode: str = "block_overlap"
    unseen_word_fraction: float = 0.4
    unseen_utterance_fraction: float = 0.2
    min_words: int = 1
    max_words: int = 6
    sample_rate: int = 16000
    duration: float = 1.0
    # speaker variability: half-ranges of the uniform F1/F2 offsets (Hz)
    formant_offset_range: tuple = (25.0, 70.0)
    base_freq_range: tuple = (100.0, 220.0)
    speaking_rate_range: tuple = (0.85, 1.2)
    # severity schedules, ordered H, M, L, VL
    noise_snr_db: dict = field(default_factory=lambda: {"H": 30.0, "M": 20.0, "L": 13.0, "VL": 8.0})
    time_warp: dict = field(default_factory=lambda: {"H": 0.0, "M": 0.1, "L": 0.2, "VL": 0.3})
    blur_width: dict = field(default_factory=lambda: {"H": 1, "M": 2, "L": 4, "VL": 7})
    formant_jitter: dict = field(default_factory=lambda: {"H": 0.0, "M": 0.02, "L": 0.04, "VL": 0.07})
    rng_seed: int = 0

    def __post_init__(self):
        self.severity_distribution = _per_severity(self.severity_distribution)
        self.noise_snr_db = _per_severity(self.noise_snr_db)
        self.time_warp = _per_severity(self.time_warp)
        self.blur_width = {s: int(v) for s, v in _per_severity(self.blur_width).items()}
        self.formant_jitter = _per_severity(self.formant_jitter)
        self.validate()

    def validate(self) -> None:
        if self.split_mode not in ("block_overlap", "speaker_disjoint"):
            raise CorpusConfigError(f"unknown split_mode {self.split_mode!r}")
        if self.vocab_size < 8:
            raise CorpusConfigError("vocab_size must be at least 8")
        if self.vocab_size > len(F1_GRID) * len(F2_GRID):
            raise CorpusConfigError(f"vocab_size above {len(F1_GRID) * len(F2_GRID)} templates")
        if not 0.0 <= self.unseen_word_fraction < 1.0:
            raise CorpusConfigError("unseen_word_fraction must lie in [0, 1)")
        if not 0.0 <= self.unseen_utterance_fraction < 1.0:
            raise CorpusConfigError("unseen_utterance_fraction must lie in [0, 1)")
        if self.unseen_utterance_fraction > 0 and self.n_unseen_words == 0:
            raise CorpusConfigError("unseen utterances requested but no unseen words")
        if not 1 <= self.min_words <= self.max_words:
            raise CorpusConfigError("need 1 <= min_words <= max_words")
        if self.split_mode == "block_overlap" and self.n_test_speakers > self.n_train_speakers:
            raise CorpusConfigError("block_overlap tests a subset of the training speakers")
        counts = self.speaker_counts(self.n_train_speakers)
        if min(counts.values()) < 1:
            raise CorpusConfigError("every severity needs at least one training speaker")
        order = [self.noise_snr_db[s] for s in SEVERITIES]
        if any(a <= b for a, b in zip(order, order[1:])):
            raise CorpusConfigError("noise SNR must fall strictly from H to VL")
        for name in ("time_warp", "blur_width", "formant_jitter"):
            vals = [getattr(self, name)[s] for s in SEVERITIES]
            if any(a > b for a, b in zip(vals, vals[1:])):
                raise CorpusConfigError(f"{name} must not decrease from H to VL")
        if self.blur_width["H"] < 1:
            raise CorpusConfigError("blur width must be >= 1")

    @property
    def n_unseen_words(self) -> int:
        return int(round(self.unseen_word_fraction * self.vocab_size))

    def speaker_counts(self, n: int) -> dict[str, int]:
        """Split ``n`` speakers over severities by largest remainder."""
        w = np.array([self.severity_distribution[s] for s in SEVERITIES], dtype=float)
        if w.sum() <= 0:
            raise CorpusConfigError("severity_distribution must have positive mass")
        raw = w / w.sum() * n
        base = np.floor(raw).astype(int)
        for i in np.argsort(-(raw - base), kind="stable")[: n - base.sum()]:
            base[i] += 1
        return dict(zip(SEVERITIES, base.tolist()))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("formant_offset_range", "base_freq_range", "speaking_rate_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        for k in ("formant_offset_range", "base_freq_range", "speaking_rate_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class SpeakerProfile:
    speaker_id: str
    base_freq: float
    formant_offsets: tuple
    speaking_rate: float
    severity: str
    split: str

    def __post_init__(self):
        if not 80.0 <= self.base_freq <= 400.0:
            raise CorpusConfigError(f"base_freq {self.base_freq} outside [80, 400] Hz")
        if not 0.5 <= self.speaking_rate <= 2.0:
            raise CorpusConfigError(f"speaking_rate {self.speaking_rate} outside [0.5, 2.0]")
        if self.severity not in SEVERITIES:
            raise CorpusConfigError(f"unknown severity {self.severity!r}")


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    severity: str
    words: list
    waveform: np.ndarray
    sample_rate: int
    seen: bool = True
    split: str = "train"

    @property
    def transcript(self) -> list[int]:
        return [word_id(w) for w in self.words]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        return (self.utt_id, self.speaker_id, self.severity, list(self.words), self.sample_rate,
                self.seen, self.split) == (other.utt_id, other.speaker_id, other.severity,
                                           list(other.words), other.sample_rate, other.seen,
                                           other.split) and np.array_equal(self.waveform, other.waveform)


@dataclass
class Manifest:
    utterances: list
    speakers: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def speaker_ids(self) -> list[str]:
        return sorted({u.speaker_id for u in self.utterances})

    def severity_of(self) -> dict[str, str]:
        return {u.speaker_id: u.severity for u in self.utterances}

    def by_speaker(self) -> dict[str, list]:
        out: dict[str, list] = {}
        for u in self.utterances:
            out.setdefault(u.speaker_id, []).append(u)
        return dict(sorted(out.items()))

    def filter(self, pred) -> "Manifest":
        kept = [u for u in self.utterances if pred(u)]
        ids = {u.speaker_id for u in kept}
        return Manifest(kept, {k: v for k, v in self.speakers.items() if k in ids})

    def words(self) -> set:
        return {w for u in self.utterances for w in u.words}


def _speaker_rng(seed: int, speaker_id: str, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(speaker_id.encode()), purpose]))


def make_speakers(config: CorpusConfig) -> tuple[list[SpeakerProfile], list[SpeakerProfile]]:
    """Training and test speaker profiles, ids ``S00...`` for training."""
    def profile(sid, severity, split):
        r = _speaker_rng(config.rng_seed, sid, 0)
        f1, f2 = config.formant_offset_range
        return SpeakerProfile(sid, float(r.uniform(*config.base_freq_range)),
                              (float(r.uniform(-f1, f1)), float(r.uniform(-f2, f2))),
                              float(r.uniform(*config.speaking_rate_range)), severity, split)

    train, test = [], []
    counts = config.speaker_counts(config.n_train_speakers)
    idx = 0
    for sev in SEVERITIES:
        for _ in range(counts[sev]):
            train.append(profile(f"S{idx:02d}", sev, "train"))
            idx += 1
    test_counts = config.speaker_counts(config.n_test_speakers)
    if config.split_mode == "block_overlap":
        by_sev = {s: [p for p in train if p.severity == s] for s in SEVERITIES}
        for sev in SEVERITIES:
            if test_counts[sev] > len(by_sev[sev]):
                raise CorpusConfigError(f"not enough {sev} training speakers to test on")
            for p in by_sev[sev][: test_counts[sev]]:
                p.split = "both_blocks"
                test.append(p)
    else:
        t = 0
        for sev in SEVERITIES:
            for _ in range(test_counts[sev]):
                test.append(profile(f"T{t:02d}", sev, "test"))
                t += 1
    return train, test


def _moving_average(x: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return x
    return np.convolve(x, np.ones(width) / width, mode="same")


def render_utterance(words, speaker: SpeakerProfile, config: CorpusConfig,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(clean, noise)`` sample arrays before quantisation."""
    sr = config.sample_rate
    n_total = int(round(config.duration * sr))
    sev = speaker.severity
    warp = config.time_warp[sev]
    jitter = config.formant_jitter[sev]

    base_dur = 0.1 / speaker.speaking_rate
    gap = 0.03 / speaker.speaking_rate
    durs = base_dur * (1.0 + warp) * np.exp(warp * rng.standard_normal(len(words)))
    lead = rng.uniform(0.02, 0.08)
    budget = 0.97 * config.duration - lead
    total = durs.sum() + gap * (len(words) - 1)
    shrink = min(1.0, budget / total)
    durs, gap = durs * shrink, gap * shrink

    clean = np.zeros(n_total)
    t0 = lead
    for w, d in zip(words, durs):
        f1, f2 = word_formants(int(w[1:]))
        f1 = (f1 + speaker.formant_offsets[0]) * (1.0 + jitter * rng.standard_normal())
        f2 = (f2 + speaker.formant_offsets[1]) * (1.0 + jitter * rng.standard_normal())
        f0 = speaker.base_freq * (1.0 + 0.02 * rng.standard_normal())
        n = int(round(d * sr))
        start = int(round(t0 * sr))
        n = min(n, n_total - start)
        t = np.arange(n) / sr
        harm = np.arange(1, int(5000.0 // f0) + 1) * f0
        amp = (np.exp(-0.5 * ((harm - f1) / FORMANT_BW) ** 2)
               + 0.8 * np.exp(-0.5 * ((harm - f2) / FORMANT_BW) ** 2) + 0.02)
        phase = rng.uniform(0.0, 2 * np.pi, size=harm.size)
        seg = (amp[:, None] * np.sin(2 * np.pi * harm[:, None] * t[None, :] + phase[:, None])).sum(axis=0)
        ramp = min(int(0.01 * sr), n // 2)
        env = np.ones(n)
        if ramp > 0:
            env[:ramp] = np.linspace(0.0, 1.0, ramp)
            env[n - ramp:] = np.linspace(1.0, 0.0, ramp)
        clean[start:start + n] += seg * env
        t0 += d + gap

    clean = _moving_average(clean, config.blur_width[sev])
    active = np.abs(clean) > 1e-9
    rms = np.sqrt(np.mean(clean[active] ** 2)) if active.any() else 1.0
    clean = clean * (SPEECH_RMS / rms)
    noise_sd = SPEECH_RMS * 10.0 ** (-config.noise_snr_db[sev] / 20.0)
    noise = noise_sd * rng.standard_normal(n_total)
    return clean, noise


def _quantise(x: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(x))
    if peak > 0.99:
        x = x * (0.99 / peak)
    return (np.round(x * 32767.0) / 32768.0).astype(np.float32)


def _speaker_utterances(config, speaker, split, n, train_words, unseen_words, block):
    rng = _speaker_rng(config.rng_seed, speaker.speaker_id, block)
    out = []
    # exact per-speaker count keeps the seen/unseen mix identical across speakers
    n_unseen = int(round(config.unseen_utterance_fraction * n)) if split == "test" and unseen_words else 0
    unseen_idx = set(rng.permutation(n)[:n_unseen].tolist())
    for i in range(n):
        seen = i not in unseen_idx
        pool = train_words if seen else unseen_words
        k = int(rng.integers(config.min_words, config.max_words + 1))
        words = [pool[j] for j in rng.integers(0, len(pool), size=k)]
        clean, noise = render_utterance(words, speaker, config, rng)
        out.append(Utterance(f"{speaker.speaker_id}_{split}_{i:03d}", speaker.speaker_id, speaker.severity,
                             words, _quantise(clean + noise), config.sample_rate, seen, split))
    return out


def generate_corpus(config: CorpusConfig) -> tuple[Manifest, Manifest]:
    """Build ``(train, test)`` manifests; byte-identical for identical configs."""
    config.validate()
    vocab = [word_name(i) for i in range(config.vocab_size)]
    perm = np.random.default_rng(np.random.SeedSequence([config.rng_seed, 7])).permutation(config.vocab_size)
    unseen = sorted(vocab[i] for i in perm[: config.n_unseen_words])
    train_words = [w for w in vocab if w not in set(unseen)]
    train_spk, test_spk = make_speakers(config)
    train = [u for p in train_spk
             for u in _speaker_utterances(config, p, "train", config.utterances_per_speaker, train_words, unseen, 1)]
    test = [u for p in test_spk
            for u in _speaker_utterances(config, p, "test", config.test_utterances_per_speaker,
                                         train_words, unseen, 2)]
    return (Manifest(train, {p.speaker_id: p for p in train_spk}),
            Manifest(test, {p.speaker_id: p for p in test_spk}))


def _write_wav(path: Path, samples: np.ndarray, sr: int) -> None:
    pcm = np.round(np.asarray(samples, dtype=np.float64) * 32768.0)
    pcm = np.clip(pcm, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sr)
        fh.writeframes(pcm.tobytes())


def _read_wav(path: Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ManifestError(f"{path}: expected 16-bit mono PCM")
        sr = fh.getframerate()
        pcm = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return (pcm.astype(np.float64) / 32768.0).astype(np.float32), sr


def write_manifest(manifest: Manifest, path) -> Path:
    """Write JSONL plus one WAV per utterance in ``<stem>_audio/`` next to it."""
    path = Path(path)
    audio_dir = path.parent / f"{path.stem}_audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for u in manifest.utterances:
            rel = f"{audio_dir.name}/{u.utt_id}.wav"
            _write_wav(path.parent / rel, u.waveform, u.sample_rate)
            row = {"utt_id": u.utt_id, "speaker_id": u.speaker_id, "severity": u.severity,
                   "split": u.split, "words": " ".join(u.words), "seen": bool(u.seen),
                   "audio_path": rel, "sample_rate": int(u.sample_rate)}
            fh.write(json.dumps(row) + "\n")
    return path


def read_manifest(path) -> Manifest:
    path = Path(path)
    utts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(row, dict) or set(row) != set(MANIFEST_FIELDS):
                raise ManifestError(f"{path}:{lineno}: fields must be exactly {', '.join(MANIFEST_FIELDS)}")
            if row["severity"] not in SEVERITIES:
                raise ManifestError(f"{path}:{lineno}: severity {row['severity']!r} not in {SEVERITIES}")
            words = row["words"].split()
            if not words:
                raise ManifestError(f"{path}:{lineno}: empty transcript")
            audio = path.parent / row["audio_path"]
            if not audio.is_file():
                raise ManifestError(f"{path}:{lineno}: audio file {row['audio_path']} not found")
            samples, sr = _read_wav(audio)
            if sr != row["sample_rate"]:
                raise ManifestError(f"{path}:{lineno}: sample rate {sr} != {row['sample_rate']}")
            utts.append(Utterance(row["utt_id"], row["speaker_id"], row["severity"], words, samples,
                                  sr, bool(row["seen"]), row["split"]))
    return Manifest(utts)
