import json

import numpy as np
import pytest

from sdadapt.corpus import (CorpusConfig, CorpusConfigError, ManifestError, SpeakerProfile,
                            generate_corpus, make_speakers, read_manifest, render_utterance, write_manifest)

SMALL = dict(n_train_speakers=8, n_test_speakers=4, utterances_per_speaker=6, test_utterances_per_speaker=5,
             duration=0.5, max_words=3)


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(CorpusConfig(**SMALL))


def test_deterministic_bit_exact(small_corpus):
    again = generate_corpus(CorpusConfig(**SMALL))
    for a, b in zip(small_corpus, again):
        assert len(a) == len(b)
        assert all(u == v and u.waveform.tobytes() == v.waveform.tobytes() for u, v in zip(a, b))


def test_seed_changes_corpus(small_corpus):
    other, _ = generate_corpus(CorpusConfig(rng_seed=1, **SMALL))
    assert not np.array_equal(other.utterances[0].waveform, small_corpus[0].utterances[0].waveform)


def test_speaker_streams_independent_of_count():
    a, _ = generate_corpus(CorpusConfig(**SMALL))
    big = dict(SMALL, n_train_speakers=12)
    b, _ = generate_corpus(CorpusConfig(**big))
    first = a.by_speaker()["S00"]
    assert all(u == v for u, v in zip(first, b.by_speaker()["S00"]))


def test_block_overlap_structure(small_corpus):
    train, test = small_corpus
    assert set(test.speaker_ids()) <= set(train.speaker_ids())
    unseen_words = {w for u in test if not u.seen for w in u.words}
    assert unseen_words and not unseen_words & train.words()
    seen_words = {w for u in test if u.seen for w in u.words}
    assert seen_words <= train.words()
    per_spk = {s: sum(not u.seen for u in us) for s, us in test.by_speaker().items()}
    assert len(set(per_spk.values())) == 1


def test_speaker_disjoint_structure():
    train, test = generate_corpus(CorpusConfig(split_mode="speaker_disjoint", **SMALL))
    assert not set(train.speaker_ids()) & set(test.speaker_ids())
    assert set(test.severity_of().values()) == {"H", "M", "L", "VL"}


def test_invariants(small_corpus):
    for manifest in small_corpus:
        for u in manifest:
            assert np.max(np.abs(u.waveform)) <= 1.0
            assert u.words and u.severity in ("H", "M", "L", "VL")
    for p in small_corpus[0].speakers.values():
        assert 80 <= p.base_freq <= 400 and 0.5 <= p.speaking_rate <= 2.0


def test_every_severity_in_training(small_corpus):
    assert set(small_corpus[0].severity_of().values()) == {"H", "M", "L", "VL"}


def test_noise_power_monotone_in_severity():
    cfg = CorpusConfig(**SMALL)
    powers = {}
    for sev in ("H", "M", "L", "VL"):
        spk = SpeakerProfile("X", 150.0, (0.0, 0.0), 1.0, sev, "train")
        rng = np.random.default_rng(0)
        powers[sev] = np.mean([np.mean(render_utterance(["w01", "w02"], spk, cfg, rng)[1] ** 2)
                               for _ in range(5)])
    assert powers["VL"] > powers["L"] > powers["M"] > powers["H"]


@pytest.mark.parametrize("kw", [dict(unseen_word_fraction=1.0), dict(vocab_size=4), dict(split_mode="x"),
                                dict(noise_snr_db={"H": 10, "M": 20, "L": 13, "VL": 8}),
                                dict(blur_width={"H": 3, "M": 2, "L": 4, "VL": 7}),
                                dict(n_train_speakers=3), dict(n_test_speakers=30)])
def test_config_errors(kw):
    with pytest.raises(CorpusConfigError):
        CorpusConfig(**kw)


def test_config_round_trip():
    cfg = CorpusConfig(**SMALL)
    assert CorpusConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_manifest_round_trip(tmp_path, small_corpus):
    _, test = small_corpus
    path = write_manifest(test, tmp_path / "test.jsonl")
    back = read_manifest(path)
    assert [u.utt_id for u in back] == [u.utt_id for u in test]
    assert all(u == v for u, v in zip(back, test))
    row = json.loads(path.read_text().splitlines()[0])
    assert list(row) == ["utt_id", "speaker_id", "severity", "split", "words", "seen", "audio_path",
                         "sample_rate"]


def _one_line(tmp_path, small_corpus):
    path = write_manifest(type(small_corpus[1])(small_corpus[1].utterances[:1]), tmp_path / "m.jsonl")
    return path, json.loads(path.read_text())


def test_manifest_missing_audio(tmp_path, small_corpus):
    path, row = _one_line(tmp_path, small_corpus)
    (path.parent / row["audio_path"]).unlink()
    with pytest.raises(ManifestError, match="not found"):
        read_manifest(path)


def test_manifest_bad_severity(tmp_path, small_corpus):
    path, row = _one_line(tmp_path, small_corpus)
    row["severity"] = "XL"
    path.write_text(json.dumps(row) + "\n")
    with pytest.raises(ManifestError, match=":1:"):
        read_manifest(path)


def test_manifest_malformed_line_number(tmp_path, small_corpus):
    path, row = _one_line(tmp_path, small_corpus)
    path.write_text(json.dumps(row) + "\n{oops\n")
    with pytest.raises(ManifestError, match=":2:"):
        read_manifest(path)


def test_make_speakers_counts():
    train, test = make_speakers(CorpusConfig())
    assert len(train) == 20 and len(test) == 8
    assert all(p.split == "both_blocks" for p in test)
