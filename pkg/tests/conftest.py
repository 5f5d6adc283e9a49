import numpy as np
import pytest

from sdadapt.adapters import (HUB, LHUC, RAB, SPEAKER, SPEAKER_PLUS_DEFICIENCY, STRUCTURED_RAB,
                              AdapterBank, AdapterSpec, ConditionKey)
from sdadapt.backbone import BackboneConfig, BackboneModel

TINY_CONV = ((8, 16, 8), (16, 3, 2))


def tiny_config(**kw) -> BackboneConfig:
    base = dict(conv_layers=TINY_CONV, d_model=16, n_blocks=2, n_heads=2, d_ff=24, vocab_size=6, seed=0)
    base.update(kw)
    return BackboneConfig(**base)


@pytest.fixture
def tiny_model():
    return BackboneModel(tiny_config())


@pytest.fixture
def waveforms():
    rng = np.random.default_rng(0)
    return rng.standard_normal((2, 400))


def all_specs(k: int = 3):
    """One spec per architecture and insertion point of a 2-block model."""
    specs = []
    for pos in (0, 1, 2):
        specs.append(AdapterSpec(LHUC, (pos,), SPEAKER))
        specs.append(AdapterSpec(HUB, (pos,), SPEAKER))
        specs.append(AdapterSpec(RAB, (pos,), SPEAKER, k))
    for pair in ((0, 0), (0, 2), (1, 2), (2, 1)):
        specs.append(AdapterSpec(STRUCTURED_RAB, pair, SPEAKER_PLUS_DEFICIENCY, k))
    return specs


def perturbed_stack(spec: AdapterSpec, width: int, seed: int = 0, scale: float = 0.3):
    """Entries for speaker S01 / severity VL with every parameter moved off identity."""
    bank = AdapterBank(spec, width, seed)
    rng = np.random.default_rng(seed)
    for key in spec.required_keys("S01", "VL"):
        entry = bank.create(key)
        for p in entry.params.values():
            p.data = p.data + scale * rng.standard_normal(p.shape)
    return bank, [bank[k] for k in spec.required_keys("S01", "VL")]


SPK = ConditionKey.speaker("S01")
