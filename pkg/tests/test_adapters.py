import math

import mpmath
import numpy as np
import pytest

from sdadapt import diffcore as dc
from sdadapt.adapters import (DEFICIENCY, GLOBAL, HUB, LHUC, RAB, SPEAKER, SPEAKER_PLUS_DEFICIENCY,
                              STRUCTURED_RAB, AdapterBank, AdapterSpec, ConditionKey, ResolutionError,
                              apply_hub, apply_lhuc, apply_rab, apply_structured, create_entry,
                              parameter_count, resolve)
from sdadapt.backbone import ConfigurationError, InsertionPoint, encode
from sdadapt.ctc import ctc_loss_batch

from conftest import all_specs, perturbed_stack


def rab_params(rng, m, k, fresh=False):
    p = {"p_down": rng.standard_normal((k, m)), "p_up": np.zeros((m, k)) if fresh else rng.standard_normal((m, k)),
         "ln_gamma": np.ones(m) if fresh else 1 + 0.3 * rng.standard_normal(m),
         "ln_beta": np.zeros(m) if fresh else 0.3 * rng.standard_normal(m)}
    return {n: dc.DiffArray(v, requires_grad=True) for n, v in p.items()}


def test_lhuc_identity_and_example():
    h = np.array([[1.0, -2.0]])
    assert np.array_equal(apply_lhuc(h, np.zeros(2)).data, h)
    np.testing.assert_allclose(apply_lhuc(h, np.full(2, math.log(3))).data, [[1.5, -3.0]], atol=1e-15)


def test_lhuc_scaling_bounded():
    r = np.linspace(-30, 30, 61)
    coef = apply_lhuc(np.ones((1, 61)), r).data
    assert np.all((coef > 0) & (coef < 2))


def test_hub_identity_example_inverse():
    h = np.array([[1.0, 2.0]])
    assert np.array_equal(apply_hub(h, np.zeros(2)).data, h)
    np.testing.assert_array_equal(apply_hub(h, np.array([-1.0, 1.0])).data, [[0.0, 3.0]])
    rng = np.random.default_rng(0)
    h, r = rng.standard_normal((4, 3)), rng.standard_normal(3)
    np.testing.assert_allclose(apply_hub(apply_hub(h, r), -r).data, h, atol=1e-15)


@pytest.mark.parametrize("fn", [apply_lhuc, apply_hub])
def test_width_mismatch(fn):
    with pytest.raises(dc.DimensionError):
        fn(np.ones((2, 3)), np.zeros(4))


def test_rab_fresh_is_identity():
    rng = np.random.default_rng(1)
    h = rng.standard_normal((5, 6))
    assert np.array_equal(apply_rab(h, rab_params(rng, 6, 2, fresh=True)).data, h)


def test_rab_hand_example():
    params = {"p_down": np.array([[1.0, 1.0]]), "p_up": np.array([[1.0], [0.0]]),
              "ln_gamma": np.ones(2), "ln_beta": np.zeros(2)}
    out = apply_rab(np.array([[1.0, 1.0]]), params).data
    mpmath.mp.dps = 30
    v = float(2 * mpmath.ncdf(2))
    # two-element LN of [v, 0] is [1, -1] scaled by v/sqrt(v^2 + 4 eps)
    s = v / math.sqrt(v * v + 4e-5)
    np.testing.assert_allclose(out, [[1 + s, 1 - s]], atol=1e-14)
    np.testing.assert_allclose(out, [[2.0, 0.0]], atol=1e-5)


def test_rab_gradients():
    rng = np.random.default_rng(2)
    params = rab_params(rng, 5, 3)
    h = dc.DiffArray(rng.standard_normal((4, 5)), requires_grad=True)
    w = rng.standard_normal((4, 5))
    err = dc.grad_check(lambda: dc.sum_all(dc.mul(apply_rab(h, params), w)), [h, *params.values()])
    assert err < 1e-4


def test_rab_width_mismatch():
    with pytest.raises(dc.DimensionError):
        apply_rab(np.ones((2, 4)), rab_params(np.random.default_rng(0), 5, 2))


def test_structured_cascade():
    rng = np.random.default_rng(3)
    h = rng.standard_normal((3, 4))
    fresh_sd, fresh_s = rab_params(rng, 4, 2, True), rab_params(rng, 4, 2, True)
    assert np.array_equal(apply_structured(h, fresh_sd, fresh_s).data, h)
    sd = rab_params(rng, 4, 2)
    np.testing.assert_array_equal(apply_structured(h, sd, fresh_s).data, apply_rab(h, sd).data)
    s = rab_params(rng, 4, 2)
    expect = apply_rab(apply_rab(h, sd), s).data
    np.testing.assert_array_equal(apply_structured(h, sd, s).data, expect)


def test_structured_order_matters():
    rng = np.random.default_rng(4)
    for _ in range(20):
        h = rng.standard_normal((3, 4))
        sd, s = rab_params(rng, 4, 2), rab_params(rng, 4, 2)
        assert not np.allclose(apply_structured(h, sd, s).data, apply_structured(h, s, sd).data)


def test_condition_keys():
    assert ConditionKey.deficiency("VL").tag == "defi:VL"
    assert ConditionKey.parse("spk:S05") == ConditionKey.speaker("S05")
    assert ConditionKey.parse("global") == ConditionKey.global_()
    for bad in ("spk", "foo:x", "defi:"):
        with pytest.raises(ValueError):
            ConditionKey.parse(bad)


@pytest.mark.parametrize("kw", [dict(architecture="lora"), dict(label_granularity="spk"),
                                dict(architecture=RAB, bottleneck_k=None),
                                dict(architecture=LHUC, bottleneck_k=4),
                                dict(architecture=STRUCTURED_RAB, positions=(0, 0)),
                                dict(label_granularity=SPEAKER_PLUS_DEFICIENCY),
                                dict(positions=(0, 1)), dict(dropout_p=1.0)])
def test_spec_validation(kw):
    base = dict(architecture=RAB, positions=(0,), label_granularity=SPEAKER, bottleneck_k=4)
    base.update(kw)
    with pytest.raises(ConfigurationError):
        AdapterSpec(**base)


def test_spec_round_trip():
    spec = AdapterSpec(STRUCTURED_RAB, (0, 2), SPEAKER_PLUS_DEFICIENCY, 8, 0.2)
    assert AdapterSpec.from_dict(spec.to_dict()) == spec


def test_resolve_granularities():
    for gran, expect in [(GLOBAL, ["global"]), (DEFICIENCY, ["defi:VL"]), (SPEAKER, ["spk:S05"])]:
        spec = AdapterSpec(HUB, (0,), gran)
        bank = AdapterBank(spec, 4)
        for key in spec.required_keys("S05", "VL"):
            bank.create(key)
        assert [e.key.tag for e in resolve(spec, bank, "S05", "VL")] == expect
    spec = AdapterSpec(STRUCTURED_RAB, (0, 1), SPEAKER_PLUS_DEFICIENCY, 2)
    bank = AdapterBank(spec, 4)
    bank.create(ConditionKey.speaker("S05"))
    bank.create(ConditionKey.deficiency("VL"))
    stack = resolve(spec, bank, "S05", "VL")
    assert [e.key.tag for e in stack] == ["defi:VL", "spk:S05"]
    assert [e.point.position for e in stack] == [0, 1]


def test_resolve_missing_key_named():
    spec = AdapterSpec(LHUC, (0,), SPEAKER)
    with pytest.raises(ResolutionError, match="spk:S99"):
        resolve(spec, AdapterBank(spec, 4), "S99", "H")


def test_create_entry_counts_and_duplicates():
    spec = AdapterSpec(RAB, (0,), SPEAKER, 3)
    bank = AdapterBank(spec, 8)
    entry = create_entry(bank, ConditionKey.speaker("a"), InsertionPoint.from_position(0), 8, spec)
    assert entry.n_parameters() == 2 * 3 * 8 + 2 * 8 == parameter_count(RAB, 8, 3)
    with pytest.raises(dc.UsageError):
        create_entry(bank, ConditionKey.speaker("a"), InsertionPoint.from_position(0), 8, spec)
    lhuc = AdapterSpec(LHUC, (0,), SPEAKER)
    assert AdapterBank(lhuc, 8).create(ConditionKey.speaker("a")).n_parameters() == 8
    bank.create(ConditionKey.speaker("b"))
    assert bank.n_parameters() == sum(e.n_parameters() for e in bank.entries.values())


def test_bank_digest_by_kind():
    spec = AdapterSpec(STRUCTURED_RAB, (0, 0), SPEAKER_PLUS_DEFICIENCY, 2)
    bank = AdapterBank(spec, 4)
    bank.create(ConditionKey.deficiency("H"))
    bank.create(ConditionKey.speaker("S1"))
    d_defi = bank.digest("defi")
    bank[ConditionKey.speaker("S1")].params["p_up"].data += 1.0
    assert bank.digest("defi") == d_defi
    copy = bank.copy()
    copy[ConditionKey.deficiency("H")].params["ln_beta"].data += 1.0
    assert bank.digest("defi") == d_defi != copy.digest("defi")


@pytest.mark.parametrize("spec", all_specs(), ids=lambda s: f"{s.architecture}@{s.positions}")
def test_fresh_adapters_leave_decode_bit_identical(spec, tiny_model, waveforms):
    bank = AdapterBank(spec, 16, seed=7)
    stack = [bank.create(k) for k in spec.required_keys("S01", "VL")]
    plain = encode(tiny_model, waveforms).data
    assert np.array_equal(encode(tiny_model, waveforms, stack).data, plain)


@pytest.mark.parametrize("spec", all_specs(), ids=lambda s: f"{s.architecture}@{s.positions}")
def test_perturbed_adapters_change_output(spec, tiny_model, waveforms):
    _, stack = perturbed_stack(spec, 16)
    assert not np.allclose(encode(tiny_model, waveforms, stack).data, encode(tiny_model, waveforms).data)


@pytest.mark.parametrize("spec", all_specs(), ids=lambda s: f"{s.architecture}@{s.positions}")
def test_adapter_gradients_in_model(spec, tiny_model, waveforms):
    _, stack = perturbed_stack(spec, 16)
    params = [p for e in stack for p in e.params.values()]
    err = dc.grad_check(lambda: dc.mean_all(ctc_loss_batch(encode(tiny_model, waveforms, stack), [[1], [2, 3]])),
                        params, max_elements=8)
    assert err < 1e-4
