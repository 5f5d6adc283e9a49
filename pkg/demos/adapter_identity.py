# coding: utf-8

# # Adapters start as the identity
#
# Every adapter kind is initialised so that inserting it changes nothing.
# Training then moves it away from the identity; this script shows both
# states and the parameter count of each kind.

import numpy as np

from sdadapt.adapters import (HUB, LHUC, RAB, SPEAKER, SPEAKER_PLUS_DEFICIENCY, STRUCTURED_RAB, AdapterBank,
                              AdapterSpec)
from sdadapt.backbone import BackboneConfig, BackboneModel, encode

model = BackboneModel(BackboneConfig(seed=0))
wav = np.random.default_rng(1).standard_normal((1, 8000))
plain = encode(model, wav).data

# In[1]:

specs = [AdapterSpec(LHUC, (1,), SPEAKER), AdapterSpec(HUB, (1,), SPEAKER), AdapterSpec(RAB, (1,), SPEAKER, 8),
         AdapterSpec(STRUCTURED_RAB, (0, 2), SPEAKER_PLUS_DEFICIENCY, 8)]
for spec in specs:
    bank = AdapterBank(spec, model.config.d_model, seed=0)
    stack = [bank.create(k) for k in spec.required_keys("S03", "VL")]
    same = np.array_equal(encode(model, wav, stack).data, plain)
    n = sum(e.n_parameters() for e in stack)
    print(f"{spec.name:38} keys {[e.key.tag for e in stack]!s:24} params {n:5d}  identical: {same}")

# In[2]:

# Nudge the up-projection of the residual block away from zero.
bank = AdapterBank(specs[2], model.config.d_model, seed=0)
entry = bank.create(specs[2].required_keys("S03", "VL")[0])
entry.params["p_up"].data += 0.05 * np.random.default_rng(2).standard_normal(entry.params["p_up"].shape)
delta = np.abs(encode(model, wav, [entry]).data - plain).max()
print("after a perturbation the log-probabilities move by up to", round(float(delta), 4))
