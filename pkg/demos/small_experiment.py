# coding: utf-8

# # A small adaptation run end to end
#
# Generate a synthetic corpus, fine-tune the baseline, then compare it with
# structured adapters trained by adaptive fine-tuning and refined at test
# time on pseudo labels. One seed and three systems take a few minutes on
# one core; the full grid is what `sdadapt matrix` runs.

import time

from sdadapt.classifier import extract_embedding, train_classifier
from sdadapt.corpus import CorpusConfig, generate_corpus
from sdadapt.backbone import BackboneConfig, BackboneModel
from sdadapt.pipelines import TrainConfig, default_systems, finetune_baseline, run_experiment_matrix

start = time.perf_counter()
train, test = generate_corpus(CorpusConfig(rng_seed=0))
print(len(train.utterances), "training and", len(test.utterances), "test utterances")

# In[1]:

cfg = TrainConfig(rng_seed=0)
history = []
baseline = finetune_baseline(BackboneModel(BackboneConfig(seed=0)), train, cfg, history=history)
print("baseline loss by epoch:", [round(h["loss"], 2) for h in history])

# In[2]:

# The severity classifier provides deficiency labels for test speakers.
by = train.by_speaker()
sev = train.severity_of()
clf = train_classifier([extract_embedding(u, s) for s, u in by.items()], [sev[s] for s in by], seed=0)

systems = [s for s in default_systems() if s.system_id in ("1", "9", "9*")]
result = run_experiment_matrix(train, test, systems, cfg, baseline, clf)
for row in result.rows:
    print(f"system {row['system_id']:3} TER {row['wer_overall']:6.2f}  "
          + " ".join(f"{k}={row['wer_' + k]:.1f}" for k in ("VL", "L", "M", "H")))
print(f"done in {time.perf_counter() - start:.0f} s")
