# coding: utf-8

# # CTC likelihood by hand and by dynamic programming
#
# A two-frame, two-symbol toy where every alignment can be listed. The
# forward recursion must agree with the sum over alignments, and its
# gradient must agree with finite differences.

import numpy as np

from sdadapt import diffcore as dc
from sdadapt.ctc import InfeasibleTargetError, brute_force_ctc, collapse, ctc_loss, greedy_decode

# In[1]:

# Uniform frame posteriors over {blank, a}: every path has probability 1/4.
probs = np.full((2, 2), 0.5)
log_probs = np.log(probs)
for target in ([], [1]):
    nll = ctc_loss(log_probs, target).item()
    print(f"target {target!s:4} P = {np.exp(-nll):.4f}  brute force = {brute_force_ctc(probs, target):.4f}")

# "a" is reachable by (a,a), (a,-) and (-,a), so P = 3/4. "a a" needs a
# blank between the repeats and cannot fit into two frames.
try:
    ctc_loss(log_probs, [1, 1])
except InfeasibleTargetError as exc:
    print("target [1, 1]:", exc)

# In[2]:

rng = np.random.default_rng(0)
x = dc.DiffArray(rng.standard_normal((6, 4)), requires_grad=True)
loss = lambda: ctc_loss(dc.log_softmax(x), [1, 2, 2])
print("max relative gradient error:", dc.grad_check(loss, [x]))

# In[3]:

# Greedy decoding takes the best symbol per frame, merges repeats and drops blanks.
path = [0, 1, 1, 0, 2, 2, 0, 2]
print(path, "->", collapse(path))
print("greedy on random logits:", greedy_decode(dc.log_softmax(x).data))
