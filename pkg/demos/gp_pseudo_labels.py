"""
Pseudo targets from a feature bank
==================================

Unlabelled (real) patches get a training target by Gaussian-process
regression onto features stored from labelled (synthetic) patches.  The
kernel is cosine similarity, so the target is a weighted blend of the bank
vectors most aligned with the query.
"""

import numpy as np

from lfderain.gp import FeatureBank, GpConfig, msgp_guide, posterior, select_banks

rng = np.random.default_rng(0)

# %%
# A bank of 40 synthetic features drawn around three prototypes.
protos = rng.normal(size=(3, 12))
bank = FeatureBank(12, capacity=32)
labels = []
for i in range(40):
    bank.append(protos[i % 3] + 0.3 * rng.normal(size=12))
    labels.append(i % 3)
labels = labels[-32:]
print("bank holds", len(bank), "vectors (oldest dropped past capacity 32)")

# %%
# A query near the first prototype: the pseudo target is pulled toward it.
cfg = GpConfig(sigma_eps=0.1, n_near=6, n_far=6)
query = protos[0] + 0.5 * rng.normal(size=12)
post = posterior(query, bank, cfg)


def cos(a, b):
    return a @ b / np.linalg.norm(a) / np.linalg.norm(b)


print("cosine(query, prototype 0):        %.3f" % cos(query, protos[0]))
print("cosine(pseudo target, prototype 0): %.3f" % cos(post.pseudo_gt, protos[0]))
print("variance against nearest vectors:  %.3f" % post.var_near)
print("variance against farthest vectors: %.3f" % post.var_far)

# %%
# The near set shares the query's prototype; the far set does not.
near, far, near_idx, far_idx = select_banks(query, bank, cfg)
print("prototypes behind the near set:", sorted(labels[i] for i in near_idx))
print("prototypes behind the far set: ", sorted(labels[i] for i in far_idx))

# %%
# Across scales, the regression input blends the previous scale's target
# with the current feature; omega = 0 turns the guidance off.
for omega in (0.0, 0.5, 1.0):
    guided = msgp_guide(post.pseudo_gt, query, omega)
    print("omega %.1f -> cosine to prototype 0: %.3f" % (omega, cos(guided, protos[0])))
