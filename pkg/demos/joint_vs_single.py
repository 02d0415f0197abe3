"""
Does joint training cost accuracy?
==================================

Train one model on all three toy datasets, then one model per dataset with the
same step budget, and compare per-dataset mIoU on the validation splits.

This takes a while on a CPU (four runs). Pass a step count to shorten it::

    python demos/joint_vs_single.py 2000
"""

import sys
import time

from langseg.config import load_config
from langseg.data import build_corpus, default_toy_datasets, registry_of
from langseg.inference import evaluate
from langseg.training import train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
datasets = default_toy_datasets()
registry = registry_of(datasets)
corpus = build_corpus(datasets, seed=0, n_train=500, n_val=100)
cfg = load_config(overrides=[f"optim.iterations={steps}"])


def fit_and_score(ids):
    start = time.perf_counter()
    model = train(cfg, {k: corpus[k]["train"] for k in ids}, registry).model
    scores = {k: evaluate(model, corpus[k]["val"], registry[k])["miou"] for k in ids}
    print(f"  trained on {'+'.join(ids)} in {time.perf_counter() - start:.0f}s: "
          + ", ".join(f"{k} {v:.4f}" for k, v in scores.items()), flush=True)
    return scores

###############################################################################
# The joint model sees batches drawn uniformly across datasets, so each dataset
# gets about a third of the samples the single-dataset runs get.

print("joint")
joint = fit_and_score(registry.dataset_ids)
print("single")
single = {}
for ds in registry.dataset_ids:
    single.update(fit_and_score([ds]))

###############################################################################
# The gap column is what matters: joint minus single.

print(f"{'dataset':8s} {'single':>8s} {'joint':>8s} {'gap':>8s}")
for ds in registry.dataset_ids:
    print(f"{ds:8s} {single[ds]:8.4f} {joint[ds]:8.4f} {joint[ds] - single[ds]:+8.4f}")
