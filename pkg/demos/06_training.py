# coding: utf-8

# # Fine-tuning under a 60% compute budget: knapsack vs random
#
# Both policies give each subnet 3 FULL micro-batches out of 5 per batch and
# skip the rest, so the compute cost is identical. Only the choice of which
# micro-batches differs.

# In[1]:

import numpy as np

from d2ft.model import ModelConfig, partition_model
from d2ft.scheduler import BudgetSpec
from d2ft.trainer import SynthDatasetSpec, TrainConfig, evaluate_full, make_synthetic_dataset, train

results = {"d2ft": [], "random": [], "standard": []}
for seed in range(3):
    data = make_synthetic_dataset(SynthDatasetSpec(num_samples=400, seed=seed))
    for policy in results:
        model = partition_model(ModelConfig(seed=seed))
        h = train(model, data, TrainConfig(policy=policy, seed=seed, budget=BudgetSpec(3, 0)))
        results[policy].append(h.final())
        if seed == 0:
            print(policy, "compute fraction", h.rows[-1]["compute_fraction"], "final top1", h.final("top1"))

for policy, losses in results.items():
    print(f"{policy:>8}: final loss per seed {np.round(losses, 4)}, mean {np.mean(losses):.4f}")


# The history holds one row per epoch and serializes to CSV.

# In[2]:

print(h.to_csv())
