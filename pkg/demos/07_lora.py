# coding: utf-8

# # Low-rank adapters on every head
#
# Each head gets rank-R adapters on its Q, K and V slices. The base weights
# stay frozen. Down matrices start at zero, so the adapted model initially
# computes exactly what the base model does.

# In[1]:

import numpy as np

from d2ft.model import ModelConfig, attach_lora, model_forward, partition_model
from d2ft.scheduler import LORA_COST_MODEL
from d2ft.trainer import SynthDatasetSpec, TrainConfig, make_synthetic_dataset, train

base = partition_model(ModelConfig(seed=0))
adapted = attach_lora(base, rank=2)
data = make_synthetic_dataset(SynthDatasetSpec(num_samples=200))
print("same output before training:", np.array_equal(model_forward(base, data.tokens),
                                                     model_forward(adapted, data.tokens)))

frozen = [{k: v.copy() for k, v in s.params.items()} for s in adapted.subnets]
h = train(adapted, data, TrainConfig(epochs=5, policy="d2ft", cost_model=LORA_COST_MODEL, learning_rate=0.05))
print(h.to_csv())
print("base weights untouched:",
      all(np.array_equal(a[k], s.params[k]) for a, s in zip(frozen, adapted.subnets) for k in a))
