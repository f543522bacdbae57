# coding: utf-8

# # Baseline schedules
#
# Random placement, dynamic pruning by weight magnitude (M) or by magnitude
# times gradient (MG), and a multiple-choice knapsack that scales forward
# scores by a factor lambda before competing with backward scores.

# In[1]:

import numpy as np

from d2ft.baselines import PruningKind, dpruning_schedule, random_schedule
from d2ft.cost_sim import workload_variance
from d2ft.model import ModelConfig, partition_model
from d2ft.scheduler import BudgetSpec, CostModel, ScalerConfig, ScalerMode, capacities_from_budget, scaler_schedule
from d2ft.scoring import prepass_scores
from d2ft.trainer import SynthDatasetSpec, make_synthetic_dataset

budget = BudgetSpec(3, 0)
print(random_schedule(budget, K=4, N=5, seed=0).codes)


# Fixed per-subnet counts keep every device equally loaded. Drawing each cell
# independently does not.

# In[2]:

cm = CostModel()
fixed = [workload_variance(random_schedule(budget, 4, 5, seed=s), cm) for s in range(20)]
per_cell = [workload_variance(random_schedule(budget, 4, 5, seed=s, per_cell=True), cm) for s in range(20)]
print("fixed counts, max variance:", max(fixed))
print("per-cell draws, mean variance:", np.mean(per_cell).round(4))


# In[3]:

model = partition_model(ModelConfig(seed=0))
for kind in PruningKind:
    print(kind.value, "\n", dpruning_schedule(kind, model, budget, N=5).codes)


# In[4]:

data = make_synthetic_dataset(SynthDatasetSpec(num_samples=20))
scores = prepass_scores(model, data.micro_batches(4))
caps = capacities_from_budget(BudgetSpec(2, 2), cm, 5, model.config.num_block_subnets)
for mode in (ScalerMode.MAX, ScalerMode.MIN):
    print(mode.value, "\n", scaler_schedule(scores, cm, caps, ScalerConfig(mode)).codes)
