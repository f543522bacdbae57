# coding: utf-8

# # The bi-level knapsack scheduler
#
# Each device (one subnet) gets a FULL pool and a FORWARD_ONLY pool. One 0/1
# knapsack picks FULL micro-batches by backward score, a second picks
# FORWARD_ONLY ones by forward score, and the two selections are merged.

# In[1]:

import numpy as np

from d2ft.scheduler import (BudgetSpec, CostModel, brute_force_schedule, capacities_from_budget,
                            knapsack_schedule, schedule_objective)
from d2ft.scoring import ScoreTable

rng = np.random.default_rng(3)
K, N = 4, 5
scores = ScoreTable(rng.random((K, N)), rng.random((K, N)))
cm = CostModel()  # cf = 2, cb = 3 units
caps = capacities_from_budget(BudgetSpec(n_full=2, n_fwd=2), cm, N, K)
print("cap_full:", caps.cap_full, "cap_fwd:", caps.cap_fwd)

table = knapsack_schedule(scores, cm, caps)
print(table.codes)  # 1 = FULL, 2 = FORWARD_ONLY, 3 = SHORTCUT


# Merge rules: a cell picked by both knapsacks becomes FULL, so some
# forward-only capacity can go unused on a device.

# In[2]:

full, fwd, short = table.counts()
print("FULL per device:", full, "FORWARD_ONLY:", fwd, "SHORTCUT:", short)
print("units used:", table.cost(cm), "of", caps.cap_full + caps.cap_fwd)


# A meet-in-the-middle exhaustive search over all 3^N assignments per device
# is available for small N. It pools the two budgets into one, so it is an
# upper bound on what the decoupled scheduler can reach.

# In[3]:

best = brute_force_schedule(scores, cm, caps)
print("decoupled objective:", schedule_objective(table, scores).round(3))
print("exhaustive objective:", schedule_objective(best, scores).round(3))
