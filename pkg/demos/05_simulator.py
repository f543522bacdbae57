# coding: utf-8

# # Cost fractions, workload variance and simulated makespan

# In[1]:

from d2ft.cost_sim import (audit_settings, build_hetero_profiles, comm_cost_fraction, compute_cost_fraction,
                           homogeneous_profiles, simulate_batch, uniform_counts_table)
from d2ft.scheduler import LORA_COST_MODEL, CostModel

for n_fwd in range(5):
    t = uniform_counts_table(K=4, n_full=1, n_fwd=n_fwd, N=5)
    print(f"1 FULL + {n_fwd} FORWARD_ONLY of 5: compute {compute_cost_fraction(t, CostModel()):.0%}")


# With adapters, backward is cheap and communication dominates.

# In[2]:

for nf, no in ((3, 1), (2, 1), (3, 2)):
    t = uniform_counts_table(4, nf, no, 5)
    print(f"{nf}pf+{no}po: comm {comm_cost_fraction(t, LORA_COST_MODEL):.0%}")

for row in audit_settings():
    if row["discrepancy"]:
        print("mismatch against stated value:", row)


# The per-device timing tables are measured, not linear, so makespan comes
# from a lookup rather than a sum of unit costs.

# In[3]:

t = uniform_counts_table(4, 3, 0, 5)
print(simulate_batch(t, homogeneous_profiles(4)).to_dict())

# Heterogeneous memory: the first device hosts two subnet rows, so three
# devices cover four rows and the big device sets the makespan
profiles, budget = build_hetero_profiles("memory", count=1, K=4)
print([p.memory_units for p in profiles], budget)
t = uniform_counts_table(4, budget.n_full, budget.n_fwd, 5)
m = simulate_batch(t, profiles)
print("busy ms per device:", m.per_device_busy_ms, "makespan:", m.makespan_ms)
