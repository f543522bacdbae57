"""Head-partitioned fine-tuning with knapsack-scheduled subnet operations.

A toy transformer is split into per-head subnets, each micro-batch is scored
per subnet, and a bi-level knapsack decides which subnets run a full
forward/backward pass, a forward pass only, or are skipped.
"""
from .baselines import DynamicPruner, PruningKind, dpruning_schedule, random_schedule
from .checkpoint import load_checkpoint, save_checkpoint, subnet_manifest
from .config import RunConfig, load_run_config, run_config_from_dict
from .cost_sim import (DeviceProfile, audit_settings, build_hetero_profiles, comm_cost_fraction,
                       compute_cost_fraction, homogeneous_profiles, simulate_batch, workload_variance)
from .errors import (ConfigError, D2FTError, DimensionError, InputError, NumericError, SchemaError,
                     SizeError, StateError)
from .model import (ModelConfig, OperationKind, SubnetModel, attach_lora, model_forward,
                    model_forward_backward, partition_model)
from .scheduler import (FORWARD_ONLY, FULL, LORA_COST_MODEL, SHORTCUT, BudgetSpec, CostModel, ScalerConfig,
                        ScalerMode, ScheduleTable, brute_force_schedule, capacities_from_budget, dp_search,
                        knapsack_schedule, merge_selections, scaler_schedule)
from .scoring import Metric, ScoreTable, prepass_scores
from .trainer import (Dataset, History, Policy, SynthDatasetSpec, TrainConfig, evaluate, make_synthetic_dataset,
                      train)

__version__ = "0.1.0"
