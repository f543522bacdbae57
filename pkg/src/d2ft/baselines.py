"""Comparison schedulers: random assignment and dynamic subnet pruning."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .model import SubnetModel
from .scheduler import (FORWARD_ONLY, FULL, SHORTCUT, BudgetSpec, CostModel,
                        ScheduleTable)
from .scoring import gradient_magnitude, weight_magnitude

DEFAULT_REFRESH_INTERVAL = 16


def random_schedule(budget: BudgetSpec, K: int, N: int, seed, per_cell: bool = False) -> ScheduleTable:
    """Random operations per subnet.

    By default each subnet gets exactly its budgeted number of FULL and
    FORWARD_ONLY cells placed uniformly at random.  With ``per_cell=True``
    every cell is drawn independently with probabilities ``n_full/N`` and
    ``n_fwd/N``, so the realized counts (and device loads) vary.
    """
    budget.validate(K, N)
    nf, no = budget.counts(K)
    rng = np.random.default_rng(seed)
    codes = np.full((K, N), SHORTCUT, dtype=np.int8)
    for k in range(K):
        if per_cell:
            u = rng.random(N)
            pf, po = nf[k] / N, no[k] / N
            codes[k, u < pf + po] = FORWARD_ONLY
            codes[k, u < pf] = FULL
        else:
            perm = rng.permutation(N)
            codes[k, perm[:nf[k]]] = FULL
            codes[k, perm[nf[k]:nf[k] + no[k]]] = FORWARD_ONLY
    return ScheduleTable(codes)


class PruningKind(str, enum.Enum):
    MAGNITUDE = "dpruning_m"
    MAGNITUDE_GRADIENT = "dpruning_mg"


def budget_units(budget: BudgetSpec, cost_model: CostModel, K: int, N: int) -> int:
    """Total compute units a budget grants across all devices."""
    nf, no = budget.counts(K)
    return int((nf * cost_model.full_cost(K) + no * cost_model.forward_cost(K)).sum())


def pruning_table(ranking: np.ndarray, n_cells: int, N: int) -> ScheduleTable:
    """FULL on every micro-batch for the top-ranked subnets, SHORTCUT elsewhere.

    ``n_cells`` FULL cells are filled subnet by subnet in ranking order; when
    it is not a multiple of ``N`` the last kept subnet runs FULL on its first
    ``n_cells mod N`` micro-batches only.
    """
    K = len(ranking)
    codes = np.full((K, N), SHORTCUT, dtype=np.int8)
    left = int(n_cells)
    for k in ranking:
        if left <= 0:
            break
        take = min(N, left)
        codes[k, :take] = FULL
        left -= take
    return ScheduleTable(codes)


def rank_by(values: np.ndarray) -> np.ndarray:
    """Descending order; equal values keep lower subnet indices first."""
    return np.argsort(-np.asarray(values, dtype=float), kind="stable")


@dataclass
class DynamicPruner:
    """Dynamic pruning at subnet granularity, re-ranked every ``refresh_interval`` iterations.

    Never emits FORWARD_ONLY.  The MAGNITUDE variant re-ranks subnets by
    weight magnitude at every refresh.  The MAGNITUDE_GRADIENT variant also
    keeps a gradient-magnitude ranking and only re-selects (by weight
    magnitude) at a refresh when that gradient ranking has changed.
    """

    kind: PruningKind
    budget: BudgetSpec
    cost_model: CostModel = field(default_factory=CostModel)
    refresh_interval: int = DEFAULT_REFRESH_INTERVAL
    ranking: np.ndarray | None = None
    grad_ranking: np.ndarray | None = None
    refreshed_at: list = field(default_factory=list)

    def __post_init__(self):
        self.kind = PruningKind(self.kind)
        if self.refresh_interval < 1:
            raise InputError("refresh_interval must be >= 1")

    def _refresh(self, model, grad_norms, iteration):
        mags = np.array([weight_magnitude(s.trainable()) for s in model.block_subnets()])
        if self.kind is PruningKind.MAGNITUDE or self.ranking is None:
            self.ranking = rank_by(mags)
            self.refreshed_at.append(iteration)
        elif grad_norms is not None:
            new = rank_by(grad_norms)
            if self.grad_ranking is None or not np.array_equal(new, self.grad_ranking):
                self.ranking = rank_by(mags)
                self.refreshed_at.append(iteration)
        if grad_norms is not None:
            self.grad_ranking = rank_by(grad_norms)

    def schedule(self, model: SubnetModel, N: int, iteration: int, grads=None) -> ScheduleTable:
        """Table for the batch at ``iteration``.

        ``grads`` optionally holds the latest ``{subnet_index: {name: array}}``
        gradients; the MAGNITUDE_GRADIENT variant ranks their magnitudes.
        """
        K = model.config.num_block_subnets
        self.budget.validate(K, N)
        if self.ranking is None or iteration % self.refresh_interval == 0:
            gn = None
            if grads is not None:
                gn = np.array([gradient_magnitude(grads.get(k + 1, {})) for k in range(K)])
            self._refresh(model, gn, iteration)
        units = budget_units(self.budget, self.cost_model, K, N)
        full = self.cost_model.full_cost(K)
        if np.any(full != full[0]):
            raise InputError("dynamic pruning assumes a uniform FULL cost across devices")
        n_cells = units // int(full[0]) if full[0] else K * N
        return pruning_table(self.ranking, n_cells, N)


def dpruning_schedule(kind: PruningKind, model: SubnetModel, budget: BudgetSpec, N: int,
                      iteration: int = 0, cost_model: CostModel | None = None,
                      pruner: DynamicPruner | None = None, grads=None) -> ScheduleTable:
    """Functional wrapper around :class:`DynamicPruner`.

    Pass the same ``pruner`` across iterations to keep the refresh state.
    """
    if pruner is None:
        pruner = DynamicPruner(kind, budget, cost_model or CostModel())
    return pruner.schedule(model, N, iteration, grads)
