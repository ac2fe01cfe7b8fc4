"""Worst-group risks over hard or soft groups, and the group-weight player for the max.

Soft group risk for group g::

    L_g = (1 / n~_g) * sum_i Q[i, g] * loss_i,      n~_g = sum_i Q[i, g]

and the robust objective is ``max_g L_g + C / sqrt(n~_g)``. Groups with
``n~_g < EMPTY_GROUP_TOL`` are left out of the max and get zero weight.

Per-group sums use :func:`math.fsum` (correctly rounded, order free), so a
one-hot ``Q`` produces bit-identical numbers to the hard-label code path.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

EMPTY_GROUP_TOL = 1e-8


class Objective(str, enum.Enum):
    ERM = "ERM"
    GDRO = "GDRO"
    PGDRO = "PGDRO"


class MaxMode(str, enum.Enum):
    EG = "eg"
    HARD_MAX = "hard-max"


@dataclass(frozen=True)
class GroupRiskReport:
    per_group_risk: np.ndarray
    adjusted_risk: np.ndarray  # -inf for excluded (empty) groups
    worst_group: int
    objective_value: float

    def to_dict(self) -> dict:
        return {
            "per_group_risk": self.per_group_risk.tolist(),
            "adjusted_risk": [float(v) if np.isfinite(v) else None for v in self.adjusted_risk],
            "worst_group": self.worst_group,
            "objective_value": self.objective_value,
        }


@dataclass(frozen=True)
class RobustState:
    """Group weights ``q`` on the simplex plus everything the update needs."""

    q: np.ndarray
    n_tilde: np.ndarray
    C: float = 0.0
    eta_q: float = 0.01
    objective: Objective = Objective.PGDRO
    max_mode: MaxMode = MaxMode.EG

    @property
    def active(self) -> np.ndarray:
        return self.n_tilde >= EMPTY_GROUP_TOL

    def adjustment(self) -> np.ndarray:
        return adjustment(self.n_tilde, self.C)


def init_state(n_tilde, C: float = 0.0, eta_q: float = 0.01,
               objective: Objective | str = Objective.PGDRO,
               max_mode: MaxMode | str = MaxMode.EG) -> RobustState:
    """Uniform ``q`` over occupied groups."""
    if C < 0:
        raise ValueError(f"C must be nonnegative, got {C}")
    if eta_q <= 0:
        raise ValueError(f"eta_q must be positive, got {eta_q}")
    n_tilde = np.asarray(n_tilde, dtype=np.float64)
    active = n_tilde >= EMPTY_GROUP_TOL
    if not active.any():
        raise ValueError("every group is empty")
    q = np.where(active, 1.0 / active.sum(), 0.0)
    return RobustState(q, n_tilde, float(C), float(eta_q), Objective(objective), MaxMode(max_mode))


def effective_group_sizes(Q) -> np.ndarray:
    """Column sums of ``Q`` (soft membership mass per group)."""
    Q = np.asarray(Q, dtype=np.float64)
    return np.array([math.fsum(Q[:, g]) for g in range(Q.shape[1])])


def hard_group_sizes(groups, num_groups: int) -> np.ndarray:
    return np.bincount(np.asarray(groups, dtype=np.int64), minlength=num_groups).astype(np.float64)


def group_loss_sums(losses, Q) -> np.ndarray:
    """``sum_i Q[i, g] * loss_i`` per group."""
    losses = np.asarray(losses, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if Q.shape[0] != losses.shape[0]:
        raise ValueError(f"{losses.shape[0]} losses but {Q.shape[0]} rows of Q")
    return np.array([math.fsum(Q[:, g] * losses) for g in range(Q.shape[1])])


def hard_group_loss_sums(losses, groups, num_groups: int) -> np.ndarray:
    losses = np.asarray(losses, dtype=np.float64)
    groups = _check_groups(groups, num_groups, len(losses))
    return np.array([math.fsum(losses[groups == g]) for g in range(num_groups)])


def _check_groups(groups, num_groups: int, n: int) -> np.ndarray:
    groups = np.asarray(groups, dtype=np.int64)
    if groups.shape != (n,):
        raise ValueError(f"expected {n} group indices, got shape {groups.shape}")
    bad = np.flatnonzero((groups < 0) | (groups >= num_groups))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"group index {groups[i]} at row {i} outside [0, {num_groups})")
    return groups


def risks_from_sums(sums, n_tilde, scale: float = 1.0) -> np.ndarray:
    n_tilde = np.asarray(n_tilde, dtype=np.float64)
    active = n_tilde >= EMPTY_GROUP_TOL
    safe = np.where(active, n_tilde, 1.0)
    return np.where(active, scale * (sums / safe), 0.0)


def per_group_weighted_loss(losses, Q, n_tilde, scale: float = 1.0) -> np.ndarray:
    """``L_g = scale * sum_i Q[i, g] loss_i / n~_g``; 0 for empty groups.

    ``scale`` is ``N / batch_size`` when ``losses``/``Q`` hold a minibatch,
    which turns the batch sum into an unbiased estimate of the full-data risk.
    """
    return risks_from_sums(group_loss_sums(losses, Q), n_tilde, scale)


def adjustment(n_tilde, C: float) -> np.ndarray:
    n_tilde = np.asarray(n_tilde, dtype=np.float64)
    active = n_tilde >= EMPTY_GROUP_TOL
    return np.where(active, C / np.sqrt(np.where(active, n_tilde, 1.0)), 0.0)


def _report(risks, n_tilde, C: float) -> GroupRiskReport:
    active = np.asarray(n_tilde) >= EMPTY_GROUP_TOL
    adjusted = np.where(active, risks + adjustment(n_tilde, C), -np.inf)
    worst = int(np.argmax(adjusted))
    return GroupRiskReport(risks, adjusted, worst, float(adjusted[worst]))


def pg_dro_risk(losses, Q, n_tilde, C: float = 0.0) -> GroupRiskReport:
    """Soft-group worst-case risk ``max_g L_g + C / sqrt(n~_g)``."""
    if C < 0:
        raise ValueError(f"C must be nonnegative, got {C}")
    return _report(per_group_weighted_loss(losses, Q, n_tilde), n_tilde, C)


def gdro_risk(losses, hard_groups, C: float = 0.0, num_groups: int | None = None) -> GroupRiskReport:
    """Hard-label worst-group risk, using the indicator of each sample's group."""
    if C < 0:
        raise ValueError(f"C must be nonnegative, got {C}")
    losses = np.asarray(losses, dtype=np.float64)
    hard_groups = np.asarray(hard_groups, dtype=np.int64)
    if num_groups is None:
        num_groups = int(hard_groups.max()) + 1
    sums = hard_group_loss_sums(losses, hard_groups, num_groups)
    n = hard_group_sizes(hard_groups, num_groups)
    return _report(risks_from_sums(sums, n), n, C)


def erm_risk(losses) -> float:
    losses = np.asarray(losses, dtype=np.float64)
    return math.fsum(losses) / len(losses)


def update_group_weights(state: RobustState, adjusted_risk) -> RobustState:
    """One step of the max player.

    ``eg``: ``q_g <- q_g * exp(eta_q * r_g)`` then renormalize (computed with
    the max risk subtracted). ``hard-max``: ``q`` becomes one-hot at the worst
    occupied group. Empty groups keep ``q_g = 0``.
    """
    r = np.asarray(adjusted_risk, dtype=np.float64)
    active = state.active
    if r.shape != state.q.shape:
        raise ValueError(f"risk vector has shape {r.shape}, expected {state.q.shape}")
    if not np.all(np.isfinite(r[active])):
        raise FloatingPointError(f"non-finite group risk: {r}")
    masked = np.where(active, r, -np.inf)
    if state.max_mode is MaxMode.HARD_MAX:
        q = np.zeros_like(state.q)
        q[int(np.argmax(masked))] = 1.0
        return replace(state, q=q)
    step = np.where(active, np.exp(state.eta_q * (masked - masked.max())), 0.0)
    q = state.q * step
    total = q.sum()
    if not total > 0:
        raise FloatingPointError("group weights underflowed to zero")
    return replace(state, q=q / total)


def _group_coefficients(state: RobustState) -> np.ndarray:
    active = state.active
    return np.where(active, state.q / np.where(active, state.n_tilde, 1.0), 0.0)


def sample_weights(state: RobustState, Q, scale: float = 1.0) -> np.ndarray:
    """``w_i = scale * sum_g q_g Q[i, g] / n~_g`` (``scale / N`` each under ERM).

    With these weights ``sum_i w_i loss_i == sum_g q_g L_g``, so the gradient
    of the q-weighted robust risk is :func:`pgdro.numerics.backward` with ``w``.
    The ``C / sqrt(n~_g)`` terms do not depend on the parameters and drop out.
    """
    Q = np.asarray(Q, dtype=np.float64)
    if state.objective is Objective.ERM:
        return np.full(Q.shape[0], scale / state.n_tilde.sum())
    return scale * (Q * _group_coefficients(state)).sum(axis=1)


def hard_sample_weights(state: RobustState, groups, scale: float = 1.0) -> np.ndarray:
    groups = _check_groups(groups, len(state.q), len(groups))
    return scale * _group_coefficients(state)[groups]


def weighted_robust_risk(state: RobustState, group_risks) -> float:
    """``sum_g q_g (L_g + C / sqrt(n~_g))`` over occupied groups."""
    adjusted = np.asarray(group_risks) + state.adjustment()
    return float(np.sum(np.where(state.active, state.q * adjusted, 0.0)))
