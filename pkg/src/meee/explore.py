"""Optimistic action selection over Gaussian-perturbed policy actions.

Candidates are scored by the conservative Q estimate plus ``lam`` times the
ensemble disagreement at the candidate, and the best one is executed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from meee.dynamics import Ensemble, ensemble_variance
from meee.nn import ContractError
from meee.sac import CriticPair, GaussianPolicy, sample_action


@dataclass
class ExplorationParams:
    lam: float = 1.0
    psi: np.ndarray = field(default_factory=lambda: np.ones(1))
    k: int = 8
    include_base: bool = True

    def __post_init__(self):
        self.psi = np.atleast_1d(np.asarray(self.psi, dtype=np.float64))
        if self.lam < 0:
            raise ContractError(f"lambda must be nonnegative, got {self.lam}")
        if not np.all(self.psi > 0):
            raise ContractError(f"psi entries must be positive, got {self.psi}")
        if self.k < 0:
            raise ContractError(f"candidate count must be nonnegative, got {self.k}")
        if self.k == 0 and not self.include_base:
            raise ContractError("empty candidate set: k = 0 and include_base = False")


def augment_action(
    a: np.ndarray,
    psi: np.ndarray,
    rng: np.random.Generator,
    low: np.ndarray,
    high: np.ndarray,
) -> np.ndarray:
    """``clip(a + z, low, high)`` with ``z ~ N(0, diag(psi))``."""
    a = np.asarray(a, dtype=np.float64)
    z = rng.standard_normal(a.shape) * np.sqrt(psi)
    return np.clip(a + z, low, high)


def candidate_set(
    base: np.ndarray, params: ExplorationParams, rng: np.random.Generator, low: np.ndarray, high: np.ndarray
) -> np.ndarray:
    """Rows: the base action (if included) followed by ``k`` perturbations of it."""
    noise = rng.standard_normal((params.k, len(base))) * np.sqrt(params.psi)
    augmented = np.clip(base + noise, low, high)
    if params.include_base:
        return np.vstack([base[None, :], augmented])
    return augmented


def score_candidates(
    state: np.ndarray,
    candidates: np.ndarray,
    critics: CriticPair,
    ensemble: Ensemble | None,
    lam: float,
) -> np.ndarray:
    states = np.broadcast_to(state, (len(candidates), len(state)))
    scores = critics.q_value(states, candidates)
    if lam > 0:
        if ensemble is None:
            raise ContractError("a positive exploration bonus needs an ensemble")
        scores = scores + lam * ensemble_variance(ensemble, states, candidates)
    return scores


def select_action(
    state: np.ndarray,
    policy: GaussianPolicy,
    critics: CriticPair,
    ensemble: Ensemble | None,
    params: ExplorationParams,
    rng: np.random.Generator,
    return_info: bool = False,
):
    """Best candidate under ``Q(s, a) + lam * V(s, a)``; ties go to the lowest index."""
    base, _ = sample_action(policy, state, rng)
    candidates = candidate_set(base, params, rng, policy.action_low, policy.action_high)
    scores = score_candidates(np.asarray(state, dtype=np.float64), candidates, critics, ensemble, params.lam)
    best = int(np.argmax(scores))
    if return_info:
        return candidates[best], {"candidates": candidates, "scores": scores, "index": best, "base": base}
    return candidates[best]
