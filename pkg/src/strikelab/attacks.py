"""Targeted single-index observation perturbations.

The perturbation algorithm is the fast gradient sign method, discretized:
the gradient of a cross-entropy loss toward the target action picks a
direction, and the attacked component moves to the nearest feasible value on
that side of its current value.  Every observation slot has a small ordered
feasible set (alive flags, declared type ids, the tri-state defense matrix),
so attacks stay inside the environment's state space by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .env import EnvState, ScenarioConfig, slot_kind
from .nn import CrossEntropyToward, input_gradient
from .policies import FrozenPolicy, select_action

DEFAULT_EPSILON = 1.0


@dataclass
class AttackSpec:
    """What to attack: which indices, at which steps, toward which action."""

    target_action: tuple[int, ...]
    allowed_indices: tuple[int, ...]
    allowed_steps: Callable[[int], bool] | None = None
    epsilon: float = DEFAULT_EPSILON
    algorithm: str = "fgsm"

    def step_allowed(self, step: int) -> bool:
        return self.allowed_steps is None or bool(self.allowed_steps(step))


@dataclass
class AdvObservation:
    base_obs: np.ndarray
    perturbed_obs: np.ndarray
    index: int
    base_action: tuple[int, ...]
    induced_action: tuple[int, ...]
    sufficient: bool
    perturbed: bool  # False when no feasible move existed in the sign direction

    @property
    def perturbed_value(self) -> float:
        return float(self.perturbed_obs[self.index])


def enumerate_feasible_values(config: ScenarioConfig, index: int) -> tuple[float, ...]:
    """Ordered set of values this observation slot can legally take."""
    kind, _ref = slot_kind(config, index)
    if kind in ("blue_alive", "red_alive", "red_is_target"):
        return (0.0, 1.0)
    if kind == "blue_type":
        return tuple(sorted({float(a.type) for a in config.blue_assets}))
    if kind == "red_type":
        return tuple(sorted({float(a.type) for a in config.red_assets}))
    if kind == "pad":
        return (0.0,)
    return (-1.0, 0.0, 1.0)  # defense matrix tri-state


def perturbable_indices(config: ScenarioConfig) -> tuple[int, ...]:
    """Indices whose feasible set has more than one value."""
    return tuple(
        i
        for i in range(config.obs_length)
        if len(enumerate_feasible_values(config, i)) > 1
    )


def project_feasible(
    value: float, grad_sign: float, feasible: tuple[float, ...], epsilon: float
) -> float | None:
    """Project ``value - epsilon * grad_sign`` onto the feasible set.

    Moves to the feasible value nearest the proposal on the sign side of the
    current value; at a boundary (or for zero gradient) there is no
    perturbation and None is returned.  With the default epsilon of 1.0 this
    is exactly one step through the ordered set.
    """
    if grad_sign == 0 or epsilon == 0:
        return None
    proposal = value - epsilon * grad_sign
    if grad_sign > 0:
        candidates = [v for v in feasible if v < value]
    else:
        candidates = [v for v in feasible if v > value]
    if not candidates:
        return None
    return min(candidates, key=lambda v: abs(v - proposal))


def fgsm_targeted(
    policy: FrozenPolicy,
    config: ScenarioConfig,
    obs: np.ndarray,
    target_action: tuple[int, ...],
    index: int,
    epsilon: float = DEFAULT_EPSILON,
) -> AdvObservation:
    """One targeted single-index attack.

    The attack is sufficient only if the induced action differs from the
    action the policy takes on the unattacked observation.
    """
    if not (0 <= index < len(obs)):
        raise IndexError(f"observation index {index} out of range")
    base_action = select_action(policy, obs)
    g = input_gradient(
        policy.net, obs, CrossEntropyToward(policy.cardinalities, tuple(target_action))
    )
    feasible = enumerate_feasible_values(config, index)
    new_value = project_feasible(
        float(obs[index]), float(np.sign(g[index])), feasible, epsilon
    )
    if new_value is None:
        return AdvObservation(
            base_obs=obs,
            perturbed_obs=obs.copy(),
            index=index,
            base_action=base_action,
            induced_action=base_action,
            sufficient=False,
            perturbed=False,
        )
    perturbed = obs.copy()
    perturbed[index] = new_value
    induced = select_action(policy, perturbed)
    return AdvObservation(
        base_obs=obs,
        perturbed_obs=perturbed,
        index=index,
        base_action=base_action,
        induced_action=induced,
        sufficient=is_sufficiently_adversarial(base_action, induced),
        perturbed=True,
    )


def is_sufficiently_adversarial(action, induced) -> bool:
    """Discrete rule: any sub-action differs."""
    action, induced = tuple(action), tuple(induced)
    if len(action) != len(induced):
        raise ValueError(
            f"arity mismatch: {len(action)} vs {len(induced)} sub-actions"
        )
    return action != induced


def is_benign_pair(state: EnvState, a_idx: int, b_idx: int) -> bool:
    """A defense-flag perturbation on the ordered pair (a, b) is benign when
    at least one of the two red assets is already compromised: a compromised
    b is not worth targeting, and a compromised a cannot counter."""
    n = len(state.red_compromised)
    if a_idx == b_idx:
        raise ValueError("benign pair requires distinct red assets")
    for idx in (a_idx, b_idx):
        if not (0 <= idx < n):
            raise IndexError(f"red index {idx} out of range")
    return bool(state.red_compromised[a_idx] or state.red_compromised[b_idx])


# ---------------------------------------------------------------------------
# Attack-result export
# ---------------------------------------------------------------------------

ATTACK_SCHEMA = {"schema": "strikelab.attacks", "version": 1}


def attack_row(
    dataset_ref: str,
    episode: int,
    step: int,
    adv: AdvObservation,
    target_action,
) -> dict:
    return {
        "dataset": dataset_ref,
        "episode": episode,
        "step": step,
        "index": adv.index,
        "target_action": list(target_action),
        "perturbed": adv.perturbed,
        "perturbed_value": adv.perturbed_value,
        "base_action": list(adv.base_action),
        "induced_action": list(adv.induced_action),
        "sufficient": adv.sufficient,
    }


def export_attack_results(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(ATTACK_SCHEMA, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
