"""Cross-policy attack transferability.

Attacks are crafted with a source policy's gradients on a target policy's
collected observations (single index, feasible projection), then evaluated
on the target policy.  Per (source, target, action-target) cell we record:
transferability rate (induced action differs from the target policy's clean
action), target-transferability count per million attacks (induced equals
the attack's target action), and the mean per-sub-action match fraction.
Self-attacks (source == target) are included.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .attacks import enumerate_feasible_values, perturbable_indices, project_feasible
from .collect import Dataset
from .env import ScenarioConfig
from .nn import batched_cross_entropy_input_gradients, forward, segment_bounds
from .policies import FrozenPolicy, batched_actions

NOOP_TARGET = "noop"
MAX_LOSS_WIN_TARGET = "max_loss_win"
PER_MILLION = 1_000_000


@dataclass
class TransferCell:
    source: str
    target: str
    action_target_kind: str
    target_action: tuple[int, ...]
    n_attacks: int
    n_transferable: int
    n_target_transfer: int
    n_target_transfer_when_differs: int
    n_source_sufficient: int
    subaction_match_sum: float

    @property
    def transfer_rate(self) -> float:
        return self.n_transferable / self.n_attacks if self.n_attacks else 0.0

    @property
    def target_transfer_per_million(self) -> float:
        return (
            self.n_target_transfer / self.n_attacks * PER_MILLION
            if self.n_attacks
            else 0.0
        )

    @property
    def subaction_match(self) -> float:
        return self.subaction_match_sum / self.n_attacks if self.n_attacks else 0.0


def subaction_match_fraction(induced, target) -> float:
    """Fraction of sub-action positions where the induced action equals the
    target action."""
    induced, target = tuple(induced), tuple(target)
    if len(induced) != len(target):
        raise ValueError(
            f"arity mismatch: {len(induced)} vs {len(target)} sub-actions"
        )
    return sum(a == b for a, b in zip(induced, target)) / len(induced)


def max_loss_win_action(dataset: Dataset) -> tuple[int, ...]:
    """The action tuple maximizing (uses in losing episodes) minus (uses in
    winning episodes); ties break lexicographically smallest."""
    if not dataset.episodes:
        raise ValueError("dataset has no completed episodes")
    counts: dict[tuple[int, ...], int] = {}
    for rec in dataset.records:
        outcome = dataset.episode_final_log(rec.episode_id).win
        delta = 1 if outcome == "loss" else -1 if outcome == "win" else 0
        action = tuple(rec.action)
        counts[action] = counts.get(action, 0) + delta
    best = max(counts.items(), key=lambda kv: (kv[1], tuple(-x for x in kv[0])))
    return best[0]


# ---------------------------------------------------------------------------
# Batched attack evaluation
# ---------------------------------------------------------------------------


def _perturbed_batch(config, obs_matrix, grads, indices, epsilon=1.0):
    """All single-index perturbations of every observation row.

    Returns an array of shape (n_rows * n_indices, obs_dim): row r's attack
    on index i sits at position r * n_indices + i.  Where no feasible move
    exists in the gradient-sign direction the row is left unperturbed.
    """
    n, dim = obs_matrix.shape
    feasible = {i: enumerate_feasible_values(config, i) for i in indices}
    out = np.repeat(obs_matrix, len(indices), axis=0)
    signs = np.sign(grads)
    for r in range(n):
        base = r * len(indices)
        for k, i in enumerate(indices):
            v = project_feasible(
                float(obs_matrix[r, i]), float(signs[r, i]), feasible[i], epsilon
            )
            if v is not None:
                out[base + k, i] = v
    return out


def run_transfer_matrix(
    policies: dict[str, FrozenPolicy],
    datasets: dict[str, Dataset],
    config: ScenarioConfig,
    action_target_kinds=(NOOP_TARGET, MAX_LOSS_WIN_TARGET),
    allowed_indices=None,
    max_records: int | None = None,
    epsilon: float = 1.0,
    seed: int = 0,
) -> list[TransferCell]:
    """Every (source, target, action-target) cell over the policy suite.

    ``max_records`` subsamples each target dataset (seeded, uniform) to cap
    the n_records * n_indices * n_cells evaluation cost.
    """
    for tag in policies:
        if tag not in datasets:
            raise KeyError(f"no dataset for target policy {tag!r}")
    tags = list(policies)
    indices = tuple(allowed_indices or perturbable_indices(config))
    cards = next(iter(policies.values())).cardinalities
    bounds = segment_bounds(cards)

    # Per-target observation matrices and clean actions.
    obs_by_tag: dict[str, np.ndarray] = {}
    base_by_tag: dict[str, np.ndarray] = {}
    rng = np.random.default_rng([seed, 0x7247])
    for tag in tags:
        records = datasets[tag].records
        if max_records is not None and len(records) > max_records:
            pick = np.sort(rng.choice(len(records), size=max_records, replace=False))
            records = [records[i] for i in pick]
        obs = np.stack([r.obs for r in records])
        obs_by_tag[tag] = obs
        base_by_tag[tag] = batched_actions(policies[tag], obs)

    # Action targets per source policy.
    targets_by_source: dict[str, dict[str, tuple[int, ...]]] = {}
    for tag in tags:
        kinds = {}
        for kind in action_target_kinds:
            if kind == NOOP_TARGET:
                kinds[kind] = tuple(0 for _ in cards)
            elif kind == MAX_LOSS_WIN_TARGET:
                kinds[kind] = max_loss_win_action(datasets[tag])
            else:
                raise ValueError(f"unknown action target kind {kind!r}")
        targets_by_source[tag] = kinds

    cells = []
    for source in tags:
        for kind in action_target_kinds:
            target_action = targets_by_source[source][kind]
            for target in tags:
                obs = obs_by_tag[target]
                grads = batched_cross_entropy_input_gradients(
                    policies[source].net, obs, cards, target_action
                )
                perturbed = _perturbed_batch(config, obs, grads, indices, epsilon)
                induced = batched_actions(policies[target], perturbed)
                induced_src = batched_actions(policies[source], perturbed)
                base = np.repeat(base_by_tag[target], len(indices), axis=0)
                base_src = np.repeat(base_by_tag[source], len(indices), axis=0)
                tgt = np.array(target_action)

                transferable = np.any(induced != base, axis=1)
                hits_target = np.all(induced == tgt, axis=1)
                src_sufficient = np.any(induced_src != base_src, axis=1)
                differs = np.any(base != tgt, axis=1)
                match_frac = np.mean(induced == tgt, axis=1)

                cells.append(
                    TransferCell(
                        source=source,
                        target=target,
                        action_target_kind=kind,
                        target_action=target_action,
                        n_attacks=int(perturbed.shape[0]),
                        n_transferable=int(transferable.sum()),
                        n_target_transfer=int(hits_target.sum()),
                        n_target_transfer_when_differs=int(
                            (hits_target & differs).sum()
                        ),
                        n_source_sufficient=int(src_sufficient.sum()),
                        subaction_match_sum=float(match_frac.sum()),
                    )
                )
    return cells


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

TRANSFER_SCHEMA = {"schema": "strikelab.transfer", "version": 1}


def export_transfer_table(path, cells: list[TransferCell]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(TRANSFER_SCHEMA, sort_keys=True) + "\n")
        for c in cells:
            fh.write(
                json.dumps(
                    {
                        "source": c.source,
                        "target": c.target,
                        "action_target_kind": c.action_target_kind,
                        "target_action": list(c.target_action),
                        "n_attacks": c.n_attacks,
                        "n_transferable": c.n_transferable,
                        "transfer_rate": c.transfer_rate,
                        "n_target_transfer": c.n_target_transfer,
                        "target_transfer_per_million": c.target_transfer_per_million,
                        "n_target_transfer_when_differs": c.n_target_transfer_when_differs,
                        "n_source_sufficient": c.n_source_sufficient,
                        "subaction_match": c.subaction_match,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_transfer_table(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != TRANSFER_SCHEMA["schema"]:
            raise ValueError(f"{path}: not a transfer table")
        return [json.loads(line) for line in fh]
