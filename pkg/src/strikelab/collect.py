"""Roll frozen policies to build the attack-analysis dataset.

Each record is one non-terminal step: observation, the action actually taken
(greedy, or uniformly random for a seeded ~5% of steps), the policy's hidden
activations and input saliency, the running property log, and a full
environment snapshot so later stages can branch simulated rollouts from the
exact state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import env as cyber
from .env import CurriculumLevel, EnvSnapshot, PropertyLog, ScenarioConfig
from .nn import MaxOutput, forward, input_gradient
from .policies import FrozenPolicy, output_to_action

DATASET_SCHEMA = "strikelab.dataset"
SNAPSHOT_SCHEMA = "strikelab.snapshots"
DATASET_VERSION = 1


@dataclass
class CollectedRecord:
    episode_id: int
    step: int
    obs: np.ndarray
    action: tuple[int, ...]
    was_forced_random: bool
    activations: np.ndarray
    saliency: np.ndarray
    properties: PropertyLog
    snapshot: EnvSnapshot


@dataclass
class Dataset:
    policy_tag: str
    scenario_hash: str
    seed: int
    requested_n: int
    random_frac: float
    records: list[CollectedRecord] = field(default_factory=list)
    # episode_id -> (first record index, one past last, final PropertyLog)
    episodes: dict[int, tuple[int, int, PropertyLog]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def episode_final_log(self, episode_id: int) -> PropertyLog:
        return self.episodes[episode_id][2]


def compute_saliency(policy: FrozenPolicy, obs: np.ndarray) -> np.ndarray:
    """Per-index magnitude of the gradient of the greedy action's value."""
    g = input_gradient(policy.net, obs, MaxOutput(policy.cardinalities))
    return np.abs(g)


def collect_dataset(
    policy: FrozenPolicy,
    config: ScenarioConfig,
    n: int = 10_000,
    random_frac: float = 0.05,
    seed: int = 0,
    level: CurriculumLevel | None = None,
    policy_tag: str = "policy",
) -> Dataset:
    """Roll full episodes until at least ``n`` records are collected.

    Episodes are never truncated (downstream analyses need terminal property
    logs), so the final count can overshoot ``n`` by up to one episode.
    """
    if not (0.0 <= random_frac < 1.0):
        raise ValueError(f"random_frac must be in [0, 1), got {random_frac}")
    dataset = Dataset(
        policy_tag=policy_tag,
        scenario_hash=config.scenario_hash(),
        seed=seed,
        requested_n=n,
        random_frac=random_frac,
    )
    rng = np.random.default_rng([seed, 0xC011EC7])
    cards = policy.cardinalities
    episode_id = 0
    while len(dataset.records) < n:
        start = len(dataset.records)
        state, obs = cyber.reset(config, [seed, 0xDA7A, episode_id], level=level)
        done = False
        step_index = 0
        while not done:
            trace = forward(policy.net, obs)
            greedy = output_to_action(trace.output, cards)
            forced = rng.random() < random_frac
            if forced:
                action = tuple(int(rng.integers(0, c)) for c in cards)
            else:
                action = greedy
            dataset.records.append(
                CollectedRecord(
                    episode_id=episode_id,
                    step=step_index,
                    obs=obs.copy(),
                    action=action,
                    was_forced_random=forced,
                    activations=trace.hidden.copy(),
                    saliency=compute_saliency(policy, obs),
                    properties=PropertyLog(**state.property_log.to_dict()),
                    snapshot=cyber.snapshot(state),
                )
            )
            state, obs, _reward, done, plog = cyber.step(config, state, action)
            step_index += 1
        dataset.episodes[episode_id] = (
            start,
            len(dataset.records),
            PropertyLog(**plog.to_dict()),
        )
        episode_id += 1
    return dataset


# ---------------------------------------------------------------------------
# Serialization: line-delimited records plus a snapshot sidecar
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    """Write ``<path>`` (header + one JSON record per line) and a
    ``<path>.snapshots`` sidecar holding the environment snapshots."""
    path = str(path)
    header = {
        "schema": DATASET_SCHEMA,
        "version": DATASET_VERSION,
        "policy_tag": dataset.policy_tag,
        "scenario_hash": dataset.scenario_hash,
        "seed": dataset.seed,
        "requested_n": dataset.requested_n,
        "actual_n": len(dataset.records),
        "random_frac": dataset.random_frac,
        "episodes": {
            str(e): [a, b, log.to_dict()]
            for e, (a, b, log) in sorted(dataset.episodes.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in dataset.records:
            fh.write(
                json.dumps(
                    {
                        "episode_id": rec.episode_id,
                        "step": rec.step,
                        "obs": rec.obs.tolist(),
                        "action": list(rec.action),
                        "was_forced_random": rec.was_forced_random,
                        "activations": rec.activations.tolist(),
                        "saliency": rec.saliency.tolist(),
                        "properties": rec.properties.to_dict(),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    with open(path + ".snapshots", "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": SNAPSHOT_SCHEMA, "version": DATASET_VERSION}) + "\n")
        for rec in dataset.records:
            snap = rec.snapshot
            fh.write(
                json.dumps(
                    {
                        "red_alive": list(snap.red_alive),
                        "red_compromised": list(snap.red_compromised),
                        "blue_alive": list(snap.blue_alive),
                        "observed_defense": list(snap.observed_defense),
                        "num_red": snap.num_red,
                        "step_count": snap.step_count,
                        "cumulative_reward": snap.cumulative_reward,
                        "property_log": list(snap.property_log),
                        "resolved_effects": list(snap.resolved_effects),
                        "effects_side": snap.effects_side,
                        "rng_state": snap.rng_state,
                        "episode_cap": snap.episode_cap,
                        "done": snap.done,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_dataset(path) -> Dataset:
    path = str(path)
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != DATASET_SCHEMA:
            raise ValueError(f"{path}: not a strikelab dataset")
        if header.get("version") != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
        rows = [json.loads(line) for line in fh]
    with open(path + ".snapshots", "r", encoding="utf-8") as fh:
        sheader = json.loads(fh.readline())
        if sheader.get("schema") != SNAPSHOT_SCHEMA:
            raise ValueError(f"{path}.snapshots: not a snapshot sidecar")
        snaps = []
        for line in fh:
            d = json.loads(line)
            snaps.append(
                EnvSnapshot(
                    red_alive=tuple(d["red_alive"]),
                    red_compromised=tuple(d["red_compromised"]),
                    blue_alive=tuple(d["blue_alive"]),
                    observed_defense=tuple(d["observed_defense"]),
                    num_red=d["num_red"],
                    step_count=d["step_count"],
                    cumulative_reward=d["cumulative_reward"],
                    property_log=tuple(d["property_log"]),
                    resolved_effects=tuple(d["resolved_effects"]),
                    effects_side=d["effects_side"],
                    rng_state=d["rng_state"],
                    episode_cap=d["episode_cap"],
                    done=d["done"],
                )
            )
    if len(rows) != len(snaps):
        raise ValueError(f"{path}: record/snapshot count mismatch")
    dataset = Dataset(
        policy_tag=header["policy_tag"],
        scenario_hash=header["scenario_hash"],
        seed=header["seed"],
        requested_n=header["requested_n"],
        random_frac=header["random_frac"],
    )
    for row, snap in zip(rows, snaps):
        dataset.records.append(
            CollectedRecord(
                episode_id=row["episode_id"],
                step=row["step"],
                obs=np.array(row["obs"], dtype=np.float64),
                action=tuple(row["action"]),
                was_forced_random=row["was_forced_random"],
                activations=np.array(row["activations"], dtype=np.float64),
                saliency=np.array(row["saliency"], dtype=np.float64),
                properties=PropertyLog.from_dict(row["properties"]),
                snapshot=snap,
            )
        )
    dataset.episodes = {
        int(e): (a, b, PropertyLog.from_dict(log))
        for e, (a, b, log) in header["episodes"].items()
    }
    return dataset
