"""Branched-rollout impact analysis.

Attack points (record x observation index) are enumerated, optionally
stratified-sampled, and attacked with the targeted perturbation.  Only
sufficiently adversarial attacks (induced action differs from the policy's
unattacked action) spawn simulated rollouts: paired attacked/unattacked
continuations from the same bit-identical snapshot, compared at episode end
under difference/indicator impact metrics.
"""

from __future__ import annotations

import json
import multiprocessing
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import env as cyber
from .attacks import AttackSpec, fgsm_targeted
from .collect import Dataset
from .env import EnvSnapshot, PropertyLog, ScenarioConfig, WIN
from .nn import forward
from .policies import FrozenPolicy, output_to_action

PROPERTIES = ("win", "red_count", "blue_count", "trajectory_length")
METRICS = ("difference", "indicator")


@dataclass(frozen=True)
class AttackPoint:
    record_index: int
    episode: int
    step: int
    index: int
    target_action: tuple[int, ...]


@dataclass
class ImpactSample:
    point: AttackPoint
    base_action: tuple[int, ...]
    induced_action: tuple[int, ...]
    perturbed_value: float
    attacked_logs: list[PropertyLog]
    unattacked_logs: list[PropertyLog]
    impacts: dict[str, dict[str, float]]
    rollout_steps: int
    sufficient: bool = True


@dataclass
class ImpactAggregate:
    key: object
    mean: float
    count: int


@dataclass
class CampaignReport:
    points_enumerated: int = 0
    points_sampled: int = 0
    attacks_generated: int = 0
    attacks_sufficient: int = 0
    rollouts: int = 0
    simulated_steps: int = 0


@dataclass
class SamplingPlan:
    """How to prune attack points; strata default to observation index
    crossed with step decile so both aggregation axes keep coverage."""

    per_stratum: int | None = None  # None = keep everything
    strata: str = "index_step_decile"  # index | step | index_step_decile | none


# ---------------------------------------------------------------------------
# Enumeration and sampling
# ---------------------------------------------------------------------------


def enumerate_attack_points(dataset: Dataset, spec: AttackSpec) -> list[AttackPoint]:
    """Cartesian product of eligible records and allowed indices."""
    points = []
    target = tuple(spec.target_action)
    for r, rec in enumerate(dataset.records):
        if rec.snapshot.done:
            continue
        if not spec.step_allowed(rec.step):
            continue
        for index in spec.allowed_indices:
            points.append(
                AttackPoint(
                    record_index=r,
                    episode=rec.episode_id,
                    step=rec.step,
                    index=index,
                    target_action=target,
                )
            )
    return points


def stratified_sample(
    points: list[AttackPoint],
    strata: Callable[[AttackPoint], object],
    per_stratum: int,
    seed: int = 0,
) -> list[AttackPoint]:
    """Uniform without-replacement sample of up to ``per_stratum`` points
    from every stratum; deterministic for a fixed seed."""
    if per_stratum < 1:
        raise ValueError("per_stratum must be >= 1")
    groups: dict = {}
    for i, p in enumerate(points):
        groups.setdefault(strata(p), []).append(i)
    rng = np.random.default_rng([seed, 0x57A7])
    chosen: list[int] = []
    for key in sorted(groups, key=repr):
        members = groups[key]
        if len(members) <= per_stratum:
            chosen.extend(members)
        else:
            pick = rng.choice(len(members), size=per_stratum, replace=False)
            chosen.extend(members[i] for i in sorted(pick))
    return [points[i] for i in sorted(chosen)]


def strata_key(plan: SamplingPlan, episode_cap: int) -> Callable[[AttackPoint], object]:
    decile = max(1, episode_cap // 10)
    if plan.strata == "index":
        return lambda p: p.index
    if plan.strata == "step":
        return lambda p: p.step
    if plan.strata == "index_step_decile":
        return lambda p: (p.index, p.step // decile)
    if plan.strata == "none":
        return lambda p: 0
    raise ValueError(f"unknown strata {plan.strata!r}")


# ---------------------------------------------------------------------------
# Simulated rollouts
# ---------------------------------------------------------------------------


def simulate_rollout(
    config: ScenarioConfig,
    snap: EnvSnapshot,
    policy: FrozenPolicy,
    first_action,
    seed=None,
) -> tuple[PropertyLog, int]:
    """Restore the snapshot, apply ``first_action``, then follow the policy's
    greedy actions to termination (one attack per rollout).

    Returns the terminal property log and the number of environment steps
    executed.  ``seed=None`` continues the snapshot's own RNG stream, which
    makes a replayed first action reproduce the original episode exactly.
    """
    if snap.done:
        raise ValueError("cannot roll out from a terminal snapshot")
    state = cyber.restore(snap)
    if seed is not None:
        state.rng = np.random.default_rng(seed)
    steps = 0
    state, obs, _r, done, plog = cyber.step(config, state, tuple(first_action))
    steps += 1
    while not done:
        action = output_to_action(forward(policy.net, obs).output, policy.cardinalities)
        state, obs, _r, done, plog = cyber.step(config, state, action)
        steps += 1
    return PropertyLog(**plog.to_dict()), steps


# ---------------------------------------------------------------------------
# Impact metrics
# ---------------------------------------------------------------------------


def _require_scalar(value) -> None:
    if isinstance(value, (bool, str)) or value is None:
        raise TypeError(f"impact metric needs a scalar property value, got {value!r}")


def impact_difference(p_attacked, p_unattacked):
    """Signed change in a scalar property (attacked minus unattacked)."""
    _require_scalar(p_attacked)
    _require_scalar(p_unattacked)
    return np.subtract(p_attacked, p_unattacked)


def impact_indicator(p_attacked, p_unattacked):
    """1 when the attacked and unattacked property values differ."""
    return np.not_equal(p_attacked, p_unattacked).astype(np.float64)


def impact_threshold(p_attacked, p_unattacked, d: Callable, d_star: float):
    """1 when the property moved further than ``d_star`` under distance ``d``."""
    if d_star < 0:
        raise ValueError("d_star must be >= 0")
    return (np.asarray(d(p_attacked, p_unattacked)) > d_star).astype(np.float64)


def estimate_expected_impact(attacked_values, unattacked_values, metric) -> float:
    """Uniform average of the metric over all (attacked, unattacked) pairs,
    repeats included."""
    if len(attacked_values) == 0 or len(unattacked_values) == 0:
        raise ValueError("both observation lists must be non-empty")
    a = np.asarray(attacked_values, dtype=np.float64)[:, None]
    u = np.asarray(unattacked_values, dtype=np.float64)[None, :]
    return float(np.mean(metric(a, u)))


def numeric_properties(log: PropertyLog) -> dict[str, float]:
    return {
        "win": 1.0 if log.win == WIN else 0.0,
        "red_count": float(log.red_count),
        "blue_count": float(log.blue_count),
        "trajectory_length": float(log.trajectory_length),
    }


def _sample_impacts(attacked_logs, unattacked_logs) -> dict[str, dict[str, float]]:
    impacts: dict[str, dict[str, float]] = {}
    for prop in PROPERTIES:
        a = [numeric_properties(log)[prop] for log in attacked_logs]
        u = [numeric_properties(log)[prop] for log in unattacked_logs]
        impacts[prop] = {
            "difference": estimate_expected_impact(a, u, impact_difference),
            "indicator": estimate_expected_impact(a, u, impact_indicator),
        }
    return impacts


# ---------------------------------------------------------------------------
# Campaign
# ---------------------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(config, policy, epsilon, trials, seed):
    _WORKER.update(
        config=config, policy=policy, epsilon=epsilon, trials=trials, seed=seed
    )


def _evaluate_point(task):
    point, obs, snap = task
    config = _WORKER["config"]
    policy = _WORKER["policy"]
    adv = fgsm_targeted(
        policy, config, obs, point.target_action, point.index, _WORKER["epsilon"]
    )
    if not adv.sufficient:
        return point, adv, None
    attacked_logs, unattacked_logs = [], []
    steps = 0
    for trial in range(_WORKER["trials"]):
        # Trial 0 continues the snapshot's RNG stream (exact replay for the
        # unattacked branch in a deterministic episode); later trials reseed
        # both branches identically.
        seed = (
            None
            if trial == 0
            else [_WORKER["seed"], point.episode, point.step, point.index, trial]
        )
        alog, asteps = simulate_rollout(config, snap, policy, adv.induced_action, seed)
        ulog, usteps = simulate_rollout(config, snap, policy, adv.base_action, seed)
        attacked_logs.append(alog)
        unattacked_logs.append(ulog)
        steps += asteps + usteps
    sample = ImpactSample(
        point=point,
        base_action=adv.base_action,
        induced_action=adv.induced_action,
        perturbed_value=adv.perturbed_value,
        attacked_logs=attacked_logs,
        unattacked_logs=unattacked_logs,
        impacts=_sample_impacts(attacked_logs, unattacked_logs),
        rollout_steps=steps,
    )
    return point, adv, sample


def run_impact_campaign(
    dataset: Dataset,
    policy: FrozenPolicy,
    spec: AttackSpec,
    config: ScenarioConfig,
    sampling: SamplingPlan | None = None,
    trials_per_point: int = 1,
    seed: int = 0,
    workers: int = 1,
) -> tuple[list[ImpactSample], list[dict], CampaignReport]:
    """Attack every sampled point; roll out the sufficient ones.

    Returns (impact samples, one export row per generated attack, cost
    report).  The report's ``simulated_steps`` counts every environment step
    taken inside rollouts.
    """
    points = enumerate_attack_points(dataset, spec)
    report = CampaignReport(points_enumerated=len(points))
    if sampling is not None and sampling.per_stratum is not None:
        cap = dataset.records[0].snapshot.episode_cap if dataset.records else 50
        points = stratified_sample(
            points, strata_key(sampling, cap), sampling.per_stratum, seed
        )
    report.points_sampled = len(points)

    tasks = [
        (p, dataset.records[p.record_index].obs, dataset.records[p.record_index].snapshot)
        for p in points
    ]
    if workers > 1:
        with multiprocessing.Pool(
            workers,
            initializer=_init_worker,
            initargs=(config, policy, spec.epsilon, trials_per_point, seed),
        ) as pool:
            results = pool.map(_evaluate_point, tasks, chunksize=32)
    else:
        _init_worker(config, policy, spec.epsilon, trials_per_point, seed)
        results = [_evaluate_point(t) for t in tasks]

    samples: list[ImpactSample] = []
    attack_rows: list[dict] = []
    for point, adv, sample in results:
        report.attacks_generated += 1
        attack_rows.append(
            {
                "episode": point.episode,
                "step": point.step,
                "index": point.index,
                "target_action": list(point.target_action),
                "perturbed": adv.perturbed,
                "perturbed_value": adv.perturbed_value,
                "base_action": list(adv.base_action),
                "induced_action": list(adv.induced_action),
                "sufficient": adv.sufficient,
            }
        )
        if sample is not None:
            report.attacks_sufficient += 1
            report.rollouts += 2 * trials_per_point
            report.simulated_steps += sample.rollout_steps
            samples.append(sample)
    return samples, attack_rows, report


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def aggregate_impact(
    samples: list[ImpactSample],
    group_by: str = "index",
    property: str = "red_count",
    metric: str = "difference",
) -> list[ImpactAggregate]:
    """Mean impact per group, ranked descending; ties break by key order."""
    if group_by not in ("index", "step", "index_step"):
        raise ValueError(f"unknown group_by {group_by!r}")
    if property not in PROPERTIES:
        raise ValueError(f"unknown property {property!r}")
    groups: dict = {}
    for s in samples:
        if group_by == "index":
            key = s.point.index
        elif group_by == "step":
            key = s.point.step
        else:
            key = (s.point.index, s.point.step)
        groups.setdefault(key, []).append(s.impacts[property][metric])
    aggregates = [
        ImpactAggregate(key=key, mean=float(np.mean(vals)), count=len(vals))
        for key, vals in groups.items()
    ]
    aggregates.sort(key=lambda a: (-a.mean, _key_order(a.key)))
    return aggregates


def _key_order(key):
    return key if isinstance(key, tuple) else (key,)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

SAMPLES_SCHEMA = {"schema": "strikelab.impact_samples", "version": 1}
AGGREGATE_SCHEMA = {"schema": "strikelab.impact_aggregate", "version": 1}


def export_samples(path, samples: list[ImpactSample], report: CampaignReport) -> None:
    header = dict(SAMPLES_SCHEMA)
    header["report"] = {
        "points_enumerated": report.points_enumerated,
        "points_sampled": report.points_sampled,
        "attacks_generated": report.attacks_generated,
        "attacks_sufficient": report.attacks_sufficient,
        "rollouts": report.rollouts,
        "simulated_steps": report.simulated_steps,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in samples:
            fh.write(
                json.dumps(
                    {
                        "episode": s.point.episode,
                        "step": s.point.step,
                        "index": s.point.index,
                        "record_index": s.point.record_index,
                        "target_action": list(s.point.target_action),
                        "base_action": list(s.base_action),
                        "induced_action": list(s.induced_action),
                        "perturbed_value": s.perturbed_value,
                        "attacked": [log.to_dict() for log in s.attacked_logs],
                        "unattacked": [log.to_dict() for log in s.unattacked_logs],
                        "impacts": s.impacts,
                        "rollout_steps": s.rollout_steps,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_samples(path) -> tuple[list[ImpactSample], dict]:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != SAMPLES_SCHEMA["schema"]:
            raise ValueError(f"{path}: not an impact-sample table")
        samples = []
        for line in fh:
            d = json.loads(line)
            samples.append(
                ImpactSample(
                    point=AttackPoint(
                        record_index=d["record_index"],
                        episode=d["episode"],
                        step=d["step"],
                        index=d["index"],
                        target_action=tuple(d["target_action"]),
                    ),
                    base_action=tuple(d["base_action"]),
                    induced_action=tuple(d["induced_action"]),
                    perturbed_value=d["perturbed_value"],
                    attacked_logs=[PropertyLog.from_dict(x) for x in d["attacked"]],
                    unattacked_logs=[PropertyLog.from_dict(x) for x in d["unattacked"]],
                    impacts=d["impacts"],
                    rollout_steps=d["rollout_steps"],
                )
            )
    return samples, header.get("report", {})


def export_aggregates(path, aggregates: list[ImpactAggregate], group_by, property, metric) -> None:
    header = dict(AGGREGATE_SCHEMA)
    header.update({"group_by": group_by, "property": property, "metric": metric})
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for a in aggregates:
            key = list(a.key) if isinstance(a.key, tuple) else a.key
            fh.write(
                json.dumps(
                    {"key": key, "mean": a.mean, "count": a.count}, sort_keys=True
                )
                + "\n"
            )
