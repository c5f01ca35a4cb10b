"""CyberStrike: a turn-based network-defense game.

A blue team of hackers (plus one eavesdropper) dismantles a red defense
network to compromise a designated target node.  Red behavior is a fixed
counter rule: hacking a node that still has an alive, uncompromised defender
kills the attacking blue asset.  The defense network starts fully unknown to
blue; the eavesdropper reveals one node's defender column per use.

The module is deliberately functional: ``reset``/``step`` operate on an
explicit :class:`EnvState`, and ``snapshot``/``restore`` produce bit-identical
copies (including the RNG stream) so episodes can be branched from any step.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

# Observation encoding of a defense-matrix entry.
OBS_UNKNOWN = -1.0
OBS_NOT_DEFENDS = 0.0
OBS_DEFENDS = 1.0

# Blue asset type that eavesdrops instead of hacking.
EAVESDROP_TYPE = 3

DEFAULT_EPISODE_CAP = 50
WIN_BONUS = 100.0
LOSS_PENALTY = 100.0

WIN = "win"
LOSS = "loss"
UNDECIDED = "undecided"


class ScenarioError(ValueError):
    """Raised for scenario parse failures, dangling ADR references, and
    invariant violations (the message states which)."""


@dataclass(frozen=True)
class AdrVariable:
    """A per-episode randomized effect probability, sampled from a truncated
    normal at reset time."""

    id: str
    mean: float
    stdev: float
    minimum: float
    maximum: float

    def validate(self) -> None:
        if not (self.minimum <= self.mean <= self.maximum):
            raise ScenarioError(
                f"invariant violation: ADR variable {self.id!r} requires "
                f"minimum <= mean <= maximum, got "
                f"({self.minimum}, {self.mean}, {self.maximum})"
            )
        if self.stdev < 0:
            raise ScenarioError(
                f"invariant violation: ADR variable {self.id!r} has negative stdev"
            )


@dataclass(frozen=True)
class RedAsset:
    is_target: bool
    type: int
    is_alive: bool = True


@dataclass(frozen=True)
class BlueAsset:
    type: int
    loss_cost: float
    use_cost: float
    is_alive: bool = True


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated CyberStrike scenario.

    ``effect_probability`` is a square matrix indexed [actor type][target
    type]; entries are literal probabilities or ADR-variable id strings that
    get resolved once per episode at reset.
    """

    red_assets: tuple[RedAsset, ...]
    defense_network: tuple[tuple[int, ...], ...]
    blue_assets: tuple[BlueAsset, ...]
    effect_probability: tuple[tuple[object, ...], ...]
    adr_variables: tuple[AdrVariable, ...]

    @property
    def num_red(self) -> int:
        return len(self.red_assets)

    @property
    def num_blue(self) -> int:
        return len(self.blue_assets)

    @property
    def target_index(self) -> int:
        return next(i for i, a in enumerate(self.red_assets) if a.is_target)

    @property
    def obs_length(self) -> int:
        return 3 * (self.num_blue + self.num_red) + self.num_red**2

    def defenders_of(self, node: int) -> tuple[int, ...]:
        return self.defense_network[node]

    def hack_capable_indices(self) -> tuple[int, ...]:
        """Blue assets that hack (everything but the eavesdropper type)."""
        return tuple(
            i for i, a in enumerate(self.blue_assets) if a.type != EAVESDROP_TYPE
        )

    def adr_by_id(self) -> dict[str, AdrVariable]:
        return {v.id: v for v in self.adr_variables}

    def scenario_hash(self) -> str:
        """Stable content hash used to key datasets to their scenario."""
        blob = json.dumps(
            {
                "red": [[a.is_target, a.type, a.is_alive] for a in self.red_assets],
                "defense": [list(d) for d in self.defense_network],
                "blue": [
                    [a.type, a.loss_cost, a.use_cost, a.is_alive]
                    for a in self.blue_assets
                ],
                "effects": [list(r) for r in self.effect_probability],
                "adr": [
                    [v.id, v.mean, v.stdev, v.minimum, v.maximum]
                    for v in self.adr_variables
                ],
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class CurriculumLevel:
    """One difficulty level: per-ADR-variable stdev overrides.

    Variables absent from ``stdevs`` are not randomized at this level (their
    effect probability resolves to the variable's mean).
    """

    index: int = 0
    stdevs: dict[str, float] = field(default_factory=dict)

    def stdev_for(self, var_id: str) -> float:
        return self.stdevs.get(var_id, 0.0)


DETERMINISTIC_LEVEL = CurriculumLevel(index=0, stdevs={})


@dataclass
class PropertyLog:
    """End-of-episode measurables, tracked stepwise."""

    win: str = UNDECIDED
    red_count: int = 0
    blue_count: int = 0
    trajectory_length: int = 0

    def to_dict(self) -> dict:
        return {
            "win": self.win,
            "red_count": self.red_count,
            "blue_count": self.blue_count,
            "trajectory_length": self.trajectory_length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PropertyLog":
        return cls(
            win=d["win"],
            red_count=int(d["red_count"]),
            blue_count=int(d["blue_count"]),
            trajectory_length=int(d["trajectory_length"]),
        )


@dataclass
class EnvState:
    """Mutable episode state (the true game state plus hidden info)."""

    red_alive: np.ndarray
    red_compromised: np.ndarray
    blue_alive: np.ndarray
    observed_defense: np.ndarray  # (num_red, num_red) of {-1, 0, 1}
    step_count: int
    cumulative_reward: float
    property_log: PropertyLog
    resolved_effects: np.ndarray  # (T, T) sampled probabilities
    rng: np.random.Generator
    episode_cap: int = DEFAULT_EPISODE_CAP
    done: bool = False


@dataclass(frozen=True)
class EnvSnapshot:
    """Immutable copy of an :class:`EnvState`; safe to share across workers."""

    red_alive: tuple[bool, ...]
    red_compromised: tuple[bool, ...]
    blue_alive: tuple[bool, ...]
    observed_defense: tuple[float, ...]
    num_red: int
    step_count: int
    cumulative_reward: float
    property_log: tuple
    resolved_effects: tuple[float, ...]
    effects_side: int
    rng_state: str  # JSON of the generator state
    episode_cap: int
    done: bool


# ---------------------------------------------------------------------------
# Scenario loading
# ---------------------------------------------------------------------------


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ScenarioError(message)


def load_scenario(config_text: str) -> ScenarioConfig:
    """Parse and validate a scenario from YAML text.

    Raises :class:`ScenarioError` with a distinct diagnostic for parse
    failures, dangling ADR references, and invariant violations.
    """
    try:
        raw = yaml.safe_load(config_text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"parse failure: {exc}") from exc
    if not isinstance(raw, dict):
        raise ScenarioError("parse failure: top level is not a mapping")

    try:
        adr_raw = raw.get("adr_variables", []) or []
        adr_vars = []
        for entry in adr_raw:
            params = entry.get("parameters", {})
            adr_vars.append(
                AdrVariable(
                    id=str(entry["id"]),
                    mean=float(params["mean"]),
                    stdev=float(params["stdev"]),
                    minimum=float(params["minimum"]),
                    maximum=float(params["maximum"]),
                )
            )
        scenario = raw["scenario"]
        red_raw = scenario["red"]["assets"]
        reds = tuple(
            RedAsset(
                is_target=bool(a.get("is_target", False)),
                type=int(a.get("type", 0)),
                is_alive=bool(a.get("is_alive", True)),
            )
            for a in red_raw
        )
        defense = tuple(
            tuple(int(d) for d in row) for row in scenario["red"]["defense_network"]
        )
        blues = tuple(
            BlueAsset(
                type=int(a["type"]),
                loss_cost=float(a.get("loss_cost", 0.0)),
                use_cost=float(a.get("use_cost", 0.0)),
                is_alive=bool(a.get("is_alive", True)),
            )
            for a in scenario["blue"]["assets"]
        )
        effects = tuple(
            tuple(cell for cell in row) for row in raw["effect_probability"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"parse failure: {exc!r}") from exc

    for v in adr_vars:
        v.validate()

    num_red = len(reds)
    _require(num_red > 0, "invariant violation: no red assets")
    _require(len(blues) > 0, "invariant violation: no blue assets")
    targets = [i for i, a in enumerate(reds) if a.is_target]
    _require(
        len(targets) == 1,
        f"invariant violation: exactly one red asset must be the target, got {len(targets)}",
    )
    _require(
        len(defense) == num_red,
        f"invariant violation: defense_network has {len(defense)} rows for {num_red} red assets",
    )
    for node, defenders in enumerate(defense):
        for d in defenders:
            _require(
                0 <= d < num_red,
                f"invariant violation: node {node} lists defender {d}, "
                f"valid red indices are 0..{num_red - 1}",
            )
            _require(
                d != node,
                f"invariant violation: node {node} defends itself",
            )

    max_type = max(
        [a.type for a in reds] + [a.type for a in blues]
    )
    side = max_type + 1
    _require(
        len(effects) == side and all(len(r) == side for r in effects),
        f"invariant violation: effect_probability must be {side}x{side} "
        f"(max type id + 1)",
    )
    known_ids = {v.id for v in adr_vars}
    for i, row in enumerate(effects):
        for j, cell in enumerate(row):
            if isinstance(cell, str):
                if cell not in known_ids:
                    raise ScenarioError(
                        f"dangling ADR reference: effect_probability[{i}][{j}] "
                        f"names {cell!r} which is not declared"
                    )
            else:
                p = float(cell)
                _require(
                    0.0 <= p <= 1.0,
                    f"invariant violation: effect_probability[{i}][{j}] = {p} "
                    f"is outside [0, 1]",
                )

    return ScenarioConfig(
        red_assets=reds,
        defense_network=defense,
        blue_assets=blues,
        effect_probability=effects,
        adr_variables=tuple(adr_vars),
    )


def load_scenario_file(path) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return load_scenario(fh.read())


def load_bundled_scenario(name: str = "cyberstrike_8x4") -> ScenarioConfig:
    """Load a scenario shipped with the package (default: 8 red / 4 blue)."""
    from importlib import resources

    text = resources.files("strikelab").joinpath(f"scenarios/{name}.yaml").read_text()
    return load_scenario(text)


# ---------------------------------------------------------------------------
# ADR sampling and reset
# ---------------------------------------------------------------------------


def sample_adr(
    var: AdrVariable, rng: np.random.Generator, stdev: float | None = None
) -> float:
    """Draw one effect probability from the variable's truncated normal.

    Sampling is by rejection: normal(mean, stdev) draws are discarded until
    one lands in [minimum, maximum].  ``stdev`` overrides the variable's
    declared value (a curriculum hook); zero returns the mean exactly.
    """
    sd = var.stdev if stdev is None else stdev
    if sd < 0:
        raise ValueError(f"stdev must be >= 0, got {sd}")
    if sd == 0:
        return var.mean
    while True:
        x = rng.normal(var.mean, sd)
        if var.minimum <= x <= var.maximum:
            return float(x)


def _resolve_effects(
    config: ScenarioConfig, level: CurriculumLevel, rng: np.random.Generator
) -> np.ndarray:
    by_id = config.adr_by_id()
    # One draw per declared variable, in declaration order, so that every
    # matrix cell referencing the same variable shares the episode's sample.
    drawn = {
        v.id: sample_adr(v, rng, stdev=level.stdev_for(v.id))
        for v in config.adr_variables
    }
    side = len(config.effect_probability)
    out = np.zeros((side, side), dtype=np.float64)
    for i, row in enumerate(config.effect_probability):
        for j, cell in enumerate(row):
            out[i, j] = drawn[cell] if isinstance(cell, str) else float(cell)
    return out


def reset(
    config: ScenarioConfig,
    seed: int,
    level: CurriculumLevel | None = None,
    episode_cap: int = DEFAULT_EPISODE_CAP,
) -> tuple[EnvState, np.ndarray]:
    """Start an episode: fully unknown defense network, fresh RNG stream,
    effect probabilities sampled once per the level's ADR settings."""
    if level is None:
        level = DETERMINISTIC_LEVEL
    rng = np.random.default_rng(seed)
    nr = config.num_red
    state = EnvState(
        red_alive=np.array([a.is_alive for a in config.red_assets], dtype=bool),
        red_compromised=np.zeros(nr, dtype=bool),
        blue_alive=np.array([a.is_alive for a in config.blue_assets], dtype=bool),
        observed_defense=np.full((nr, nr), OBS_UNKNOWN, dtype=np.float64),
        step_count=0,
        cumulative_reward=0.0,
        property_log=PropertyLog(),
        resolved_effects=_resolve_effects(config, level, rng),
        rng=rng,
        episode_cap=episode_cap,
        done=False,
    )
    _update_property_log(config, state)
    return state, encode_observation(config, state)


def _update_property_log(config: ScenarioConfig, state: EnvState) -> None:
    state.property_log.red_count = int(state.red_alive.sum())
    state.property_log.blue_count = int(state.blue_alive.sum())
    state.property_log.trajectory_length = state.step_count


# ---------------------------------------------------------------------------
# Observation and action spaces
# ---------------------------------------------------------------------------


def encode_observation(config: ScenarioConfig, state: EnvState) -> np.ndarray:
    """Flatten blue's view of the game into a fixed-length vector.

    Layout: per blue asset [alive, type, 0 pad], per red asset [alive as
    observed, type, is_target], then the row-major observed-defense matrix
    (-1 unknown, 0 known-not-defends, 1 known-defends).
    """
    nb, nr = config.num_blue, config.num_red
    obs = np.empty(config.obs_length, dtype=np.float64)
    for i, asset in enumerate(config.blue_assets):
        obs[3 * i] = 1.0 if state.blue_alive[i] else 0.0
        obs[3 * i + 1] = float(asset.type)
        obs[3 * i + 2] = 0.0
    base = 3 * nb
    for j, asset in enumerate(config.red_assets):
        obs[base + 3 * j] = 1.0 if state.red_alive[j] else 0.0
        obs[base + 3 * j + 1] = float(asset.type)
        obs[base + 3 * j + 2] = 1.0 if asset.is_target else 0.0
    obs[3 * (nb + nr) :] = state.observed_defense.reshape(-1)
    return obs


def action_cardinalities(config: ScenarioConfig) -> list[int]:
    """One sub-action per blue asset: no-op or one of ``num_red`` targets."""
    return [config.num_red + 1] * config.num_blue


def defense_slot_index(config: ScenarioConfig, defender: int, defended: int) -> int:
    """Flat observation index of the entry 'does `defender` defend `defended`'."""
    return 3 * (config.num_blue + config.num_red) + defender * config.num_red + defended


# ---------------------------------------------------------------------------
# Step dynamics
# ---------------------------------------------------------------------------


def _has_live_defender(config: ScenarioConfig, state: EnvState, node: int) -> bool:
    return any(
        state.red_alive[d] and not state.red_compromised[d]
        for d in config.defenders_of(node)
    )


def step(
    config: ScenarioConfig, state: EnvState, action
) -> tuple[EnvState, np.ndarray, float, bool, PropertyLog]:
    """Advance one turn.  Blue assets resolve in index order within the turn,
    so a defender compromised by an earlier asset no longer counters a later
    one.  Mutates ``state`` and returns it.

    Per-turn reward is minus the use costs of every non-no-op sub-action of
    an alive asset, minus the loss cost of each asset countered this turn,
    plus a +/-100 terminal bonus.
    """
    if state.done:
        raise RuntimeError("step() called on a finished episode")
    action = tuple(int(a) for a in action)
    if len(action) != config.num_blue:
        raise ValueError(
            f"action has {len(action)} sub-actions for {config.num_blue} blue assets"
        )
    nr = config.num_red
    for a in action:
        if not (0 <= a <= nr):
            raise ValueError(f"sub-action {a} out of range 0..{nr}")

    reward = 0.0
    for b, sub in enumerate(action):
        if sub == 0 or not state.blue_alive[b]:
            continue
        asset = config.blue_assets[b]
        target = sub - 1
        reward -= asset.use_cost
        if asset.type == EAVESDROP_TYPE:
            # Reveal the full defender column of the targeted node: both who
            # defends it and who does not.
            col = np.full(nr, OBS_NOT_DEFENDS)
            for d in config.defenders_of(target):
                col[d] = OBS_DEFENDS
            state.observed_defense[:, target] = col
        else:
            if _has_live_defender(config, state, target):
                state.blue_alive[b] = False
                reward -= asset.loss_cost
            elif state.red_alive[target] and not state.red_compromised[target]:
                p = state.resolved_effects[asset.type][config.red_assets[target].type]
                if p >= 1.0 or state.rng.random() < p:
                    state.red_compromised[target] = True
                    state.red_alive[target] = False
            # Hacking an already-compromised node whose defenders are gone is
            # a wasted (but safe) move.

    state.step_count += 1
    log = state.property_log
    target_down = state.red_compromised[config.target_index]
    hackers = config.hack_capable_indices()
    hackers_all_dead = not any(state.blue_alive[i] for i in hackers)
    if target_down:
        log.win = WIN
        reward += WIN_BONUS
        state.done = True
    elif hackers_all_dead or state.step_count >= state.episode_cap:
        log.win = LOSS
        reward -= LOSS_PENALTY
        state.done = True
    _update_property_log(config, state)
    state.cumulative_reward += reward
    return state, encode_observation(config, state), reward, state.done, copy.copy(log)


# ---------------------------------------------------------------------------
# Snapshot / restore
# ---------------------------------------------------------------------------


def snapshot(state: EnvState) -> EnvSnapshot:
    nr = state.observed_defense.shape[0]
    log = state.property_log
    return EnvSnapshot(
        red_alive=tuple(bool(x) for x in state.red_alive),
        red_compromised=tuple(bool(x) for x in state.red_compromised),
        blue_alive=tuple(bool(x) for x in state.blue_alive),
        observed_defense=tuple(float(x) for x in state.observed_defense.reshape(-1)),
        num_red=nr,
        step_count=state.step_count,
        cumulative_reward=state.cumulative_reward,
        property_log=(log.win, log.red_count, log.blue_count, log.trajectory_length),
        resolved_effects=tuple(float(x) for x in state.resolved_effects.reshape(-1)),
        effects_side=state.resolved_effects.shape[0],
        rng_state=json.dumps(state.rng.bit_generator.state, sort_keys=True),
        episode_cap=state.episode_cap,
        done=state.done,
    )


def restore(snap: EnvSnapshot) -> EnvState:
    nr = snap.num_red
    side = snap.effects_side
    rng = np.random.default_rng(0)
    rng.bit_generator.state = json.loads(snap.rng_state)
    win, red_count, blue_count, traj = snap.property_log
    return EnvState(
        red_alive=np.array(snap.red_alive, dtype=bool),
        red_compromised=np.array(snap.red_compromised, dtype=bool),
        blue_alive=np.array(snap.blue_alive, dtype=bool),
        observed_defense=np.array(snap.observed_defense, dtype=np.float64).reshape(
            nr, nr
        ),
        step_count=snap.step_count,
        cumulative_reward=snap.cumulative_reward,
        property_log=PropertyLog(win, red_count, blue_count, traj),
        resolved_effects=np.array(snap.resolved_effects, dtype=np.float64).reshape(
            side, side
        ),
        rng=rng,
        episode_cap=snap.episode_cap,
        done=snap.done,
    )


# ---------------------------------------------------------------------------
# Observation slot metadata
# ---------------------------------------------------------------------------


def slot_kind(config: ScenarioConfig, index: int) -> tuple[str, object]:
    """Classify an observation index: what game quantity lives there."""
    nb, nr = config.num_blue, config.num_red
    if index < 0 or index >= config.obs_length:
        raise IndexError(f"observation index {index} out of range")
    if index < 3 * nb:
        asset, slot = divmod(index, 3)
        return (("blue_alive", "blue_type", "pad")[slot], asset)
    index -= 3 * nb
    if index < 3 * nr:
        node, slot = divmod(index, 3)
        return (("red_alive", "red_type", "red_is_target")[slot], node)
    index -= 3 * nr
    return ("defense", divmod(index, nr))


def slot_label(config: ScenarioConfig, index: int) -> str:
    """Human-readable name for an observation index (e.g. ``odn32`` for the
    observed-defense entry 'node 3 defends node 2')."""
    kind, ref = slot_kind(config, index)
    if kind == "defense":
        i, j = ref
        return f"odn{i}{j}" if config.num_red <= 10 else f"odn{i}:{j}"
    return f"{kind}{ref}"


# ---------------------------------------------------------------------------
# Scripted optimal strategy
# ---------------------------------------------------------------------------


class ScriptedOptimalPolicy:
    """Observation-driven reference strategy: eavesdrop column by column,
    hack any node whose revealed defenders are all compromised, working
    inward until the target falls."""

    def __init__(self, config: ScenarioConfig):
        self.config = config

    def action(self, obs: np.ndarray) -> tuple[int, ...]:
        cfg = self.config
        nb, nr = cfg.num_blue, cfg.num_red
        blue_alive = [obs[3 * i] > 0.5 for i in range(nb)]
        base = 3 * nb
        red_alive = [obs[base + 3 * j] > 0.5 for j in range(nr)]
        matrix = obs[3 * (nb + nr) :].reshape(nr, nr)

        # A node is provably safe to hack when its full defender column is
        # known and every defender is already down.
        safe = []
        for j in range(nr):
            if not red_alive[j]:
                continue
            col = matrix[:, j]
            if np.any(col == OBS_UNKNOWN):
                continue
            defenders = np.nonzero(col == OBS_DEFENDS)[0]
            if all(not red_alive[d] for d in defenders):
                safe.append(j)

        unknown_cols = [
            j for j in range(nr) if red_alive[j] and np.any(matrix[:, j] == OBS_UNKNOWN)
        ]

        action = [0] * nb
        free_targets = list(safe)
        for b in range(nb):
            if not blue_alive[b]:
                continue
            if cfg.blue_assets[b].type == EAVESDROP_TYPE:
                if unknown_cols:
                    action[b] = unknown_cols.pop(0) + 1
            elif free_targets:
                action[b] = free_targets.pop(0) + 1
        return tuple(action)


# ---------------------------------------------------------------------------
# Trajectory export
# ---------------------------------------------------------------------------

TRAJECTORY_SCHEMA = {"schema": "strikelab.trajectory", "version": 1}


def export_trajectory(path, rows: list[dict]) -> None:
    """Write line-delimited trajectory records with a versioned header.

    Each row carries: episode_id, step, obs, action, reward, done, property
    snapshot.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(TRAJECTORY_SCHEMA, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def trajectory_row(
    episode_id: int,
    step_index: int,
    obs: np.ndarray,
    action,
    reward: float,
    done: bool,
    log: PropertyLog,
) -> dict:
    return {
        "episode_id": episode_id,
        "step": step_index,
        "obs": [float(x) for x in obs],
        "action": [int(a) for a in action],
        "reward": float(reward),
        "done": bool(done),
        "properties": log.to_dict(),
    }
