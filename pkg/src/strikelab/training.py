"""DQN and A2C training over CyberStrike with curriculum / domain
randomization lesson plans.

Both trainers share the same skeleton: episodes run on one environment
instance, a trailing-100-episode win-rate window gates curriculum
advancement (>= 90% advances one level), and training succeeds when the
gate passes on the lesson's final level.

Learning signal: the environment's reward plus a potential-based shaping
term proportional to the number of compromised red nodes.  The raw reward
(use/loss costs plus the terminal bonus) gives almost no gradient toward the
multi-step hack chain, so exploration never finds a first win; the
potential term is telescoping and leaves the optimal policy unchanged.
Frozen policies, property logs, and every analysis stage see only
environment rewards.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import env as cyber
from .env import CurriculumLevel, ScenarioConfig, WIN
from .nn import (
    HIDDEN_DIM,
    MlpNet,
    backward,
    forward,
    init_adam,
    init_net,
    adam_step,
    segment_bounds,
    softmax,
)
from .policies import FrozenPolicy, output_to_action

WIN_RATE_WINDOW = 100
WIN_RATE_GATE = 0.90
# Re-run the greedy confirmation at most once per this many episodes while
# the training window stays above the gate.
CONFIRM_INTERVAL = 25


@dataclass
class DqnHyper:
    gamma: float = 0.99
    learning_rate: float = 3e-4
    clip_norm: float = 10.0
    epsilon_start: float = 1.0
    epsilon_decay: float = 0.99
    epsilon_min: float = 0.01
    replay_capacity: int = 50_000
    batch_size: int = 64
    replay_ratio: int = 4          # learner updates per environment-step batch
    steps_per_batch: int = 4       # environment steps per batch
    target_tau: float = 0.05
    target_interval: int = 250     # learner updates between soft target updates
    min_buffer: int = 500
    shaping_coef: float = 50.0
    max_steps_per_level: int = 300_000
    hidden_dim: int = HIDDEN_DIM

    def __post_init__(self):
        if self.epsilon_min > self.epsilon_start:
            raise ValueError("epsilon_min must be <= epsilon_start")
        for name in ("gamma", "learning_rate", "clip_norm", "epsilon_start",
                     "epsilon_decay", "replay_capacity", "batch_size",
                     "replay_ratio", "steps_per_batch", "target_tau",
                     "target_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class A2cHyper:
    gamma: float = 0.99
    actor_lr: float = 1.5e-4
    critic_lr: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    clip_norm: float = 10.0
    segment_length: int = 16
    # Segments whose gradients are averaged into one optimizer step; a
    # single-environment substitute for the variance reduction that parallel
    # rollout workers would provide.
    segments_per_update: int = 8
    normalize_advantage: bool = True
    shaping_coef: float = 50.0
    max_steps_per_level: int = 300_000
    hidden_dim: int = HIDDEN_DIM

    def __post_init__(self):
        for name in ("gamma", "actor_lr", "critic_lr", "value_coef",
                     "entropy_coef", "clip_norm", "segment_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainingLog:
    """Per-episode rows plus run-level accounting."""

    rows: list[dict] = field(default_factory=list)
    env_steps: int = 0
    learner_updates: int = 0
    batches_consumed: int = 0
    success: bool = False
    final_level: int = 0

    def episode_row(self, episode, ret, win, level, epsilon=None) -> None:
        self.rows.append(
            {
                "episode": episode,
                "return": float(ret),
                "win": bool(win),
                "level": int(level),
                "epsilon": None if epsilon is None else float(epsilon),
            }
        )

    def export_jsonl(self, path) -> None:
        import json

        with open(path, "w", encoding="utf-8") as fh:
            fh.write(
                json.dumps(
                    {"schema": "strikelab.training_log", "version": 1,
                     "env_steps": self.env_steps, "success": self.success,
                     "final_level": self.final_level},
                    sort_keys=True,
                )
                + "\n"
            )
            for row in self.rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Lesson plans
# ---------------------------------------------------------------------------


def lesson_deterministic() -> list[CurriculumLevel]:
    """Single fully deterministic level."""
    return [CurriculumLevel(0, {})]


def lesson_full_randomization(config: ScenarioConfig) -> list[CurriculumLevel]:
    """Single level with every variable randomized at stdev 1.0."""
    return [CurriculumLevel(0, {v.id: 1.0 for v in config.adr_variables})]


def lesson_stdev_ladder(config: ScenarioConfig) -> list[CurriculumLevel]:
    """All variables together, stdev 0 -> 0.25 -> 0.5 -> 0.75 -> 1.0."""
    return [
        CurriculumLevel(i, {v.id: sd for v in config.adr_variables} if sd else {})
        for i, sd in enumerate((0.0, 0.25, 0.5, 0.75, 1.0))
    ]


def lesson_variable_adding(config: ScenarioConfig) -> list[CurriculumLevel]:
    """Start deterministic; each level randomizes one more variable at 1.0."""
    ids = [v.id for v in config.adr_variables]
    return [
        CurriculumLevel(k, {vid: 1.0 for vid in ids[:k]})
        for k in range(len(ids) + 1)
    ]


def advance_curriculum(
    outcomes, lesson: list[CurriculumLevel], current: int
) -> tuple[int, bool]:
    """Gate check on the trailing window of episode outcomes for the current
    level.  Returns (level index, training complete).  Advances exactly one
    level per call and never regresses; completion means the gate passed on
    the final level.
    """
    window = list(outcomes)[-WIN_RATE_WINDOW:]
    if len(window) < WIN_RATE_WINDOW:
        return current, False
    if sum(window) / len(window) < WIN_RATE_GATE:
        return current, False
    if current >= len(lesson) - 1:
        return current, True
    return current + 1, False


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _shaped(reward, log_before, log_after, gamma, coef):
    # Potential = coef * (# compromised red nodes); telescoping shaping.
    phi_before = coef * -log_before.red_count
    phi_after = coef * -log_after.red_count
    return reward + gamma * phi_after - phi_before


def _random_action(cardinalities, rng) -> tuple[int, ...]:
    return tuple(int(rng.integers(0, c)) for c in cardinalities)


def _episode_seed(seed: int, episode: int) -> list[int]:
    return [int(seed), 0x5EED, int(episode)]


class _GateKeeper:
    """Curriculum gate: the trailing training-episode window must clear the
    win-rate bar, and the frozen (argmax) policy must confirm it on fresh
    greedy evaluation episodes.  The confirmation matters for A2C, where
    sampled-action win rates can run far ahead of the argmax policy."""

    def __init__(self, config, cards, lesson, seed, episodes=WIN_RATE_WINDOW):
        self.config = config
        self.cards = cards
        self.lesson = lesson
        self.seed = seed
        self.episodes = episodes
        self.eval_steps = 0
        self._last_confirm_episode = -(10**9)

    def check(self, net, outcomes, level_idx, episode):
        """Returns (new_level, complete)."""
        new_level, complete = advance_curriculum(outcomes, self.lesson, level_idx)
        if new_level == level_idx and not complete:
            return level_idx, False
        if episode - self._last_confirm_episode < CONFIRM_INTERVAL:
            return level_idx, False
        self._last_confirm_episode = episode
        if self._greedy_rate(net, level_idx) >= WIN_RATE_GATE:
            return new_level, complete
        return level_idx, False

    def _greedy_rate(self, net, level_idx):
        wins = 0
        for e in range(self.episodes):
            state, obs = cyber.reset(
                self.config, [self.seed, 0xE7A1, level_idx, e],
                level=self.lesson[level_idx],
            )
            done = False
            while not done:
                action = output_to_action(forward(net, obs).output, self.cards)
                state, obs, _r, done, plog = cyber.step(self.config, state, action)
                self.eval_steps += 1
            wins += plog.win == WIN
        return wins / self.episodes


# ---------------------------------------------------------------------------
# DQN
# ---------------------------------------------------------------------------


class _Replay:
    def __init__(self, capacity, obs_dim, n_sub):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, n_sub), dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.size = 0
        self.pos = 0

    def push(self, obs, action, reward, next_obs, done):
        i = self.pos
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.dones[i] = 1.0 if done else 0.0
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch, rng):
        idx = rng.integers(0, self.size, size=batch)
        return (
            self.obs[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_obs[idx],
            self.dones[idx],
        )


def _factored_q(output, actions, bounds):
    """Mean of the chosen-segment values per row (the factored action value)."""
    q = np.zeros(output.shape[0])
    for k, (a, _b) in enumerate(bounds):
        q += output[np.arange(output.shape[0]), a + actions[:, k]]
    return q / len(bounds)


def _max_q(output, bounds):
    q = np.zeros(output.shape[0])
    for a, b in bounds:
        q += output[:, a:b].max(axis=1)
    return q / len(bounds)


def soft_update(target: MlpNet, online: MlpNet, tau: float) -> None:
    for name, p in target.params().items():
        p *= 1.0 - tau
        p += tau * online.params()[name]


def train_dqn(
    config: ScenarioConfig,
    hyper: DqnHyper | None = None,
    lesson: list[CurriculumLevel] | None = None,
    seed: int = 0,
) -> tuple[FrozenPolicy, TrainingLog]:
    """Deep Q-learning with replay, a soft-updated target network, factored
    per-segment heads, and per-episode epsilon decay."""
    hyper = hyper or DqnHyper()
    lesson = lesson or lesson_deterministic()
    cards = tuple(cyber.action_cardinalities(config))
    bounds = segment_bounds(cards)
    obs_dim = config.obs_length

    net = init_net(obs_dim, sum(cards), hyper.hidden_dim, "relu", seed=seed)
    target = net.copy()
    opt = init_adam(net, hyper.learning_rate, hyper.clip_norm)
    replay = _Replay(hyper.replay_capacity, obs_dim, len(cards))
    rng = np.random.default_rng([seed, 0xD06])

    log = TrainingLog()
    gate = _GateKeeper(config, cards, lesson, seed)
    level_idx = 0
    outcomes: deque = deque(maxlen=WIN_RATE_WINDOW)
    epsilon = hyper.epsilon_start
    episode = 0
    steps_this_level = 0
    best_rate, best_net, best_level = -1.0, net.copy(), 0
    complete = False

    while not complete:
        state, obs = cyber.reset(
            config, _episode_seed(seed, episode), level=lesson[level_idx]
        )
        ep_return = 0.0
        prev_log = state.property_log
        done = False
        while not done:
            if rng.random() < epsilon:
                action = _random_action(cards, rng)
            else:
                action = output_to_action(forward(net, obs).output, cards)
            before = cyber.PropertyLog(**prev_log.to_dict())
            state, next_obs, reward, done, plog = cyber.step(config, state, action)
            shaped = _shaped(reward, before, plog, hyper.gamma, hyper.shaping_coef)
            replay.push(obs, action, shaped, next_obs, done)
            obs = next_obs
            prev_log = plog
            ep_return += reward
            log.env_steps += 1
            steps_this_level += 1

            if (
                replay.size >= max(hyper.min_buffer, hyper.batch_size)
                and log.env_steps % hyper.steps_per_batch == 0
            ):
                log.batches_consumed += 1
                for _ in range(hyper.replay_ratio):
                    _dqn_update(net, target, opt, replay, hyper, bounds, rng)
                    log.learner_updates += 1
                    if log.learner_updates % hyper.target_interval == 0:
                        soft_update(target, net, hyper.target_tau)

        win = plog.win == WIN
        outcomes.append(win)
        log.episode_row(episode, ep_return, win, level_idx, epsilon)
        epsilon = max(hyper.epsilon_min, epsilon * hyper.epsilon_decay)
        episode += 1

        if len(outcomes) == WIN_RATE_WINDOW:
            rate = sum(outcomes) / len(outcomes)
            if level_idx > best_level or (level_idx == best_level and rate > best_rate):
                best_rate, best_net, best_level = rate, net.copy(), level_idx
        new_level, complete = gate.check(net, outcomes, level_idx, episode)
        if new_level != level_idx:
            level_idx = new_level
            outcomes.clear()
            steps_this_level = 0
        if not complete and steps_this_level >= hyper.max_steps_per_level:
            break

    log.success = complete
    log.final_level = level_idx
    chosen = net if complete else best_net
    policy = FrozenPolicy(
        net=chosen,
        algorithm="dqn",
        curriculum=f"lesson[{len(lesson)}]",
        cardinalities=cards,
        seed=seed,
        metadata={
            "success": complete,
            "env_steps": log.env_steps,
            "final_level": log.final_level,
            "levels": [lvl.stdevs for lvl in lesson],
        },
    )
    return policy, log


def _dqn_update(net, target, opt, replay, hyper, bounds, rng):
    obs, actions, rewards, next_obs, dones = replay.sample(hyper.batch_size, rng)
    next_q = _max_q(forward(target, next_obs).output, bounds)
    y = rewards + hyper.gamma * (1.0 - dones) * next_q
    trace = forward(net, obs)
    q = _factored_q(trace.output, actions, bounds)
    # MSE on the factored value; each chosen head gets 1/K of the error.
    err = 2.0 * (q - y) / (hyper.batch_size * len(bounds))
    dout = np.zeros_like(trace.output)
    rows = np.arange(hyper.batch_size)
    for k, (a, _b) in enumerate(bounds):
        dout[rows, a + actions[:, k]] += err
    grads, _ = backward(net, trace, dout)
    adam_step(net, grads, opt)


# ---------------------------------------------------------------------------
# A2C
# ---------------------------------------------------------------------------


def _sample_factored(logits, bounds, rng):
    action = []
    for a, b in bounds:
        p = softmax(logits[a:b])
        action.append(int(rng.choice(b - a, p=p)))
    return tuple(action)


def train_a2c(
    config: ScenarioConfig,
    hyper: A2cHyper | None = None,
    lesson: list[CurriculumLevel] | None = None,
    seed: int = 0,
) -> tuple[FrozenPolicy, TrainingLog]:
    """Advantage actor-critic with separate ReLU actor and Tanh critic,
    n-step (segment-length) returns, and per-segment categorical sampling
    during training.  The frozen policy acts by per-segment argmax."""
    hyper = hyper or A2cHyper()
    lesson = lesson or lesson_deterministic()
    cards = tuple(cyber.action_cardinalities(config))
    bounds = segment_bounds(cards)
    obs_dim = config.obs_length

    actor = init_net(obs_dim, sum(cards), hyper.hidden_dim, "relu", seed=seed)
    # Start near-uniform: a small policy head keeps early exploration broad
    # instead of committing to whatever the random init happens to prefer.
    actor.w3 *= 0.01
    actor.b3 *= 0.01
    critic = init_net(obs_dim, 1, hyper.hidden_dim, "tanh", seed=seed + 1)
    actor_opt = init_adam(actor, hyper.actor_lr, hyper.clip_norm)
    critic_opt = init_adam(critic, hyper.critic_lr, hyper.clip_norm)
    rng = np.random.default_rng([seed, 0xA2C])

    log = TrainingLog()
    gate = _GateKeeper(config, cards, lesson, seed)
    level_idx = 0
    outcomes: deque = deque(maxlen=WIN_RATE_WINDOW)
    episode = 0
    steps_this_level = 0
    best_rate, best_net, best_level = -1.0, actor.copy(), 0
    complete = False

    state, obs = cyber.reset(config, _episode_seed(seed, episode), level=lesson[0])
    ep_return = 0.0
    prev_log = state.property_log

    seg = hyper.segment_length
    obs_buf = np.zeros((seg, obs_dim))
    act_buf = np.zeros((seg, len(cards)), dtype=np.int64)
    rew_buf = np.zeros(seg)
    done_buf = np.zeros(seg)
    pending: list = []

    while not complete and steps_this_level < hyper.max_steps_per_level:
        for t in range(seg):
            logits = forward(actor, obs).output
            action = _sample_factored(logits, bounds, rng)
            before = cyber.PropertyLog(**prev_log.to_dict())
            state, next_obs, reward, done, plog = cyber.step(config, state, action)
            shaped = _shaped(reward, before, plog, hyper.gamma, hyper.shaping_coef)
            obs_buf[t] = obs
            act_buf[t] = action
            rew_buf[t] = shaped
            done_buf[t] = 1.0 if done else 0.0
            obs = next_obs
            prev_log = plog
            ep_return += reward
            log.env_steps += 1
            steps_this_level += 1

            if done:
                win = plog.win == WIN
                outcomes.append(win)
                log.episode_row(episode, ep_return, win, level_idx)
                episode += 1
                if len(outcomes) == WIN_RATE_WINDOW:
                    rate = sum(outcomes) / len(outcomes)
                    if level_idx > best_level or (
                        level_idx == best_level and rate > best_rate
                    ):
                        best_rate, best_net, best_level = rate, actor.copy(), level_idx
                new_level, complete = gate.check(actor, outcomes, level_idx, episode)
                if new_level != level_idx:
                    level_idx = new_level
                    outcomes.clear()
                    steps_this_level = 0
                state, obs = cyber.reset(
                    config, _episode_seed(seed, episode), level=lesson[level_idx]
                )
                ep_return = 0.0
                prev_log = state.property_log
                if complete:
                    break

        used = t + 1
        pending.append(
            (obs_buf[:used].copy(), act_buf[:used].copy(), rew_buf[:used].copy(),
             done_buf[:used].copy(), obs.copy())
        )
        if len(pending) >= hyper.segments_per_update:
            a_grads, c_grads = _a2c_gradients(actor, critic, pending, bounds, hyper)
            adam_step(actor, a_grads, actor_opt)
            adam_step(critic, c_grads, critic_opt)
            pending.clear()
            log.learner_updates += 1

    log.success = complete
    log.final_level = level_idx
    chosen = actor if complete else best_net
    policy = FrozenPolicy(
        net=chosen,
        algorithm="a2c",
        curriculum=f"lesson[{len(lesson)}]",
        cardinalities=cards,
        seed=seed,
        metadata={
            "success": complete,
            "env_steps": log.env_steps,
            "final_level": log.final_level,
            "levels": [lvl.stdevs for lvl in lesson],
        },
    )
    return policy, log


def _a2c_gradients(actor, critic, segments, bounds, hyper):
    """Actor and critic gradients over a batch of rollout segments.

    Each segment gets its own n-step returns (bootstrapped from the critic
    unless it ended an episode); advantages are normalized jointly across
    the whole batch with a standard-deviation floor so that near-constant
    batches contribute (almost) nothing rather than amplified noise.
    """
    returns_parts = []
    for seg_obs, _a, rewards, dones, last_obs in segments:
        n = len(rewards)
        bootstrap = (
            float(forward(critic, last_obs).output[0]) if dones[-1] == 0 else 0.0
        )
        ret = np.zeros(n)
        running = bootstrap
        for t in range(n - 1, -1, -1):
            running = rewards[t] + hyper.gamma * (1.0 - dones[t]) * running
            ret[t] = running
        returns_parts.append(ret)

    obs = np.concatenate([s[0] for s in segments], axis=0)
    actions = np.concatenate([s[1] for s in segments], axis=0)
    returns = np.concatenate(returns_parts)
    n = obs.shape[0]

    critic_trace = forward(critic, obs)
    values = critic_trace.output[:, 0]
    adv = returns - values
    if hyper.normalize_advantage and n > 1:
        adv = (adv - adv.mean()) / max(adv.std(), 1.0)

    actor_trace = forward(actor, obs)
    logits = actor_trace.output
    dout = np.zeros_like(logits)
    rows = np.arange(n)
    for k, (a, b) in enumerate(bounds):
        p = softmax(logits[:, a:b], axis=1)
        logp = np.log(np.maximum(p, 1e-300))
        ent = -(p * logp).sum(axis=1)
        seg_grad = adv[:, None] * p
        seg_grad[rows, actions[:, k]] -= adv
        seg_grad += hyper.entropy_coef * p * (logp + ent[:, None])
        dout[:, a:b] = seg_grad / n
    actor_grads, _ = backward(actor, actor_trace, dout)

    dval = (hyper.value_coef * 2.0 * (values - returns) / n)[:, None]
    critic_grads, _ = backward(critic, critic_trace, dval)
    return actor_grads, critic_grads


# ---------------------------------------------------------------------------
# Policy suite
# ---------------------------------------------------------------------------

SUITE_SPEC = (
    ("a2c_adr_cl", "a2c", "stdev_ladder"),
    ("a2c_adr", "a2c", "full_randomization"),
    ("a2c_cl", "a2c", "variable_adding"),
    ("dqn_cl", "dqn", "variable_adding"),
    ("dqn_det", "dqn", "deterministic"),
)


def build_lesson(config: ScenarioConfig, name: str) -> list[CurriculumLevel]:
    if name == "deterministic":
        return lesson_deterministic()
    if name == "full_randomization":
        return lesson_full_randomization(config)
    if name == "stdev_ladder":
        return lesson_stdev_ladder(config)
    if name == "variable_adding":
        return lesson_variable_adding(config)
    raise ValueError(f"unknown lesson {name!r}")


def build_policy_suite(
    config: ScenarioConfig,
    seed: int = 0,
    dqn_hyper: DqnHyper | None = None,
    a2c_hyper: A2cHyper | None = None,
) -> dict[str, tuple[FrozenPolicy, TrainingLog]]:
    """Train the five-policy transferability suite: three A2C curricula and
    two DQN curricula."""
    from dataclasses import replace

    suite = {}
    for i, (tag, algo, lesson_name) in enumerate(SUITE_SPEC):
        lesson = build_lesson(config, lesson_name)
        if algo == "a2c":
            hyper = a2c_hyper or A2cHyper()
            if lesson_name == "full_randomization":
                # Training at full randomization from scratch converges more
                # slowly than any curriculum; give it budget headroom.
                hyper = replace(hyper, max_steps_per_level=max(
                    hyper.max_steps_per_level, 800_000))
            policy, tlog = train_a2c(config, hyper, lesson, seed=seed + i)
        else:
            policy, tlog = train_dqn(config, dqn_hyper, lesson, seed=seed + i)
        policy.curriculum = lesson_name
        suite[tag] = (policy, tlog)
    return suite


def evaluate_win_rate(
    config: ScenarioConfig,
    policy: FrozenPolicy,
    episodes: int = 100,
    seed: int = 0,
    level: CurriculumLevel | None = None,
) -> float:
    """Greedy-policy win rate over fresh episodes."""
    wins = 0
    for e in range(episodes):
        state, obs = cyber.reset(config, [seed, 0xE7A1, e], level=level)
        done = False
        while not done:
            action = output_to_action(forward(policy.net, obs).output, policy.cardinalities)
            state, obs, _r, done, plog = cyber.step(config, state, action)
        wins += plog.win == WIN
    return wins / episodes
