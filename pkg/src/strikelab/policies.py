"""Frozen policies: a trained net plus the deterministic action rule, and a
versioned checkpoint format.

Checkpoints are a single file: one JSON header line (dims, activation,
algorithm tag, curriculum history, seed, parameter shapes) followed by the
raw little-endian float64 parameter bytes in declared order.  The layout is
deterministic, so identical policies serialize to identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .nn import HIDDEN_DIM, MlpNet, PARAM_NAMES, forward, segment_bounds

CHECKPOINT_MAGIC = "strikelab-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class FrozenPolicy:
    net: MlpNet
    algorithm: str  # "dqn" | "a2c"
    curriculum: str
    cardinalities: tuple[int, ...]
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cardinalities = tuple(int(c) for c in self.cardinalities)
        if self.net.out_dim != sum(self.cardinalities):
            raise ValueError(
                f"net output dim {self.net.out_dim} does not match "
                f"sum of action cardinalities {sum(self.cardinalities)}"
            )

    @property
    def obs_dim(self) -> int:
        return self.net.in_dim


def select_action(policy: FrozenPolicy, obs: np.ndarray) -> tuple[int, ...]:
    """Greedy multi-discrete action: per-segment argmax, ties to the lowest
    index."""
    out = forward(policy.net, obs).output
    return output_to_action(out, policy.cardinalities)


def output_to_action(output: np.ndarray, cardinalities) -> tuple[int, ...]:
    return tuple(
        int(np.argmax(output[a:b])) for a, b in segment_bounds(cardinalities)
    )


def batched_actions(policy: FrozenPolicy, obs_batch: np.ndarray) -> np.ndarray:
    """Greedy actions for a batch of observations, shape (n, num_segments)."""
    out = forward(policy.net, obs_batch).output
    cols = [
        np.argmax(out[:, a:b], axis=1) for a, b in segment_bounds(policy.cardinalities)
    ]
    return np.stack(cols, axis=1)


def save_policy(policy: FrozenPolicy, path) -> None:
    shapes = {name: list(p.shape) for name, p in policy.net.params().items()}
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "algorithm": policy.algorithm,
        "curriculum": policy.curriculum,
        "activation": policy.net.activation,
        "dims": [policy.net.in_dim, policy.net.hidden_dim, HIDDEN_DIM, policy.net.out_dim],
        "cardinalities": list(policy.cardinalities),
        "seed": policy.seed,
        "metadata": policy.metadata,
        "params": list(PARAM_NAMES),
        "shapes": shapes,
        "dtype": "<f8",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(policy.net.params()[name], dtype="<f8").tobytes())


def load_policy(path) -> FrozenPolicy:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a strikelab checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"{path}: checkpoint version {header.get('version')} "
                f"(supported: {CHECKPOINT_VERSION})"
            )
        params = {}
        for name in header["params"]:
            shape = tuple(header["shapes"][name])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            params[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    net = MlpNet(
        params["w1"], params["b1"], params["w2"], params["b2"],
        params["w3"], params["b3"], activation=header["activation"],
    )
    return FrozenPolicy(
        net=net,
        algorithm=header["algorithm"],
        curriculum=header["curriculum"],
        cardinalities=tuple(header["cardinalities"]),
        seed=header["seed"],
        metadata=header.get("metadata", {}),
    )
