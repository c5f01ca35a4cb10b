"""strikelab: train small RL policies on the CyberStrike network-defense
game, then discover, time, and rank single-index adversarial observation
perturbations and their downstream impact."""

from .env import (
    AdrVariable,
    BlueAsset,
    CurriculumLevel,
    DETERMINISTIC_LEVEL,
    EnvSnapshot,
    EnvState,
    PropertyLog,
    RedAsset,
    ScenarioConfig,
    ScenarioError,
    ScriptedOptimalPolicy,
    action_cardinalities,
    encode_observation,
    load_bundled_scenario,
    load_scenario,
    load_scenario_file,
    reset,
    restore,
    sample_adr,
    snapshot,
    step,
)
from .nn import (
    AdamState,
    CrossEntropyToward,
    ForwardTrace,
    MaxOutput,
    MlpNet,
    NegativeQ,
    adam_step,
    forward,
    init_adam,
    init_net,
    input_gradient,
)
from .policies import FrozenPolicy, load_policy, save_policy, select_action

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
