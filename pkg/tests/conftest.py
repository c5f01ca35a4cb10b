import pytest

from strikelab import env as cyber


@pytest.fixture(scope="session")
def config():
    """The default 8-red / 4-blue scenario."""
    return cyber.load_bundled_scenario()


TINY_SCENARIO = """
adr_variables: []
scenario:
  red:
    assets:
      - {is_target: true, type: 0}
      - {is_target: false, type: 0}
      - {is_target: false, type: 0}
  blue:
    assets:
      - {type: 1, loss_cost: 20, use_cost: 2}
      - {type: 3, loss_cost: 10, use_cost: 5}
effect_probability:
  - [0, 0, 0, 0]
  - [1.0, 0, 0, 0]
  - [0, 0, 0, 0]
  - [0, 0, 0, 0]
"""


@pytest.fixture(scope="session")
def tiny_config():
    """3 red in a chain (0 <- 1 <- 2), one hacker + one eavesdropper."""
    text = TINY_SCENARIO.replace(
        "  blue:",
        "    defense_network:\n      - [1]\n      - [2]\n      - []\n  blue:",
    )
    return cyber.load_scenario(text)
