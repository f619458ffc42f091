import numpy as np
import pytest

from torta.core import Config, WorkloadConfig
from torta.topology import load_topology, parse_topology


TWO_REGION = """\
name pair
[nodes]
0 a 0.10
1 b 0.12
[latency]
0 5
5 0
[inventory]
0 A100 2
0 T4 1
1 A100 2
1 T4 1
"""

ONE_REGION = """\
name solo
[nodes]
0 only 0.10
[inventory]
0 A100 3
"""


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy4():
    return load_topology("toy4")


@pytest.fixture(scope="session")
def abilene():
    return load_topology("abilene")


@pytest.fixture
def pair_topo():
    return parse_topology(TWO_REGION, "pair")


@pytest.fixture
def solo_topo():
    return parse_topology(ONE_REGION, "solo")


def stationary_toy_config(rates=(140.0, 100.0, 50.0, 20.0)) -> Config:
    cfg = Config(topology="toy4")
    cfg.workload = WorkloadConfig(stationary=True, rates=tuple(rates))
    return cfg


@pytest.fixture
def toy_cfg():
    return stationary_toy_config()
