import numpy as np
import pytest

from uavloc.config_reader import default_scenario, merge_scenario
from uavloc.geo_env import Building, UrbanMap
from uavloc.radio_model import ChannelParams, OdometryNoise, SegmentParams
from uavloc.utils.io_utils import write_yaml_file

BS_SITES = ((100.0, 100.0, 25.0), (500.0, 150.0, 25.0), (300.0, 550.0, 25.0))

SMALL_SCENARIO = {
    "city": {"n_buildings": 30},
    "users": {"count": 2},
    "uav": {"budget": 200.0, "n_epochs": 10},
    "planner": {"mode": "random-rectangle"},
    "em": {"max_iters": 30},
    "algorithm": {"max_outer_iters": 3, "grid_step": 20.0},
}


@pytest.fixture(scope="session")
def channel() -> ChannelParams:
    return ChannelParams(los=SegmentParams(alpha=-22.0, beta=-32.0, sigma=np.sqrt(2.0), mu_tau=0.0, sigma_tau=2.0),
                         nlos=SegmentParams(alpha=-32.0, beta=-35.0, sigma=np.sqrt(5.0), mu_tau=50.0, sigma_tau=40.0),
                         pi_los=0.5)


@pytest.fixture(scope="session")
def prior_channel() -> ChannelParams:
    """The estimator's starting channel: off the synthesis channel in every parameter."""
    return ChannelParams(los=SegmentParams(alpha=-20.0, beta=-30.0, sigma=2.0, mu_tau=0.0, sigma_tau=3.0),
                         nlos=SegmentParams(alpha=-30.0, beta=-38.0, sigma=3.0, mu_tau=40.0, sigma_tau=40.0),
                         pi_los=0.5)


@pytest.fixture(scope="session")
def noiseless_channel() -> ChannelParams:
    return ChannelParams(los=SegmentParams(alpha=-22.0, beta=-32.0, sigma=0.0, mu_tau=0.0, sigma_tau=0.0),
                         nlos=SegmentParams(alpha=-32.0, beta=-35.0, sigma=0.0, mu_tau=50.0, sigma_tau=0.0))


@pytest.fixture(scope="session")
def noise() -> OdometryNoise:
    return OdometryNoise(sigma_gps=np.sqrt(5.0), sigma_vel=np.sqrt(0.2))


@pytest.fixture(scope="session")
def open_map() -> UrbanMap:
    return UrbanMap(area=(0.0, 600.0, 0.0, 600.0), buildings=(), bs_sites=BS_SITES)


@pytest.fixture(scope="session")
def block_map() -> UrbanMap:
    """One tall building in the middle of the area."""
    return UrbanMap(area=(0.0, 600.0, 0.0, 600.0), buildings=(Building(250.0, 350.0, 250.0, 350.0, 40.0),),
                    bs_sites=BS_SITES)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)


@pytest.fixture
def small_scenario_dict() -> dict:
    return merge_scenario(default_scenario(), SMALL_SCENARIO)


@pytest.fixture
def small_scenario_file(tmp_path) -> str:
    return write_yaml_file(SMALL_SCENARIO, str(tmp_path / "small.yaml"))
