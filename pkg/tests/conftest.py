import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from evplan.scene import EgoState, MapElement, RoutePlan, Scene

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def straight_road_scene(
    speed=10.0,
    agents=(),
    half_width=5.0,
    length=300.0,
    speed_limit=15.0,
    with_route=True,
    stop_lines=(),
    future=None,
    H=4,
    dt=0.5,
    scene_id="straight",
):
    """Ego on the x axis at the origin, heading +x, on a single lane road."""
    hist = tuple(EgoState(((i - H) * speed * dt, 0.0), 0.0, speed, i) for i in range(H + 1))
    lane = MapElement("lane_centerline", ((-50.0, 0.0), (length, 0.0)), speed_limit=speed_limit)
    ring = ((-50.0, -half_width), (length, -half_width), (length, half_width), (-50.0, half_width))
    road = MapElement("road_boundary", ring)
    route = RoutePlan.from_points([(-50.0, 0.0), (length, 0.0)]) if with_route else None
    return Scene(
        ego_history=hist,
        agent_histories=tuple(agents),
        map=(lane, road) + tuple(stop_lines),
        route=route,
        ego_future=future,
        scene_id=scene_id,
    )


@pytest.fixture
def straight_scene():
    return straight_road_scene()


@pytest.fixture(scope="session")
def small_id_data():
    from evplan.synth import GenConfig, generate_scenes

    return generate_scenes(GenConfig(n_scenes=12, seed=101))


@pytest.fixture(scope="session")
def small_ood_data():
    from evplan.synth import GenConfig, generate_scenes

    return generate_scenes(GenConfig(n_scenes=12, seed=102, driving_side="left", mean_agent_density=9.0))


@pytest.fixture(autouse=True)
def _quiet_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
