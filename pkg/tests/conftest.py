import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from laserodom.synth import TrajectorySpec, WorldConfig, generate_sequence, generate_world

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> one-line result, filled by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


def clear_world(traj: TrajectorySpec, seed: int = 0, cfg: WorldConfig = WorldConfig()):
    path = np.array([[p.x, p.y] for p in traj.poses()])
    return generate_world(seed, cfg, keep_clear=path)


@pytest.fixture(scope="session")
def walk_sequence():
    """60-frame random walk in a cluttered arena, raw scans kept."""
    traj = TrajectorySpec.random_walk(60, seed=11, bounds=(0.0, 0.0, 60.0, 60.0))
    world = clear_world(traj, seed=4)
    return generate_sequence(world, traj, seed=5, seq_id="walk")
