import numpy as np
import pytest

from poseforge.skeleton import KeypointLayout, Pose2D, Pose3D
from poseforge.synthetic import (
    OcclusionConfig,
    PoseGeneratorConfig,
    SyntheticPoseGenerator,
    default_rig,
    simulate_detections,
)


@pytest.fixture(scope="session")
def layout():
    return KeypointLayout.default()


@pytest.fixture(scope="session")
def rig():
    return default_rig()


@pytest.fixture(scope="session")
def generator(layout):
    return SyntheticPoseGenerator(layout)


@pytest.fixture(scope="session")
def still_generator(layout):
    """No articulation, no yaw, no translation: always the template pose."""
    cfg = PoseGeneratorConfig(articulation={}, global_yaw=0.0,
                              translation=(0.0, 0.0, 0.0))
    return SyntheticPoseGenerator(layout, cfg)


@pytest.fixture(scope="session")
def clean_detections(layout, rig, generator):
    """Noise-free, occlusion-free detections for pose seed 7."""
    pose = generator.generate(7)
    views = simulate_detections(pose, rig, layout,
                                OcclusionConfig().disabled(), seed=0)
    return pose, views


def random_pose3d(seed: int) -> Pose3D:
    rng = np.random.default_rng(seed)
    return Pose3D(rng.uniform(-500, 1500, size=(133, 3)))


def full_pose2d(coords) -> Pose2D:
    coords = np.asarray(coords, dtype=np.float64)
    return Pose2D(coords, np.ones(133, dtype=bool))
