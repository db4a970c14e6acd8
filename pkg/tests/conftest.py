import math

import pytest
import torch

from rayfield.geometry import Intrinsics
from rayfield.scenes import build_scene, make_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset():
    """5 views of the sphere+box scene at 32x32, low noise."""
    scene = build_scene("sphere_box", seed=0)
    K = Intrinsics.from_fov_x(32, 32, math.radians(45))
    return make_dataset(scene, K, n_train=5, n_test=1, radius=3.0, noise="low", rng=0)


@pytest.fixture(scope="session")
def tiny_matches(tiny_dataset):
    from rayfield.cli import oracle_match_dataset

    return oracle_match_dataset(tiny_dataset, 12, 90.0, seed=0)


def pytest_collection_modifyitems(items):
    """Run the acceptance criteria after the unit suite."""
    items.sort(key=lambda item: "acceptance" in item.keywords)


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    if "acceptance" in getattr(report, "keywords", {}):
        name = report.nodeid.split("::")[-1]
        print(f"\nACCEPTANCE {name}: {report.outcome.upper()}", flush=True)
