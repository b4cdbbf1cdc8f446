import numpy as np
import pytest

from stket.gradcheck import toy_config, toy_video
from stket.knowledge import build_spatial_matrix, build_temporal_matrix
from stket.synthetic import GenConfig, generate_synthetic_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_gen():
    return GenConfig(num_videos=6, frames_per_video=5, max_objects=3, seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_gen):
    videos, dyn = generate_synthetic_dataset(small_gen)
    return videos, dyn


@pytest.fixture(scope="session")
def small_banks(small_dataset):
    videos, _ = small_dataset
    return build_spatial_matrix(videos), build_temporal_matrix(videos)


@pytest.fixture
def toy():
    cfg = toy_config()
    return cfg, toy_video(0, cfg)


@pytest.fixture(scope="session")
def recovery_dataset():
    from stket.cli import load_config
    return generate_synthetic_dataset(GenConfig.from_dict(load_config("recovery")["generator"]))


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} [{title}]: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES[number] = line
        with capsys.disabled():
            print(f"\n{line}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
