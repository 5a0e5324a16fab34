import numpy as np
import pytest

from optweave.env import ClipSpec, generate_clip
from optweave.oracle import OracleConfig, build_guidance_dataset
from optweave.scenarios import complementary, sample_specs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def calm_clip():
    return generate_clip(ClipSpec(150, 0.1, 0.1, 4.0, seed=11), clip_id="calm")


@pytest.fixture(scope="session")
def dynamic_clip():
    return generate_clip(ClipSpec(150, 0.85, seed=12), clip_id="dyn")


@pytest.fixture(scope="session")
def small_dataset():
    scn = complementary(n_clips=8, length_steps=120)
    return build_guidance_dataset(sample_specs(scn, 3), 6, 20, OracleConfig(), seed=3)


# criterion id -> (passed, detail); filled by the acceptance suite
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")
