import numpy as np
import pytest

from prvipe.data import pose_from_angles, sample_angles


def random_poses(seed: int, n: int) -> np.ndarray:
    """Normalized, articulated 17-joint poses from the synthetic body model."""
    rng = np.random.default_rng(seed)
    return np.array([pose_from_angles(a) for a in sample_angles(rng, n=n)])


def random_rotation(rng: np.random.Generator, dims: int = 3) -> np.ndarray:
    """Uniformly distributed proper rotation matrix."""
    q, r = np.linalg.qr(rng.standard_normal((dims, dims)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def poses():
    return random_poses(42, 20)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[str, str] = {}


def record_criterion(name: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE_LINES[name] = f"{name}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[name])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k[1:].split()[0])):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
