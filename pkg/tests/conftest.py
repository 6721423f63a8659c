import numpy as np
import pytest
import torch

from rgbdprior.volume_rendering import RaySampleBatch

torch.set_num_threads(1)


def random_batch(rng, n_rays, n_samples, near=0.5, far=4.0, sigma_scale=3.0, requires_grad=False):
    """Random sorted float64 sample batch with its own points inside a unit box."""
    t = np.sort(rng.uniform(near, far, (n_rays, n_samples)), axis=-1)
    t[:, 1:] = np.maximum(t[:, 1:], t[:, :-1] + 1e-3)
    t_far = np.maximum(np.full(n_rays, far), t[:, -1] + 1e-2)
    sigma = rng.exponential(sigma_scale, (n_rays, n_samples))
    color = rng.uniform(0, 1, (n_rays, n_samples, 3))
    points = rng.uniform(-1, 1, (n_rays, n_samples, 3))
    sigma_t = torch.tensor(sigma, requires_grad=requires_grad)
    color_t = torch.tensor(color, requires_grad=requires_grad)
    return RaySampleBatch(t=torch.tensor(t), t_far=torch.tensor(t_far), sigma=sigma_t, color=color_t,
                          points=torch.tensor(points))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def acceptance(number: int, ok: bool, detail: str) -> None:
    """Record one criterion verdict; all verdicts are echoed in the terminal summary."""
    line = f"ACCEPTANCE {number:2d} {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
