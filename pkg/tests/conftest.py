import numpy as np
import pytest

from modiad.streamgen import FeatureSample


def random_sample(rng, d2d, d3d, n_patches=4, class_id=0):
    return FeatureSample(class_id, rng.standard_normal((n_patches, d2d)), rng.standard_normal((n_patches, d3d)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMALL = {
    "topology": {"clients": 2, "classes": 2, "per_client": 2, "share": 2},
    "stream": {"d2d": 6, "d3d": 5, "grid": 4, "latent_dim": 4, "pool_per_pair": 20, "packet_cap": 4,
               "eval": {"val_normal": 4, "val_anomalous": 4, "test_normal": 4, "test_anomalous": 4}},
    "budgets": {"per_client": 2, "global": 3},
    "lora": {"rank": 2, "t_warm": 2},
    "rounds": 4,
}


def small_config(**overrides):
    """A tiny topology that runs in well under a second; overrides are merged per section."""
    from modiad.config import from_dict

    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in SMALL.items()}
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key].update(value)
        else:
            data[key] = value
    return from_dict(data)


@pytest.fixture(scope="session")
def verdict(request):
    """Record and print a PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.__dict__.setdefault("acceptance_lines", [])

    def record(criterion: int, ok: bool, detail: str = ""):
        line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
