import os

import pytest

from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=int(os.environ.get("SDFORGE_HYPOTHESIS_EXAMPLES", "25")),
    suppress_health_check=[HealthCheck.too_slow],
    derandomize=True,
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def closed_loop():
    """Twenty seeded closed-loop reconstructions with and without carving init (about 15 minutes)."""
    from closedloop import run_closed_loop

    return run_closed_loop()
