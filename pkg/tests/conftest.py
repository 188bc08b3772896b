from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "mogref",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("mogref")

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES
