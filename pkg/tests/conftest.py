import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from telestage import kernels

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request, monkeypatch):
    """Run the test once per available kernel backend."""
    impl = kernels.BACKENDS[request.param]
    for name in ("qoi16_encode_chunks", "qoi16_decode_chunks", "splat_unit"):
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param
