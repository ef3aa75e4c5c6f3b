import pytest

from conjpt import available_backends


@pytest.fixture(params=available_backends())
def backend(request):
    """Run a test once per installed kernel backend."""
    return request.param
