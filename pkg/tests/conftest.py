import sys
import numpy as np
import pytest
from hypothesis import settings

from leukonet.tensor import set_default_dtype

# First calls pay for imports and basis caches; wall-clock deadlines only add flakiness.
settings.register_profile("leukonet", deadline=None)
settings.load_profile("leukonet")


@pytest.fixture(autouse=True)
def float64_default():
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """Four subjects per class, eight 32x32 cells each, plus one test subject per class."""
    from leukonet.data import synth_generate
    from leukonet.tensor import Rng

    root = tmp_path_factory.mktemp("tiny")
    synth_generate(root, 4, 8, 32, Rng(3))
    return root


@pytest.fixture(scope="session")
def tiny_data(tiny_synth):
    from leukonet.data import load_images, read_manifest, split_folds
    from leukonet.tensor import Rng

    manifest = read_manifest(tiny_synth / "manifest.csv")
    return load_images(manifest, "train"), split_folds(manifest, 4, Rng(1))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
