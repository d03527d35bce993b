import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    from ocnet.data import SyntheticConfig, generate_synthetic

    root = tmp_path_factory.mktemp("small_ds")
    cfg = SyntheticConfig(num_identities=6, images_per_identity=8, train_identities=4,
                          queries_per_identity=3, num_cameras=3, occlusion_fraction=0.5, seed=3)
    index, meta = generate_synthetic(cfg, root)
    return cfg, root, index, meta


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
