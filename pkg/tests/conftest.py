import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vtae import datahub  # noqa: E402
from vtae.cli import main  # noqa: E402
from vtae.vae import VaeModel, point_architecture, save_checkpoint  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def run_cli(*args) -> int:
    return main([str(a) for a in args])


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    pytest.importorskip("mlxtend")
    return datahub.write_sample_mnist(tmp_path_factory.mktemp("mnist"))


@pytest.fixture(scope="session")
def donut_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("donut")
    assert run_cli("train", "--dataset", "donut", "--out", out, "--seed", 0, "--deterministic", "--no-plots") == 0
    return out


@pytest.fixture(scope="session")
def flat_checkpoint(tmp_path_factory):
    """A model whose mean decoder is a single linear layer: constant Jacobian everywhere."""
    model = VaeModel(point_architecture(dim=5, latent=2, hidden=()), seed=0)
    return save_checkpoint(model, tmp_path_factory.mktemp("flat") / "checkpoint", config={}, epoch=0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
