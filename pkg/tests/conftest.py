import sys
import numpy as np
import pytest
import torch

from helpers import tiny_hparams


@pytest.fixture
def tiny_hp():
    return tiny_hparams()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def toy_features(tmp_path_factory):
    """Preprocessed synthetic corpus: 2 speakers x 5 utterances."""
    from msclarinet.config import Hyperparameters
    from msclarinet.dsp import preprocess_corpus
    from msclarinet.toy import write_toy_corpus

    root = tmp_path_factory.mktemp("toy")
    write_toy_corpus(str(root / "raw"))
    preprocess_corpus(str(root / "raw"), str(root / "feat"), Hyperparameters())
    return str(root / "feat")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
