import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lip2speech import data  # noqa: E402
from verdicts import RESULTS  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)



@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus_small")
    data.make_synthetic_corpus(root, data.CorpusConfig(n_utterances=12, n_speakers=2, seed=3))
    return data.Corpus(root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
