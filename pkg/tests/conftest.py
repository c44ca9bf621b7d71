import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from safr.data import ingest  # noqa: E402
from safr.model import ModelConfig, SafrClassifier  # noqa: E402
from safr.toydata import sentiment_corpus, write_tsv  # noqa: E402


@pytest.fixture(scope="session")
def toy_tsvs(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    paths = {}
    for name, n, seed in (("train", 160, 0), ("dev", 40, 1), ("test", 60, 2)):
        paths[name] = write_tsv(sentiment_corpus(n, seed), d / f"{name}.tsv")
    return paths


@pytest.fixture(scope="session")
def toy_dataset(toy_tsvs):
    ds, _ = ingest(toy_tsvs["train"], toy_tsvs["dev"], toy_tsvs["test"],
                   min_freq=1, max_len=24, seed=0)
    return ds


@pytest.fixture
def tiny_config(toy_dataset):
    return ModelConfig(vocab_size=len(toy_dataset.vocab), E=16, d_ff=64, M=2,
                       max_len=24, dropout=0.1, seed=3)


@pytest.fixture
def tiny_model(tiny_config):
    return SafrClassifier(tiny_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary --------------------------------------------------

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.notes: list[str] = []

    def note(self, text: str):
        self.notes.append(text)

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        detail = "; ".join(self.notes)
        if exc is not None:
            msg = str(exc).strip().splitlines()[0] if str(exc).strip() else kind.__name__
            detail = f"{detail}; {msg}" if detail else msg
        _CRITERIA[self.number] = (self.title, exc is None, detail)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
