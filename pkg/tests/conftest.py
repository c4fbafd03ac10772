import numpy as np
import pytest

from memorykt.data import MS_PER_HOUR, Dataset, Interaction, StudentSequence


def make_seq(sid, rows):
    """rows: (concept, correct, hours) triples."""
    return StudentSequence(sid, tuple(Interaction(sid, c, r, int(round(h * MS_PER_HOUR)))
                                      for c, r, h in rows))


def make_dataset(lengths, num_concepts=4, seed=0):
    rng = np.random.default_rng(seed)
    seqs = []
    for i, n in enumerate(lengths):
        hours = np.cumsum(rng.exponential(5.0, n))
        rows = [(int(rng.integers(num_concepts)), int(rng.integers(2)), float(h)) for h in hours]
        seqs.append(make_seq(f"s{i}", rows))
    return Dataset(tuple(seqs), num_concepts)


@pytest.fixture
def write_csv(tmp_path):
    def _write(text, name="data.csv"):
        path = tmp_path / name
        path.write_text(text)
        return path
    return _write


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
