import logging

import numpy as np
import pytest

from moie import carver, concepts, data

logging.getLogger("moie").setLevel(logging.WARNING)


class Carved:
    """Default synthetic spec, carved once: the fixture behind the slower tests."""

    def __init__(self, seed):
        self.seed = seed
        self.spec = data.GenSpec()
        self.train, self.val, self.test = data.generate(self.spec, seed)
        self.f0 = carver.train_blackbox(self.train, seed=seed)
        self.bank = concepts.train_probes(self.train, self.val, seed=seed)
        self.keep = concepts.filter_concepts(self.bank)
        self.tr, self.va, self.te = (concepts.concept_view(d, self.bank, self.keep)
                                     for d in (self.train, self.val, self.test))
        self.moie = carver.carve(self.f0, self.tr, self.va, hyper=carver.CarveHyper(seed=seed),
                                 concept_idx=self.keep)


@pytest.fixture(scope="session")
def carved():
    return Carved(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
