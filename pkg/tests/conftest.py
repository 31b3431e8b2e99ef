import numpy as np
import pytest

from hibid.domain import AdRequest, Advertiser, LogRecord, TrainConfig
from hibid.market import SimConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_sim():
    return SimConfig(n_advertisers=12, n_channels=2, days=2, channel_volumes=(300, 200),
                     retrieval_size=4, seed=3)


def make_request(i=0, channel=0, t=100.0, n_cat=4):
    return AdRequest(i, channel, t, tuple([1.0] + [0.3] * (n_cat - 1)))


def make_record(**kw):
    base = dict(request=make_request(), advertiser_id=0, bid_ratio=1.0, bid_price=1.5, won=True,
                charged=0.0, clicked=False, ordered=False, order_amount=0.0, day=0)
    base.update(kw)
    return LogRecord(**base)


ACCEPTANCE_KEY = "hibid_acceptance_lines"


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = request.config.__dict__.setdefault(ACCEPTANCE_KEY, [])

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'} | {detail}"
        lines.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get(ACCEPTANCE_KEY)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
