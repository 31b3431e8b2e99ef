import pytest

from hibid.domain import Advertiser
from hibid.metrics import compute_metrics, normalized_deltas, reference_kappa

from conftest import make_record, make_request

ADVS = [Advertiser(0, 0, 10.0, 1.0, 0.1, 0.1, 5.0), Advertiser(1, 0, 10.0, 2.0, 0.1, 0.1, 5.0)]


def _logs():
    q = [make_request(i, channel=i % 2) for i in range(6)]
    return [
        make_record(request=q[0], advertiser_id=0, clicked=True, charged=1.5, ordered=True, order_amount=6.0),
        make_record(request=q[1], advertiser_id=0, clicked=True, charged=0.5),
        make_record(request=q[2], advertiser_id=1, clicked=True, charged=1.0),
        make_record(request=q[3], advertiser_id=1, clicked=False, charged=0.0),
        make_record(request=q[4], advertiser_id=0, won=False),
    ]


def test_hand_computed_two_advertiser_metrics():
    m = compute_metrics(_logs(), ADVS)
    assert (m.impr, m.clicks) == (4, 3)
    assert m.cost == 3.0 and m.cpc == 1.0
    # advertiser 0: cpc 1.0 <= 1.0; advertiser 1: cpc 1.0 <= 2.0
    assert m.csr == 1.0
    assert m.roi == pytest.approx(2.0)
    assert m.channel_cost == {0: 2.5, 1: 0.5}


def test_csr_violation_and_zero_click_rule():
    logs = [make_record(advertiser_id=0, clicked=True, charged=1.4), make_record(advertiser_id=1, won=False)]
    m = compute_metrics(logs, ADVS)
    assert m.csr == 0.5


def test_identical_logs_zero_deltas():
    logs = _logs()
    ref = compute_metrics(logs, ADVS)
    assert set(normalized_deltas(compute_metrics(logs, ADVS), ref).values()) == {0.0}


def test_capacity_and_budget_ratios():
    logs = _logs()
    kap = reference_kappa(logs, ADVS)
    assert kap[(0, 0)] == pytest.approx(2.5)
    m = compute_metrics(logs, ADVS, kappa={(0, 0): 2.5, (0, 1): 10.0})
    assert m.capacity_satisfactory_ratio == 0.5
    alloc = {(0, 0): (1.0, 1.0), (0, 1): (1.0, 1.0)}
    m = compute_metrics(logs, ADVS, allocations=alloc)
    # advertiser 0 spent 1.5 on channel 0 against 1.0
    assert m.budget_satisfactory_ratio == 0.75
