import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hibid.domain import (AdRequest, Advertiser, AugmentedLowTransition, Channel, HighTransition,
                          LowTransition, MetricsReport, TrainConfig, high_transition_from_json,
                          log_record_from_json, log_record_to_json, low_transition_from_json,
                          transition_to_json, validate_log)

from conftest import make_record


def test_validate_log_charge_without_win():
    assert "charged without win" in validate_log(make_record(won=False, charged=0.5, clicked=False))


def test_validate_log_no_click_no_charge_ok():
    assert validate_log(make_record(won=True, clicked=False, charged=0.0)) == []


def test_validate_log_charge_exceeds_bid():
    assert "charged exceeds bid" in validate_log(make_record(clicked=True, charged=2.0, bid_price=1.5))


def test_validate_log_order_without_click():
    probs = validate_log(make_record(ordered=True, order_amount=3.0))
    assert "ordered without click" in probs


def test_advertiser_invariants():
    with pytest.raises(ValueError):
        Advertiser(0, 0, 10.0, 0.0, 0.1, 0.1, 1.0)
    with pytest.raises(ValueError):
        Advertiser(0, 0, 10.0, 1.0, 1.5, 0.1, 1.0)


def test_channel_profile_must_normalise():
    with pytest.raises(ValueError):
        Channel(0, 10, tuple([1 / 23] * 24), 1.0)
    Channel(0, 10, tuple([1 / 24] * 24), 1.0)


def test_request_timestamp_range():
    with pytest.raises(ValueError):
        AdRequest(0, 0, 86400.0, (1.0,))


def test_low_transition_invariants():
    with pytest.raises(ValueError):
        LowTransition((0.0,), 0, 0.5, 0.0, (0.0,), True)
    with pytest.raises(ValueError):
        LowTransition((0.0,), 0, 1.0, 0.0, (0.0,), True)
    LowTransition((0.0,), 0, 1.0, 0.3, (0.0,), True)


@given(r=st.sampled_from([0.0, 1.0]), c=st.floats(0.01, 100.0), lam=st.floats(0.0, 1.45))
def test_shaped_reward_exact(r, c, lam):
    t = LowTransition((0.1, 0.2), 3, r, c, (0.3, 0.4), False)
    a = AugmentedLowTransition.from_transition(t, lam)
    assert a.shaped_reward == r - lam * c


def test_train_config_published_defaults():
    c = TrainConfig()
    assert (c.high_batch_size, c.low_batch_size) == (4096, 1024)
    assert (c.high_lr, c.low_lr) == (1e-5, 1e-5)
    assert (c.gamma_high, c.gamma_low) == (1.0, 0.999)
    assert (c.w1, c.w2, c.wb) == (1.0, 0.05, 0.1)
    assert (c.lambda_max, c.n_repeat, c.n_lambda) == (1.45, 30, 50)
    assert (c.a_min, c.a_max, c.high_interval_days, c.eps_fraction) == (0.5, 1.5, 1, 0.01)
    assert len(c.high_grid) == 21 and c.high_grid[0] == 0.0 and c.high_grid[-1] == 1.0
    assert len(c.low_grid) == 21 and c.low_grid[0] == 0.5 and math.isclose(c.low_grid[-1], 1.5)


def test_train_config_roundtrip_and_unknown_key():
    c = TrainConfig(beta=3.0, hidden=(8, 8))
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"no_such_key": 1})
    with pytest.raises(ValueError):
        TrainConfig(lambda_max=0.0)


def test_log_record_json_roundtrip():
    r = make_record(clicked=True, charged=0.75, ordered=True, order_amount=12.5, day=2)
    assert log_record_from_json(json.loads(json.dumps(log_record_to_json(r)))) == r


floats = st.floats(-1e6, 1e6, allow_nan=False)


@given(s=st.lists(floats, min_size=3, max_size=3), s2=st.lists(floats, min_size=3, max_size=3),
       r=st.floats(0, 100), c=st.floats(0, 100), a=st.integers(0, 20))
def test_high_transition_roundtrip_bit_exact(s, s2, r, c, a):
    t = HighTransition(tuple(s), a, r, c, tuple(s2), False, 7, 1)
    back = high_transition_from_json(json.loads(json.dumps(transition_to_json(t))))
    assert back == t


def test_low_transition_roundtrip():
    t = LowTransition((0.1, 1 / 3), 4, 1.0, 0.5, (0.2, 2 / 3), True)
    assert low_transition_from_json(json.loads(json.dumps(transition_to_json(t)))) == t


def test_metrics_report_to_dict():
    m = MetricsReport(channel_cost={0: 1.0})
    assert m.to_dict()["channel_cost"] == {"0": 1.0}
