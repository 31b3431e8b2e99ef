import numpy as np
import pytest
from hypothesis import given, strategies as st

from hibid.domain import Advertiser, LowTransition, TrainConfig
from hibid.executor import (AugmentedLowDataset, ChannelEstimateCache, LogTable, LowModel, RunningTotals,
                            Trajectories, augment_dataset, augment_lambda, build_low_dataset, choose_lambda,
                            cpc_pred, cpc_pred_grid, discounted_suffix, future_by_channel, lambda_grid,
                            mape_gamma_sweep, segment_starts, select_action, select_lambda, train_low)
from hibid.market import CtrBiddingPolicy, ListSink, build_channels, generate_advertisers, replay

from conftest import make_record, make_request


def test_augment_lambda_contract(rng):
    t = LowTransition((0.5, 0.1), 3, 1.0, 0.8, (0.5, 0.2), False)
    out = augment_lambda(t, 30, 1.45, rng)
    assert len(out) == 30
    for a in out:
        assert 0.0 <= a.lam <= 1.45
        assert a.shaped_reward == t.reward - a.lam * t.cost
        assert a.state[:2] == t.state and a.state[2] == a.lam / 1.45
    with pytest.raises(ValueError):
        augment_lambda(t, 0, 1.45, rng)


def test_augment_zero_cost_keeps_reward(rng):
    t = LowTransition((0.0,), 0, 0.0, 0.0, (0.0,), True)
    assert {a.shaped_reward for a in augment_lambda(t, 10, 1.45, rng)} == {0.0}


def test_discounted_suffix_and_segments():
    v = np.array([1.0, 2.0, 3.0, 4.0])
    starts = segment_starts(np.array([0, 0, 1, 1]))
    assert starts.tolist() == [True, False, True, False]
    assert np.allclose(discounted_suffix(v, starts, 0.5), [2.0, 2.0, 5.0, 4.0])


def test_future_by_channel_splits():
    traj = np.array([0, 0, 0])
    seq = np.array([0, 1, 2])
    ch = np.array([0, 1, 0])
    (fc,) = future_by_channel(traj, seq, ch, [np.array([1.0, 2.0, 4.0])], 1.0, 2)
    assert fc.tolist() == [[5.0, 2.0], [4.0, 2.0], [4.0, 0.0]]


def test_choose_lambda_examples():
    # feasible 0.2 (cost 3, clicks 5) and 0.8 (cost 1, clicks 3), budget 4
    assert choose_lambda(np.array([[3.0, 1.0]]), np.array([[5.0, 3.0]]), np.array([4.0])).tolist() == [0]
    # nothing feasible: last (largest) lambda
    assert choose_lambda(np.array([[9.0, 8.0]]), np.array([[5.0, 3.0]]), np.array([1.0])).tolist() == [1]


def test_lambda_grid():
    g = lambda_grid(50, 1.45)
    assert g[0] == 0.0 and g[-1] == 1.45 and len(g) == 50
    with pytest.raises(ValueError):
        lambda_grid(0, 1.0)


def test_cpc_pred_examples():
    totals = RunningTotals(2)
    cache = ChannelEstimateCache(2)
    assert cpc_pred(totals, cache, 0, 0.0, 0.0) == 0.0
    totals.record(0, 10.0, True)
    for _ in range(4):
        totals.record(0, 0.0, True)
    cache.update(1, 5.0, 5.0)
    assert cpc_pred(totals, cache, 0, 0.0, 0.0) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        totals.record(0, -1.0, False)
    g = cpc_pred_grid(np.array([0.0]), np.array([0.0]), np.array([0.0]), np.array([0.0]),
                      np.array([[0.0, 2.0]]), np.array([[0.0, 4.0]]))
    assert g.tolist() == [[0.0, 0.5]]


def test_select_action_examples():
    q = np.array([5.0, 3.0, 1.0])
    assert select_action(q, np.array([1.2, 0.9, 0.8]), 1.0) == 1
    assert select_action(q, np.array([1.5, 1.3, 1.2]), 1.0) == 2


@given(st.lists(st.floats(0, 3), min_size=3, max_size=3), st.floats(0.1, 2.0))
def test_select_action_never_exceeds_when_feasible(preds, cpc_set):
    preds = np.asarray(preds)
    a = select_action(np.array([1.0, 2.0, 3.0]), preds, cpc_set)
    if (preds <= cpc_set).any():
        assert preds[a] <= cpc_set
    else:
        assert a == int(preds.argmin())


def test_mape_hand_trajectory():
    adv = [Advertiser(0, 0, 10, 1, 0.1, 0.1, 1.0)]
    recs = [make_record(request=make_request(i, channel=i % 2), clicked=c, charged=x)
            for i, (c, x) in enumerate([(True, 2.0), (False, 0.0), (True, 1.0)])]
    trajs = Trajectories.from_logs(recs, 2, adv)
    res = mape_gamma_sweep(trajs, [1.0, 0.0])
    assert res.mape[1.0] == 0.0 and res.n_used == 1
    # gamma 0 keeps only the next value per channel: predictions 2/1, 3/2, 3/2 against 1.5
    assert res.mape[0.0] == pytest.approx((0.5 / 1.5) / 3)


def test_mape_excludes_zero_click_trajectory():
    adv = [Advertiser(0, 0, 10, 1, 0.1, 0.1, 1.0), Advertiser(1, 0, 10, 1, 0.1, 0.1, 1.0)]
    recs = [make_record(advertiser_id=0, clicked=True, charged=1.0), make_record(advertiser_id=1)]
    res = mape_gamma_sweep(Trajectories.from_logs(recs, 2, adv), [0.9])
    assert (res.n_used, res.n_excluded) == (1, 1)


def _low_setup(tiny_sim, **kw):
    advs = generate_advertisers(tiny_sim)
    sink = ListSink()
    replay(tiny_sim, CtrBiddingPolicy(tiny_sim), sink)
    tc = TrainConfig(hidden=(16,), low_iters=30, low_batch_size=32, n_repeat=3, low_lr=1e-3, **kw)
    alloc = {(d, a.id): (0.5, 0.5) for d in range(tiny_sim.days) for a in advs}
    ds = build_low_dataset(sink.records, advs, build_channels(tiny_sim), alloc, tc)
    return advs, sink.records, ds, tc


def test_low_dataset_episodes(tiny_sim):
    advs, recs, ds, tc = _low_setup(tiny_sim)
    assert len(ds) == len(recs)
    assert ds.rewards.sum() == sum(r.clicked for r in recs)
    assert ds.costs.sum() == pytest.approx(sum(r.charged for r in recs))
    assert ((ds.rewards == 0) | (ds.costs > 0)).all()
    # channel spend so far never decreases within an episode
    starts = np.r_[True, ds.terminal[:-1]]
    spend = ds.states[:, 2]
    assert (np.diff(spend)[~starts[1:]] >= -1e-12).all()
    np.testing.assert_allclose(ds.states[:, 0] * ds.budget, ds.alloc)


def test_augmented_dataset_exact_size(tiny_sim):
    _, _, ds, tc = _low_setup(tiny_sim)
    aug = augment_dataset(ds, 30, 1.45, np.random.default_rng(0))
    assert len(aug) == 30 * len(ds)
    assert ((aug.lam >= 0) & (aug.lam <= 1.45)).all()
    assert np.array_equal(aug.shaped_rewards, ds.rewards[aug.index] - aug.lam * ds.costs[aug.index])
    t = aug.get(7)
    assert t.state[-1] == aug.lam[7] / 1.45


def test_train_low_checkpoint_and_selection(tiny_sim, tmp_path):
    _, _, ds, tc = _low_setup(tiny_sim)
    aug = augment_dataset(ds, tc.n_repeat, tc.lambda_max, np.random.default_rng(0))
    m = train_low(aug, tc)
    m2 = train_low(aug, tc)
    x = m.inputs(ds.states[:4], 0.3)
    assert np.array_equal(m.q.predict(x), m2.q.predict(x))
    m.save(tmp_path)
    back = LowModel.load(tmp_path)
    assert np.array_equal(back.eval_c.predict(x), m.eval_c.predict(x))
    lam = select_lambda(m, ds.states[0], 1e9)
    assert 0.0 <= lam <= 1.45
    # no feasible lambda: most conservative
    assert select_lambda(m, ds.states[0], -1.0) == 1.45
    with pytest.raises(FileNotFoundError):
        LowModel.load(tmp_path / "nothing")
