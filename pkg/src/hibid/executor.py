"""Low-level constrained-bidding executor.

One policy serves every Lagrange multiplier: each logged tuple is repeated
with multipliers drawn from [0, lambda_max] and the click reward is shaped to
``r - lambda * c``.  Two evaluation critics estimate discounted future cost
and clicks under the greedy policy; at serving time they pick the multiplier
that fits the remaining channel allocation, and mask bid ratios whose
predicted blended CPC exceeds the target.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cvae import CVAE
from .domain import (SECONDS_PER_DAY, Advertiser, AugmentedLowTransition, Channel, LogRecord,
                     LowTransition, TrainConfig)
from .neural import MLP, load_net, save_net, sync_target
from .planner import NEG, QBatch, QLearner, TrainingDiverged, masked_max, td_loss_q

CPC_RATIO_CAP = 3.0


# ---------------------------------------------------------------------------
# Log tables and discounted futures
# ---------------------------------------------------------------------------

@dataclass
class LogTable:
    """Columnar view of auction logs, one row per participation."""

    day: np.ndarray
    adv: np.ndarray
    ch: np.ndarray
    seq: np.ndarray
    t: np.ndarray
    ratio: np.ndarray
    price: np.ndarray
    won: np.ndarray
    charged: np.ndarray
    clicked: np.ndarray
    affinity: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[LogRecord], advertisers: Sequence[Advertiser]) -> LogTable:
        cat = [a.category for a in advertisers]
        n = len(records)
        cols = {k: np.empty(n, dtype=dt) for k, dt in (
            ("day", np.int64), ("adv", np.int64), ("ch", np.int64), ("seq", np.int64), ("t", np.float64),
            ("ratio", np.float64), ("price", np.float64), ("won", bool), ("charged", np.float64),
            ("clicked", bool), ("affinity", np.float64))}
        for i, r in enumerate(records):
            q = r.request
            cols["day"][i] = r.day
            cols["adv"][i] = r.advertiser_id
            cols["ch"][i] = q.channel_id
            cols["seq"][i] = q.id
            cols["t"][i] = q.timestamp
            cols["ratio"][i] = r.bid_ratio
            cols["price"][i] = r.bid_price
            cols["won"][i] = r.won
            cols["charged"][i] = r.charged
            cols["clicked"][i] = r.clicked
            cols["affinity"][i] = q.user_affinity[cat[r.advertiser_id]]
        return cls(**cols)

    def __len__(self) -> int:
        return len(self.day)

    def take(self, idx: np.ndarray) -> LogTable:
        return LogTable(**{k: getattr(self, k)[idx] for k in self.__dataclass_fields__})


def discounted_suffix(values: np.ndarray, starts: np.ndarray, gamma: float) -> np.ndarray:
    """G_j = v_j + gamma * G_{j+1}, restarting at each segment start."""
    v = values.tolist()
    brk = starts.tolist()
    out = [0.0] * len(v)
    acc = 0.0
    for j in range(len(v) - 1, -1, -1):
        acc = v[j] + gamma * acc
        out[j] = acc
        if brk[j]:
            acc = 0.0
    return np.asarray(out, dtype=np.float64)


def segment_starts(*keys: np.ndarray) -> np.ndarray:
    n = len(keys[0])
    s = np.zeros(n, dtype=bool)
    if n:
        s[0] = True
        for k in keys:
            s[1:] |= k[1:] != k[:-1]
    return s


def future_by_channel(traj: np.ndarray, seq: np.ndarray, ch: np.ndarray, values: Sequence[np.ndarray],
                      gamma: float, n_channels: int) -> list[np.ndarray]:
    """For each row and each channel q, the gamma-discounted sum of ``values``
    over the trajectory's channel-q rows from this row's request onward.

    Discount exponents count positions within the channel's own sequence.
    Returns one (n, P) array per value array.
    """
    n = len(traj)
    order = np.lexsort((seq, traj, ch))
    t_o, s_o, c_o = traj[order], seq[order], ch[order]
    starts = segment_starts(c_o, t_o)
    big = int(seq.max()) + 1 if n else 1
    key_o = t_o * big + s_o
    key = traj * big + seq
    outs = [np.zeros((n, n_channels)) for _ in values]
    suff = [discounted_suffix(v[order], starts, gamma) for v in values]
    for q in range(n_channels):
        lo, hi = np.searchsorted(c_o, [q, q + 1])
        if lo == hi:
            continue
        kq, tq = key_o[lo:hi], t_o[lo:hi]
        pos = np.searchsorted(kq, key, side="left")
        ok = pos < (hi - lo)
        pos_c = np.minimum(pos, hi - lo - 1)
        ok &= tq[pos_c] == traj
        for o, g in zip(outs, suff):
            o[:, q] = np.where(ok, g[lo:hi][pos_c], 0.0)
    return outs


def exclusive_cumsum(x: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Sum of earlier entries in the same segment (rows in segment order)."""
    c = np.cumsum(x)
    seg = np.cumsum(starts) - 1
    first = np.flatnonzero(starts)
    base = (c - x)[first]
    return c - x - base[seg]


# ---------------------------------------------------------------------------
# Low-level state
# ---------------------------------------------------------------------------

N_LOW_BASE = 12


def low_state_dim(n_channels: int) -> int:
    return N_LOW_BASE + n_channels


def low_states(alloc: np.ndarray, time_frac: np.ndarray, ch_spend: np.ndarray, total_spend: np.ndarray,
               cost_to_date: np.ndarray, clicks_to_date: np.ndarray, req_quality: np.ndarray,
               ctr: np.ndarray, cpc_target: np.ndarray, budget: np.ndarray, cache_cost: np.ndarray,
               cache_clicks: np.ndarray, channel: np.ndarray, n_channels: int) -> np.ndarray:
    """Feature rows; currency amounts are divided by the advertiser's budget.

    Column 0 is the channel allocation a_p^h / B_m.
    """
    n = len(alloc)
    B = np.where(budget > 0, budget, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        cpc_now = np.where(clicks_to_date > 0, cost_to_date / np.maximum(clicks_to_date, 1), 0.0)
    X = np.zeros((n, low_state_dim(n_channels)))
    X[:, 0] = alloc / B
    X[:, 1] = time_frac
    X[:, 2] = ch_spend / B
    X[:, 3] = np.maximum(alloc - ch_spend, 0.0) / B
    X[:, 4] = total_spend / B
    X[:, 5] = np.minimum(cpc_now / cpc_target, CPC_RATIO_CAP)
    X[:, 6] = req_quality
    X[:, 7] = ctr * 10.0
    X[:, 8] = cpc_target
    X[:, 9] = budget / 100.0
    X[:, 10] = cache_cost / B
    X[:, 11] = cache_clicks * cpc_target / B
    X[np.arange(n), N_LOW_BASE + channel] = 1.0
    return X


@dataclass
class LowDataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray
    alloc: np.ndarray
    budget: np.ndarray
    n_channels: int

    def __len__(self) -> int:
        return len(self.actions)

    def to_transitions(self) -> list[LowTransition]:
        return [LowTransition(tuple(self.states[i].tolist()), int(self.actions[i]), float(self.rewards[i]),
                              float(self.costs[i]), tuple(self.next_states[i].tolist()), bool(self.terminal[i]))
                for i in range(len(self))]


def snap_ratio(ratio: np.ndarray, grid: Sequence[float]) -> np.ndarray:
    g = np.asarray(grid)
    return np.abs(np.asarray(ratio)[:, None] - g[None, :]).argmin(axis=1)


def build_low_dataset(logs: Sequence[LogRecord] | LogTable, advertisers: Sequence[Advertiser],
                      channels: Sequence[Channel], allocations: Mapping[tuple[int, int], Sequence[float]],
                      cfg: TrainConfig = TrainConfig()) -> LowDataset:
    """One episode per advertiser-channel-day, rows in timestamp order.

    ``allocations[(day, advertiser_id)]`` holds the planner's per-channel
    budget fractions.  The other-channel cache features are the realised
    discounted future cost and clicks of those channels.
    """
    tab = logs if isinstance(logs, LogTable) else LogTable.from_records(logs, advertisers)
    P = len(channels)
    budgets = np.asarray([a.daily_budget for a in advertisers])
    cpcs = np.asarray([a.cpc_target for a in advertisers])
    ctrs = np.asarray([a.hist_ctr for a in advertisers])
    quality = np.asarray([c.quality_factor for c in channels])

    # advertiser-day time order
    o1 = np.lexsort((tab.seq, tab.adv, tab.day))
    tab = tab.take(o1)
    dm_start = segment_starts(tab.day, tab.adv)
    traj = np.cumsum(dm_start) - 1
    clicks = tab.clicked.astype(np.float64)
    tot_spend = exclusive_cumsum(tab.charged, dm_start)
    tot_clicks = exclusive_cumsum(clicks, dm_start)
    fc, fu = future_by_channel(traj, tab.seq, tab.ch, [tab.charged, clicks], cfg.gamma_low, P)
    rows = np.arange(len(tab))
    cache_c = fc.sum(axis=1) - fc[rows, tab.ch]
    cache_u = fu.sum(axis=1) - fu[rows, tab.ch]

    # advertiser-channel-day episodes
    o2 = np.lexsort((tab.seq, tab.ch, tab.adv, tab.day))
    tab = tab.take(o2)
    tot_spend, tot_clicks, cache_c, cache_u = (x[o2] for x in (tot_spend, tot_clicks, cache_c, cache_u))
    ep_start = segment_starts(tab.day, tab.adv, tab.ch)
    ch_spend = exclusive_cumsum(tab.charged, ep_start)
    alloc = np.asarray([allocations[(int(d), int(m))][int(p)] for d, m, p in zip(tab.day, tab.adv, tab.ch)],
                       dtype=np.float64) * budgets[tab.adv]

    S = low_states(alloc, tab.t / SECONDS_PER_DAY, ch_spend, tot_spend, tot_spend, tot_clicks,
                   quality[tab.ch] * tab.affinity, ctrs[tab.adv], cpcs[tab.adv], budgets[tab.adv],
                   cache_c, cache_u, tab.ch, P)
    terminal = np.zeros(len(tab), dtype=bool)
    if len(tab):
        terminal[:-1] = ep_start[1:]
        terminal[-1] = True
    nxt = np.roll(S, -1, axis=0)
    nxt[terminal] = S[terminal]
    return LowDataset(S, snap_ratio(tab.ratio, cfg.low_grid), tab.clicked.astype(np.float64), tab.charged.copy(),
                      nxt, terminal, alloc, budgets[tab.adv], P)


# ---------------------------------------------------------------------------
# Lambda augmentation
# ---------------------------------------------------------------------------

def augment_lambda(t: LowTransition, n: int, lambda_max: float,
                   rng: np.random.Generator) -> list[AugmentedLowTransition]:
    """``n`` copies of ``t`` with lambda ~ U[0, lambda_max].

    lambda / lambda_max is appended to both states (the allocation a_p^h / B_m
    is already the first state feature).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for lam in rng.uniform(0.0, lambda_max, size=n):
        lam = float(lam)
        tag = (lam / lambda_max,)
        out.append(AugmentedLowTransition(t.state + tag, t.action, t.reward, t.cost, t.next_state + tag,
                                          t.terminal, lam, t.reward - lam * t.cost))
    return out


@dataclass
class AugmentedLowDataset:
    """``n_repeat`` lambda-tagged copies of every base tuple, stored as indices."""

    base: LowDataset
    index: np.ndarray
    lam: np.ndarray
    lambda_max: float

    def __len__(self) -> int:
        return len(self.index)

    @property
    def shaped_rewards(self) -> np.ndarray:
        return self.base.rewards[self.index] - self.lam * self.base.costs[self.index]

    def get(self, j: int) -> AugmentedLowTransition:
        i = int(self.index[j])
        b = self.base
        t = LowTransition(tuple(b.states[i].tolist()), int(b.actions[i]), float(b.rewards[i]),
                          float(b.costs[i]), tuple(b.next_states[i].tolist()), bool(b.terminal[i]))
        lam = float(self.lam[j])
        tag = (lam / self.lambda_max,)
        return AugmentedLowTransition(t.state + tag, t.action, t.reward, t.cost, t.next_state + tag,
                                      t.terminal, lam, t.reward - lam * t.cost)


def augment_dataset(ds: LowDataset, n: int, lambda_max: float, rng: np.random.Generator) -> AugmentedLowDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = np.repeat(np.arange(len(ds)), n)
    return AugmentedLowDataset(ds, idx, rng.uniform(0.0, lambda_max, size=len(idx)), lambda_max)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class LowCurveRow:
    iteration: int
    l_q: float
    l_ood: float
    l_cost: float
    l_clicks: float


def eval_step(learner: QLearner, x: np.ndarray, actions: np.ndarray, y: np.ndarray, x_next: np.ndarray,
              terminal: np.ndarray, next_actions: np.ndarray, gamma: float, target_sync: int,
              limit: float) -> float:
    """TD step whose bootstrap action comes from the policy, not a max."""
    A = learner.q.spec.output_dim
    one_hot = np.arange(A)[None, :] == next_actions[:, None]
    row = learner.step(QBatch(x, actions, y, x_next, terminal, next_mask=one_hot), gamma, 1.0,
                       target_sync=target_sync, limit=limit)
    return row.l_q


@dataclass
class LowModel:
    q: MLP
    eval_c: MLP
    eval_u: MLP
    cvae: CVAE
    grid: np.ndarray
    lambda_max: float
    n_channels: int
    curve: list[LowCurveRow] = field(default_factory=list)

    def inputs(self, states: np.ndarray, lam: np.ndarray) -> np.ndarray:
        lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (states.shape[0],))
        return np.hstack([states, (lam / self.lambda_max)[:, None]])

    def meta(self) -> dict:
        return {"grid": self.grid.tolist(), "lambda_max": self.lambda_max, "n_channels": self.n_channels}

    def save(self, root: str | Path) -> None:
        root = Path(root)
        for sub, net in (("low", self.q), ("eval_c", self.eval_c), ("eval_u", self.eval_u)):
            save_net(root / sub / "q.json", net)
        (root / "low" / "meta.json").write_text(json.dumps(self.meta(), sort_keys=True))
        with open(root / "low" / "curve.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "L_Q", "L_OOD", "L_Qc", "L_Qu"])
            for r in self.curve:
                w.writerow([r.iteration, repr(r.l_q), repr(r.l_ood), repr(r.l_cost), repr(r.l_clicks)])
        self.cvae.save(root / "cvae_l" / "cvae.json")

    @classmethod
    def load(cls, root: str | Path) -> LowModel:
        root = Path(root)
        for f in ("low/q.json", "low/meta.json", "eval_c/q.json", "eval_u/q.json", "cvae_l/cvae.json"):
            if not (root / f).exists():
                raise FileNotFoundError(f"missing low-level checkpoint file {root / f}")
        meta = json.loads((root / "low" / "meta.json").read_text())
        return cls(load_net(root / "low" / "q.json"), load_net(root / "eval_c" / "q.json"),
                   load_net(root / "eval_u" / "q.json"), CVAE.load(root / "cvae_l" / "cvae.json"),
                   np.asarray(meta["grid"]), meta["lambda_max"], meta["n_channels"])


def train_low(aug: AugmentedLowDataset, cfg: TrainConfig) -> LowModel:
    ds = aug.base
    if len(aug) == 0:
        raise ValueError("low-level dataset is empty")
    rng = np.random.default_rng([cfg.seed, 0x4C])
    grid = np.asarray(cfg.low_grid)
    A = len(grid)
    d = ds.states.shape[1] + 1
    pol = QLearner(d, A, cfg.hidden, cfg.low_lr, rng)
    ec = QLearner(d, A, cfg.hidden, cfg.low_lr, rng)
    eu = QLearner(d, A, cfg.hidden, cfg.low_lr, rng)
    cvae = CVAE(ds.states.shape[1], tuple(grid), cfg.latent_dim, cfg.hidden, rng, cfg.cvae_lr)
    lm = aug.lambda_max
    B = min(cfg.low_batch_size, len(aug))
    curve = []
    for _ in range(cfg.low_iters):
        j = rng.integers(len(aug), size=B)
        i = aug.index[j]
        lam = aug.lam[j]
        S, S2 = ds.states[i], ds.next_states[i]
        x = np.hstack([S, (lam / lm)[:, None]])
        x2 = np.hstack([S2, (lam / lm)[:, None]])
        a, term = ds.actions[i], ds.terminal[i]
        cvae.train_step(S, a, rng)
        mu = cvae.sample_actions(S, cfg.n_mu_samples, rng)
        r = ds.rewards[i] - lam * ds.costs[i]
        row = pol.step(QBatch(x, a, r, x2, term), cfg.gamma_low, cfg.w1, cfg.w2, mu,
                       target_sync=cfg.target_sync, limit=cfg.divergence_limit)
        a2 = pol.q.predict(x2).argmax(axis=1)
        lc = eval_step(ec, x, a, ds.costs[i], x2, term, a2, cfg.gamma_low, cfg.target_sync, cfg.divergence_limit)
        lu = eval_step(eu, x, a, ds.rewards[i], x2, term, a2, cfg.gamma_low, cfg.target_sync,
                       cfg.divergence_limit)
        curve.append(LowCurveRow(row.iteration, row.l_q, row.l_ood, lc, lu))
    return LowModel(pol.q, ec.q, eu.q, cvae, grid, lm, ds.n_channels, curve)


# ---------------------------------------------------------------------------
# Serving: totals, caches, lambda selection, CPC-guided action selection
# ---------------------------------------------------------------------------

@dataclass
class RunningTotals:
    n_channels: int
    cost_to_date: float = 0.0
    clicks_to_date: int = 0
    channel_spend: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.channel_spend:
            self.channel_spend = [0.0] * self.n_channels

    def record(self, channel: int, cost: float, clicked: bool) -> None:
        if cost < 0:
            raise ValueError("cost must be >= 0")
        self.cost_to_date += cost
        self.clicks_to_date += int(clicked)
        self.channel_spend[channel] += cost

    def reset(self) -> None:
        self.cost_to_date = 0.0
        self.clicks_to_date = 0
        self.channel_spend = [0.0] * self.n_channels


@dataclass
class ChannelEstimateCache:
    n_channels: int
    cost: np.ndarray = None  # type: ignore[assignment]
    clicks: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.cost is None:
            self.cost = np.zeros(self.n_channels)
        if self.clicks is None:
            self.clicks = np.zeros(self.n_channels)

    def update(self, channel: int, est_cost: float, est_clicks: float) -> None:
        self.cost[channel] = est_cost
        self.clicks[channel] = est_clicks

    def others(self, channel: int) -> tuple[float, float]:
        return (float(self.cost.sum() - self.cost[channel]), float(self.clicks.sum() - self.clicks[channel]))


def lambda_grid(n_lambda: int, lambda_max: float) -> np.ndarray:
    if n_lambda < 1:
        raise ValueError("n_lambda must be >= 1")
    if n_lambda == 1:
        return np.asarray([lambda_max])
    return np.linspace(0.0, lambda_max, n_lambda)


def choose_lambda(est_cost: np.ndarray, est_clicks: np.ndarray, budget: np.ndarray) -> np.ndarray:
    """Per row, the index of the feasible column with most clicks; the last
    column (lambda_max) when no column is feasible."""
    est_cost = np.atleast_2d(est_cost)
    feas = est_cost <= np.asarray(budget, dtype=np.float64).reshape(-1, 1)
    score = np.where(feas, np.atleast_2d(est_clicks), -np.inf)
    idx = score.argmax(axis=1)
    return np.where(feas.any(axis=1), idx, est_cost.shape[1] - 1)


def policy_estimates(model: LowModel, states: np.ndarray, lams: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Q^l, Q^c and Q^u over (state, lambda) pairs: each (K, N_lambda, A)."""
    K, L = states.shape[0], len(lams)
    x = np.hstack([np.repeat(states, L, axis=0), np.tile(lams / model.lambda_max, K)[:, None]])
    shape = (K, L, -1)
    return (model.q.predict(x).reshape(shape), np.maximum(model.eval_c.predict(x), 0.0).reshape(shape),
            np.maximum(model.eval_u.predict(x), 0.0).reshape(shape))


def select_lambda(model: LowModel, state: np.ndarray, remaining_budget: float | np.ndarray,
                  n_lambda: int = 50, lambda_max: float | None = None) -> float | np.ndarray:
    """Multiplier that keeps expected future cost within the remaining
    allocation while maximising expected clicks."""
    lm = model.lambda_max if lambda_max is None else lambda_max
    lams = lambda_grid(n_lambda, lm)
    S = np.atleast_2d(state)
    q, qc, qu = policy_estimates(model, S, lams)
    pi = q.argmax(axis=2)
    c = np.take_along_axis(qc, pi[..., None], axis=2)[..., 0]
    u = np.take_along_axis(qu, pi[..., None], axis=2)[..., 0]
    out = lams[choose_lambda(c, u, np.broadcast_to(remaining_budget, (S.shape[0],)))]
    return float(out[0]) if np.ndim(state) == 1 else out


def cpc_pred(totals: RunningTotals, cache: ChannelEstimateCache, channel: int, est_cost: float,
             est_clicks: float) -> float:
    """Past plus expected future CPC; 0 when nothing has happened or is expected."""
    oc, ou = cache.others(channel)
    num = totals.cost_to_date + est_cost + oc
    den = totals.clicks_to_date + est_clicks + ou
    return num / den if den > 0 else 0.0


def cpc_pred_grid(cost_to_date: np.ndarray, clicks_to_date: np.ndarray, other_cost: np.ndarray,
                  other_clicks: np.ndarray, est_cost: np.ndarray, est_clicks: np.ndarray) -> np.ndarray:
    num = (cost_to_date + other_cost)[:, None] + est_cost
    den = (clicks_to_date + other_clicks)[:, None] + est_clicks
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def select_action(q_values: np.ndarray, preds: np.ndarray, cpc_set: float | np.ndarray) -> int | np.ndarray:
    """Greedy action among CPC-feasible ones, else the lowest predicted CPC."""
    single = np.ndim(q_values) == 1
    q = np.atleast_2d(q_values)
    p = np.atleast_2d(preds)
    ok = p <= np.asarray(cpc_set, dtype=np.float64).reshape(-1, 1)
    best = np.where(ok, q, NEG).argmax(axis=1)
    out = np.where(ok.any(axis=1), best, p.argmin(axis=1))
    return int(out[0]) if single else out


# ---------------------------------------------------------------------------
# MAPE of the discounted CPC predictor
# ---------------------------------------------------------------------------

@dataclass
class Trajectories:
    """Advertiser-day trajectories stored flat, rows grouped and time ordered."""

    traj: np.ndarray
    seq: np.ndarray
    ch: np.ndarray
    cost: np.ndarray
    clicks: np.ndarray
    n_channels: int

    @property
    def n(self) -> int:
        return int(self.traj.max()) + 1 if len(self.traj) else 0

    @classmethod
    def from_logs(cls, logs: Sequence[LogRecord] | LogTable, n_channels: int,
                  advertisers: Sequence[Advertiser] | None = None) -> Trajectories:
        if not isinstance(logs, LogTable):
            if advertisers is None:
                n_adv = max((r.advertiser_id for r in logs), default=-1) + 1
                advertisers = [Advertiser(i, 0, 1.0, 1.0, 0.0, 0.0, 0.0) for i in range(n_adv)]
            logs = LogTable.from_records(logs, advertisers)
        o = np.lexsort((logs.seq, logs.adv, logs.day))
        tab = logs.take(o)
        traj = np.cumsum(segment_starts(tab.day, tab.adv)) - 1
        return cls(traj, tab.seq, tab.ch, tab.charged, tab.clicked.astype(np.float64), n_channels)


@dataclass
class MapeResult:
    mape: dict[float, float]
    n_used: int
    n_excluded: int


def mape_gamma_sweep(trajs: Trajectories, gammas: Iterable[float]) -> MapeResult:
    """MAPE of the blended past/discounted-future CPC against realised CPC.

    Each trajectory's error is the mean over its decision points; trajectories
    without clicks are excluded.
    """
    starts = segment_starts(trajs.traj)
    past_c = exclusive_cumsum(trajs.cost, starts)
    past_u = exclusive_cumsum(trajs.clicks, starts)
    T = trajs.n
    tot_c = np.bincount(trajs.traj, weights=trajs.cost, minlength=T)
    tot_u = np.bincount(trajs.traj, weights=trajs.clicks, minlength=T)
    used = tot_u > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        real = np.where(used, tot_c / np.where(used, tot_u, 1.0), 0.0)
    res = {}
    rows_ok = used[trajs.traj]
    counts = np.bincount(trajs.traj, minlength=T)
    for g in gammas:
        fc, fu = future_by_channel(trajs.traj, trajs.seq, trajs.ch, [trajs.cost, trajs.clicks], float(g),
                                   trajs.n_channels)
        num = past_c + fc.sum(axis=1)
        den = past_u + fu.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            pred = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
            r = real[trajs.traj]
            err = np.where(rows_ok, np.abs(pred - r) / np.where(rows_ok, r, 1.0), 0.0)
        per = np.bincount(trajs.traj, weights=err, minlength=T) / np.maximum(counts, 1)
        res[float(g)] = float(per[used].mean()) if used.any() else 0.0
    return MapeResult(res, int(used.sum()), int(T - used.sum()))
