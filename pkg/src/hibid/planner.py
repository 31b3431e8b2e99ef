"""High-level budget-allocation planner.

Each advertiser-day is an episode of P steps, one per channel in id order.
The action is a budget percentage on a fixed grid; the reward is the
channel's clicks.  Training is conservative fitted Q-learning:

    w1 * L_td + w2 * L_ood + wb * L_batch

where the OOD term compares the greedy action against behaviour-policy
samples from a CVAE, and the batch term pulls the softly-greedy per-channel
spend towards the channel's historical capacity kappa.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cvae import CVAE
from .domain import Advertiser, HighTransition, LogRecord, TrainConfig
from .neural import MLP, Adam, NetSpec, load_net, net_from_dict, net_to_dict, save_net, sync_target

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ChannelCapacity:
    kappa: float
    epsilon: float

    def __post_init__(self) -> None:
        if self.kappa < 0 or self.epsilon < 0:
            raise ValueError("kappa and epsilon must be >= 0")


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

N_ADV_BASE = 5


def advertiser_features(adv: Advertiser, n_categories: int) -> np.ndarray:
    """Scaled historical statistics plus a category one-hot."""
    f = np.zeros(N_ADV_BASE + n_categories)
    f[:N_ADV_BASE] = (adv.daily_budget / 100.0, adv.cpc_target, adv.hist_ctr * 10.0,
                      adv.hist_cvr * 10.0, adv.hist_gmv_mean / 100.0)
    f[N_ADV_BASE + adv.category] = 1.0
    return f


def high_state_dim(n_channels: int, n_adv_features: int) -> int:
    return 2 + n_channels + n_adv_features


def high_states(alloc_units: np.ndarray, n_units: int, step: int, n_channels: int,
                adv_feats: np.ndarray) -> np.ndarray:
    """States for a batch of advertisers at channel ``step``.

    Layout: [allocated fraction, remaining fraction, channel one-hot, advertiser features].
    ``step == n_channels`` encodes the post-terminal state (no channel bit set).
    """
    adv_feats = np.atleast_2d(adv_feats)
    M = adv_feats.shape[0]
    out = np.zeros((M, high_state_dim(n_channels, adv_feats.shape[1])))
    done = np.asarray(alloc_units, dtype=np.float64) / n_units
    out[:, 0] = done
    out[:, 1] = 1.0 - done
    if step < n_channels:
        out[:, 2 + step] = 1.0
    out[:, 2 + n_channels:] = adv_feats
    return out


def feasible_mask(remaining_units: np.ndarray, n_actions: int) -> np.ndarray:
    return np.arange(n_actions)[None, :] <= np.asarray(remaining_units)[:, None]


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass
class HighDataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray
    impressions: np.ndarray
    channel: np.ndarray
    budget: np.ndarray
    remaining_units: np.ndarray
    next_remaining_units: np.ndarray
    day: np.ndarray
    advertiser: np.ndarray
    n_channels: int
    n_units: int

    def __len__(self) -> int:
        return len(self.actions)

    def subset(self, idx: np.ndarray) -> HighDataset:
        kw = {k: getattr(self, k)[idx] for k in ARRAY_FIELDS}
        return HighDataset(**kw, n_channels=self.n_channels, n_units=self.n_units)

    def to_transitions(self) -> list[HighTransition]:
        return [HighTransition(tuple(self.states[i].tolist()), int(self.actions[i]),
                               float(self.rewards[i]), float(self.costs[i]),
                               tuple(self.next_states[i].tolist()), bool(self.terminal[i]),
                               int(self.impressions[i]), int(self.channel[i]))
                for i in range(len(self))]


ARRAY_FIELDS = ("states", "actions", "rewards", "costs", "next_states", "terminal", "impressions",
                "channel", "budget", "remaining_units", "next_remaining_units", "day", "advertiser")


def grid_units(step: float) -> int:
    return int(round(1.0 / step))


def snap_fraction(frac: np.ndarray, n_units: int) -> np.ndarray:
    return np.rint(np.asarray(frac) * n_units).astype(np.int64)


def channel_totals(logs: Iterable[LogRecord], n_advertisers: int, n_channels: int,
                   days: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per (day, advertiser, channel) spend, clicks and impressions."""
    pos = {d: i for i, d in enumerate(days)}
    shape = (len(days), n_advertisers, n_channels)
    spend, clicks, impr = np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=np.int64)
    for r in logs:
        if not r.won:
            continue
        k = (pos[r.day], r.advertiser_id, r.request.channel_id)
        impr[k] += 1
        if r.clicked:
            clicks[k] += 1
            spend[k] += r.charged
    return spend, clicks, impr


def episodes_from_totals(spend: np.ndarray, clicks: np.ndarray, impr: np.ndarray,
                         advertisers: Sequence[Advertiser], days: Sequence[int], n_categories: int,
                         n_units: int) -> HighDataset:
    D, M, P = spend.shape
    feats = np.vstack([advertiser_features(a, n_categories) for a in advertisers])
    budgets = np.asarray([a.daily_budget for a in advertisers], dtype=np.float64)
    cols: dict[str, list] = {k: [] for k in ARRAY_FIELDS}
    for di, d in enumerate(days):
        done = np.zeros(M, dtype=np.int64)
        for p in range(P):
            rem = n_units - done
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(budgets > 0, spend[di, :, p] / np.where(budgets > 0, budgets, 1.0), 0.0)
            act = np.minimum(snap_fraction(frac, n_units), rem)
            s = high_states(done, n_units, p, P, feats)
            nd = done + act
            ns = high_states(nd, n_units, p + 1, P, feats)
            cols["states"].append(s)
            cols["actions"].append(act)
            cols["rewards"].append(clicks[di, :, p])
            cols["costs"].append(spend[di, :, p])
            cols["next_states"].append(ns)
            cols["terminal"].append(np.full(M, p == P - 1))
            cols["impressions"].append(impr[di, :, p])
            cols["channel"].append(np.full(M, p))
            cols["budget"].append(budgets)
            cols["remaining_units"].append(rem)
            cols["next_remaining_units"].append(n_units - nd)
            cols["day"].append(np.full(M, d))
            cols["advertiser"].append(np.asarray([a.id for a in advertisers]))
            done = nd
    # order: advertiser-day episodes, channel steps contiguous
    arrays = {k: np.concatenate(v) if k not in ("states", "next_states") else np.vstack(v)
              for k, v in cols.items()}
    order = np.lexsort((arrays["channel"], arrays["advertiser"], arrays["day"]))
    return HighDataset(**{k: v[order] for k, v in arrays.items()}, n_channels=P, n_units=n_units)


def build_high_dataset(logs: Sequence[LogRecord], advertisers: Sequence[Advertiser], n_channels: int,
                       n_categories: int, cfg: TrainConfig = TrainConfig(),
                       days: Sequence[int] | None = None) -> HighDataset:
    """One P-step episode per advertiser-day.

    The action is the realised channel spend as a budget fraction, snapped to
    the nearest grid point and clipped to what is still unallocated.
    """
    if days is None:
        days = sorted({r.day for r in logs})
    if not days:
        raise ValueError("logs cover no days")
    ids = [a.id for a in advertisers]
    if ids != list(range(len(ids))):
        raise ValueError("advertiser ids must be 0..M-1 in order")
    spend, clicks, impr = channel_totals(logs, len(advertisers), n_channels, days)
    return episodes_from_totals(spend, clicks, impr, advertisers, days, n_categories,
                                grid_units(cfg.high_grid_step))


def kappa_arrays(channel: np.ndarray, clicks: np.ndarray, costs: np.ndarray, impressions: np.ndarray,
                 n_channels: int) -> np.ndarray:
    """Per-channel mean CTR x mean CPC x impressions over a batch."""
    imp = np.bincount(channel, weights=impressions, minlength=n_channels)
    clk = np.bincount(channel, weights=clicks, minlength=n_channels)
    cst = np.bincount(channel, weights=costs, minlength=n_channels)
    with np.errstate(divide="ignore", invalid="ignore"):
        ctr = np.where(imp > 0, clk / np.where(imp > 0, imp, 1), 0.0)
        cpc = np.where(clk > 0, cst / np.where(clk > 0, clk, 1), 0.0)
    return ctr * cpc * imp


def compute_kappa(batch: Sequence[HighTransition] | HighDataset, n_channels: int | None = None,
                  eps_fraction: float = 0.01) -> dict[int, ChannelCapacity]:
    if isinstance(batch, HighDataset):
        ch, clk, cst, imp = batch.channel, batch.rewards, batch.costs, batch.impressions
        P = n_channels or batch.n_channels
    else:
        if not batch:
            raise ValueError("compute_kappa needs a nonempty batch")
        ch = np.asarray([t.channel for t in batch])
        clk = np.asarray([t.reward for t in batch], dtype=np.float64)
        cst = np.asarray([t.cost for t in batch], dtype=np.float64)
        imp = np.asarray([t.impressions for t in batch], dtype=np.float64)
        P = n_channels or int(ch.max()) + 1
    k = kappa_arrays(ch, clk, cst, imp, P)
    present = set(np.unique(ch).tolist())
    for p in range(P):
        if p not in present:
            log.warning("channel %d absent from batch; kappa set to 0", p)
    return {p: ChannelCapacity(float(k[p]), eps_fraction * float(k[p])) for p in range(P)}


def counterfactual_costs(costs: np.ndarray, actions: np.ndarray, budget: np.ndarray,
                         grid: np.ndarray) -> np.ndarray:
    """Cost of every grid action, scaling the logged spend per budget unit.

    When the logged action is 0 no rate is observable; the allocation is
    assumed to be spent in full.
    """
    g = grid[None, :]
    a = grid[actions][:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = costs[:, None] * g / np.where(a > 0, a, 1.0)
    return np.where(a > 0, scaled, g * budget[:, None])


# ---------------------------------------------------------------------------
# Losses on Q-value arrays; each returns (loss, dL/dQ)
# ---------------------------------------------------------------------------

NEG = -1e30


def masked_max(q: np.ndarray, mask: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    qm = q if mask is None else np.where(mask, q, NEG)
    idx = qm.argmax(axis=1)
    return qm[np.arange(len(q)), idx], idx


def td_loss_q(q: np.ndarray, q_next: np.ndarray, actions: np.ndarray, rewards: np.ndarray,
              terminal: np.ndarray, gamma: float, next_mask: np.ndarray | None = None
              ) -> tuple[float, np.ndarray]:
    """Mean of (r + gamma * max_a' Q'(s', a') - Q(s, a))^2; Q' is held fixed."""
    B = len(actions)
    nxt, _ = masked_max(q_next, next_mask)
    target = rewards + gamma * np.where(terminal, 0.0, nxt)
    rows = np.arange(B)
    err = q[rows, actions] - target
    dq = np.zeros_like(q)
    dq[rows, actions] = 2.0 * err / B
    return float(np.mean(err * err)), dq


def ood_loss_q(q: np.ndarray, mu_actions: np.ndarray, mask: np.ndarray | None = None
               ) -> tuple[float, np.ndarray]:
    """Mean of (max over sampled behaviour actions of Q - Q at the greedy action)^2.

    Both terms carry gradient.
    """
    B = q.shape[0]
    rows = np.arange(B)
    qmu = q[rows[:, None], mu_actions]
    j = qmu.argmax(axis=1)
    a_mu = mu_actions[rows, j]
    q_pi, a_pi = masked_max(q, mask)
    diff = q[rows, a_mu] - q_pi
    dq = np.zeros_like(q)
    g = 2.0 * diff / B
    np.add.at(dq, (rows, a_mu), g)
    np.add.at(dq, (rows, a_pi), -g)
    return float(np.mean(diff * diff)), dq


def _softmax(z: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_cost_q(q: np.ndarray, costs: np.ndarray, beta: float, mask: np.ndarray | None = None,
                form: str = "softmax") -> tuple[np.ndarray, np.ndarray]:
    """Per-state soft cost and its derivative with respect to each Q entry.

    ``softmax``: sum_a softmax(beta Q)_a Cost(a).
    ``literal``: sum_a exp(beta Q_a Cost(a)) / sum_a exp(beta Q_a).
    """
    if beta <= 0:
        raise ValueError("beta must be > 0")
    q = np.atleast_2d(q)
    costs = np.atleast_2d(costs)
    if form == "softmax":
        pi = _softmax(beta * q, mask)
        s = np.sum(pi * costs, axis=1)
        return s, beta * pi * (costs - s[:, None])
    if form == "literal":
        zq = beta * q
        zc = beta * q * costs
        if mask is not None:
            zq = np.where(mask, zq, -np.inf)
            zc = np.where(mask, zc, -np.inf)
        mq = zq.max(axis=1, keepdims=True)
        logZ = mq[:, 0] + np.log(np.exp(zq - mq).sum(axis=1))
        ratio = np.exp(zc - logZ[:, None])
        s = ratio.sum(axis=1)
        pi = np.exp(zq - logZ[:, None])
        return s, beta * costs * ratio - beta * s[:, None] * pi
    raise ValueError(f"unknown soft cost form {form!r}")


def soft_cost(q_values: np.ndarray, costs: np.ndarray, beta: float, mask: np.ndarray | None = None,
              form: str = "softmax") -> float:
    m = None if mask is None else np.atleast_2d(mask)
    s, _ = soft_cost_q(np.atleast_2d(q_values), np.atleast_2d(costs), beta, m, form)
    return float(s[0])


def batch_loss_q(q: np.ndarray, costs: np.ndarray, channel: np.ndarray, kappa: np.ndarray,
                 beta: float, mask: np.ndarray | None = None, form: str = "softmax",
                 scale: float = 1.0) -> tuple[float, np.ndarray]:
    """sum_p (sum of soft costs on channel p - kappa_p)^2, costs divided by ``scale``."""
    s, ds = soft_cost_q(q, costs / scale, beta, mask, form)
    P = len(kappa)
    tot = np.bincount(channel, weights=s, minlength=P)
    dev = tot - np.asarray(kappa) / scale
    return float(np.sum(dev * dev)), 2.0 * dev[channel][:, None] * ds


# ---------------------------------------------------------------------------
# Network-level wrappers
# ---------------------------------------------------------------------------

@dataclass
class QBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray
    mask: np.ndarray | None = None
    next_mask: np.ndarray | None = None
    costs: np.ndarray | None = None
    channel: np.ndarray | None = None


def td_loss(q_net: MLP, target_net: MLP, batch: QBatch, gamma: float) -> tuple[float, list[np.ndarray]]:
    q = q_net.forward(batch.states)
    loss, dq = td_loss_q(q, target_net.predict(batch.next_states), batch.actions, batch.rewards,
                         batch.terminal, gamma, batch.next_mask)
    return loss, q_net.backward(dq)[0]


def ood_loss(q_net: MLP, mu_actions: np.ndarray, states: np.ndarray,
             mask: np.ndarray | None = None) -> tuple[float, list[np.ndarray]]:
    q = q_net.forward(states)
    loss, dq = ood_loss_q(q, mu_actions, mask)
    return loss, q_net.backward(dq)[0]


def batch_loss(q_net: MLP, batch: QBatch, kappa: np.ndarray, beta: float, form: str = "softmax",
               scale: float = 1.0) -> tuple[float, list[np.ndarray]]:
    q = q_net.forward(batch.states)
    loss, dq = batch_loss_q(q, batch.costs, batch.channel, kappa, beta, batch.mask, form, scale)
    return loss, q_net.backward(dq)[0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class CurveRow:
    iteration: int
    l_q: float
    l_ood: float
    l_batch: float


def write_curve(path: str | Path, rows: Sequence[CurveRow], header=("iteration", "L_Q", "L_OOD", "L_Batch")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r.iteration, repr(r.l_q), repr(r.l_ood), repr(r.l_batch)])


class QLearner:
    """One conservative Q-network with its target copy and optimizer.

    Shared by both levels: the caller supplies the batch, any behaviour
    samples, and (optionally) the batch-loss terms.
    """

    def __init__(self, state_dim: int, n_actions: int, hidden: Sequence[int], lr: float,
                 rng: np.random.Generator):
        self.q = MLP(NetSpec(state_dim, tuple(hidden), n_actions), rng)
        self.target = sync_target(self.q)
        self.opt = Adam(self.q.params, lr)
        self.updates = 0
        self.syncs = 0

    def step(self, batch: QBatch, gamma: float, w1: float, w2: float = 0.0,
             mu_actions: np.ndarray | None = None, wb: float = 0.0, kappa: np.ndarray | None = None,
             beta: float = 1.0, form: str = "softmax", cost_scale: float = 1.0,
             target_sync: int = 100, limit: float = math.inf) -> CurveRow:
        q = self.q.forward(batch.states)
        l_td, dq = td_loss_q(q, self.target.predict(batch.next_states), batch.actions, batch.rewards,
                             batch.terminal, gamma, batch.next_mask)
        total = w1 * dq
        l_ood = l_b = 0.0
        if w2 and mu_actions is not None:
            l_ood, d = ood_loss_q(q, mu_actions, batch.mask)
            total += w2 * d
        if wb and kappa is not None:
            l_b, d = batch_loss_q(q, batch.costs, batch.channel, kappa, beta, batch.mask, form, cost_scale)
            total += wb * d
        weighted = w1 * l_td + w2 * l_ood + wb * l_b
        if not math.isfinite(weighted) or weighted > limit:
            raise TrainingDiverged(f"loss {weighted:.6g} exceeded {limit:g} at update {self.updates}")
        grads, _ = self.q.backward(total)
        self.opt.step(self.q.params, grads)
        self.updates += 1
        if self.updates % target_sync == 0:
            sync_target(self.q, self.target)
            self.syncs += 1
        return CurveRow(self.updates, l_td, l_ood, l_b)


def fitted_q(states: np.ndarray, actions: np.ndarray, rewards: np.ndarray, next_states: np.ndarray,
             terminal: np.ndarray, n_actions: int, gamma: float, iters: int, lr: float = 1e-3,
             hidden: Sequence[int] = (32, 32), batch_size: int = 64, target_sync: int = 100,
             seed: int = 0) -> tuple[QLearner, list[CurveRow]]:
    """Plain fitted Q-iteration with a target network."""
    rng = np.random.default_rng(seed)
    learner = QLearner(states.shape[1], n_actions, hidden, lr, rng)
    curve = []
    n = len(actions)
    for _ in range(iters):
        idx = rng.integers(n, size=batch_size)
        b = QBatch(states[idx], actions[idx], rewards[idx], next_states[idx], terminal[idx])
        curve.append(learner.step(b, gamma, 1.0, target_sync=target_sync))
    return learner, curve


@dataclass
class HighModel:
    q: MLP
    target: MLP
    cvae: CVAE
    n_channels: int
    n_units: int
    reward_scale: float
    cost_scale: float
    curve: list[CurveRow] = field(default_factory=list)

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.n_units + 1) / self.n_units

    def meta(self) -> dict:
        return {"n_channels": self.n_channels, "n_units": self.n_units,
                "reward_scale": self.reward_scale, "cost_scale": self.cost_scale}

    def save(self, out_dir: str | Path, cvae_dir: str | Path | None = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_net(out / "q.json", self.q)
        save_net(out / "target.json", self.target)
        (out / "meta.json").write_text(json.dumps(self.meta(), sort_keys=True))
        write_curve(out / "curve.csv", self.curve)
        self.cvae.save(Path(cvae_dir or out.parent / "cvae_h") / "cvae.json")

    @classmethod
    def load(cls, out_dir: str | Path, cvae_dir: str | Path | None = None) -> HighModel:
        out = Path(out_dir)
        for name in ("q.json", "target.json", "meta.json"):
            if not (out / name).exists():
                raise FileNotFoundError(f"missing high-level checkpoint file {out / name}")
        meta = json.loads((out / "meta.json").read_text())
        return cls(load_net(out / "q.json"), load_net(out / "target.json"),
                   CVAE.load(Path(cvae_dir or out.parent / "cvae_h") / "cvae.json"),
                   meta["n_channels"], meta["n_units"], meta["reward_scale"], meta["cost_scale"])


def auto_reward_scale(ds: HighDataset) -> float:
    P = ds.n_channels
    per_episode = ds.rewards.sum() / max(len(ds) / P, 1)
    return 1.0 / per_episode if per_episode > 0 else 1.0


def train_high(ds: HighDataset, cfg: TrainConfig, curve_path: str | Path | None = None) -> HighModel:
    if len(ds) == 0:
        raise ValueError("high-level dataset is empty")
    rng = np.random.default_rng([cfg.seed, 0x41])
    A = ds.n_units + 1
    grid = np.arange(A) / ds.n_units
    learner = QLearner(ds.states.shape[1], A, cfg.hidden, cfg.high_lr, rng)
    cvae = CVAE(ds.states.shape[1], tuple(grid), cfg.latent_dim, cfg.hidden, rng, cfg.cvae_lr)
    rs = cfg.high_reward_scale or auto_reward_scale(ds)
    kap_all = kappa_arrays(ds.channel, ds.rewards, ds.costs, ds.impressions, ds.n_channels)
    cost_scale = float(kap_all.mean()) * min(cfg.high_batch_size, len(ds)) / len(ds) or 1.0
    n = len(ds)
    curve = []
    for _ in range(cfg.high_iters):
        idx = rng.integers(n, size=min(cfg.high_batch_size, n))
        cvae.train_step(ds.states[idx], ds.actions[idx], rng)
        mask = feasible_mask(ds.remaining_units[idx], A)
        b = QBatch(ds.states[idx], ds.actions[idx], ds.rewards[idx] * rs, ds.next_states[idx],
                   ds.terminal[idx], mask, feasible_mask(ds.next_remaining_units[idx], A),
                   counterfactual_costs(ds.costs[idx], ds.actions[idx], ds.budget[idx], grid),
                   ds.channel[idx])
        mu = np.minimum(cvae.sample_actions(b.states, cfg.n_mu_samples, rng),
                        ds.remaining_units[idx][:, None])
        kap = kappa_arrays(b.channel, ds.rewards[idx], ds.costs[idx], ds.impressions[idx], ds.n_channels)
        curve.append(learner.step(b, cfg.gamma_high, cfg.w1, cfg.w2, mu, cfg.wb, kap, cfg.beta,
                                  cfg.soft_cost_form, cost_scale, cfg.target_sync, cfg.divergence_limit))
    model = HighModel(learner.q, learner.target, cvae, ds.n_channels, ds.n_units, rs, cost_scale, curve)
    if curve_path is not None:
        write_curve(curve_path, curve)
    return model


# ---------------------------------------------------------------------------
# Allocation
# ---------------------------------------------------------------------------

def allocate_budget(q_net: MLP, adv_feats: np.ndarray, n_channels: int, n_units: int,
                    remaining_fraction: float | np.ndarray = 1.0) -> np.ndarray:
    """Sequential masked argmax over channels; returns budget fractions.

    Works on one advertiser (1-D features) or a batch (rows).
    """
    single = np.ndim(adv_feats) == 1
    feats = np.atleast_2d(adv_feats)
    rem_frac = np.broadcast_to(np.asarray(remaining_fraction, dtype=np.float64), (feats.shape[0],))
    if ((rem_frac < 0) | (rem_frac > 1)).any():
        raise ValueError("remaining_fraction must lie in [0, 1]")
    rem = np.floor(rem_frac * n_units + 1e-9).astype(np.int64)
    done = n_units - rem
    out = np.zeros((feats.shape[0], n_channels), dtype=np.int64)
    for p in range(n_channels):
        q = q_net.predict(high_states(done, n_units, p, n_channels, feats))
        _, a = masked_max(q, feasible_mask(n_units - done, n_units + 1))
        out[:, p] = a
        done = done + a
    frac = out / n_units
    return frac[0] if single else frac


def planner_cost_deviation(q_net: MLP, ds: HighDataset, adv_feats: np.ndarray) -> np.ndarray:
    """Per-channel |sum of planner-allocated spend - kappa| on a dataset.

    The planner allocates every advertiser-day in ``ds`` from scratch; spend for
    a chosen allocation uses the logged channel's cost per budget unit.
    """
    P, U = ds.n_channels, ds.n_units
    grid = np.arange(U + 1) / U
    kap = kappa_arrays(ds.channel, ds.rewards, ds.costs, ds.impressions, P)
    units = np.rint(allocate_budget(q_net, adv_feats, P, U) * U).astype(np.int64)
    cf = counterfactual_costs(ds.costs, ds.actions, ds.budget, grid)
    chosen = units[ds.advertiser, ds.channel]
    spend = np.bincount(ds.channel, weights=cf[np.arange(len(ds)), chosen], minlength=P)
    return np.abs(spend - kap)
