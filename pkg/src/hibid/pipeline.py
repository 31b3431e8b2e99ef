"""Offline training, online prediction, evaluation, baselines and the
small-instance allocation oracle."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .domain import SECONDS_PER_DAY, AdRequest, Advertiser, LogRecord, MetricsReport, TrainConfig
from .executor import (LowDataset, LowModel, LogTable, augment_dataset, build_low_dataset,
                       cpc_pred_grid, choose_lambda, lambda_grid, low_states, policy_estimates,
                       select_action)
from .market import SimConfig, build_channels, generate_advertisers
from .metrics import MetricsAccumulator, compute_metrics, normalized_deltas, reference_kappa
from .planner import (HighModel, QBatch, QLearner, advertiser_features, allocate_budget,
                      build_high_dataset, episodes_from_totals, train_high)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig = SimConfig()
    train: TrainConfig = TrainConfig()
    train_days: tuple[int, ...] = (0, 1, 2)
    eval_days: tuple[int, ...] = (3,)
    baseline: str = "base"
    out_dir: str = "runs"

    def __post_init__(self) -> None:
        object.__setattr__(self, "train_days", tuple(self.train_days))
        object.__setattr__(self, "eval_days", tuple(self.eval_days))
        if set(self.train_days) & set(self.eval_days):
            raise ValueError("train and eval days must be disjoint")
        if any(not 0 <= d < self.sim.days for d in self.train_days + self.eval_days):
            raise ValueError("split days must lie within the simulated days")
        if self.baseline not in ("base", "pid", "flat"):
            raise ValueError(f"unknown baseline {self.baseline!r}")

    def to_dict(self) -> dict[str, Any]:
        return {"sim": self.sim.to_dict(), "train": self.train.to_dict(), "train_days": list(self.train_days),
                "eval_days": list(self.eval_days), "baseline": self.baseline, "out_dir": self.out_dir}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ExperimentConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "sim" in d:
            d["sim"] = SimConfig.from_dict(d["sim"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Offline training
# ---------------------------------------------------------------------------

@dataclass
class TrainedBundle:
    high: HighModel
    low: LowModel
    report: dict[str, Any]

    def save(self, root: str | Path) -> None:
        root = Path(root)
        self.high.save(root / "high", root / "cvae_h")
        self.low.save(root)
        (root / "report.json").write_text(json.dumps(self.report, sort_keys=True, indent=1))

    @classmethod
    def load(cls, root: str | Path) -> TrainedBundle:
        root = Path(root)
        return cls(HighModel.load(root / "high", root / "cvae_h"), LowModel.load(root), {})


def adv_feature_matrix(advertisers: Sequence[Advertiser], n_categories: int) -> np.ndarray:
    return np.vstack([advertiser_features(a, n_categories) for a in advertisers])


def planner_allocations(high: HighModel, advertisers: Sequence[Advertiser], n_categories: int,
                        days: Sequence[int]) -> dict[tuple[int, int], tuple[float, ...]]:
    """Day-start allocation fractions for every advertiser-day."""
    frac = allocate_budget(high.q, adv_feature_matrix(advertisers, n_categories), high.n_channels, high.n_units)
    return {(d, a.id): tuple(float(x) for x in frac[i]) for d in days for i, a in enumerate(advertisers)}


def train_offline(cfg: ExperimentConfig, logs: Sequence[LogRecord], advertisers: Sequence[Advertiser],
                  high: HighModel | None = None) -> TrainedBundle:
    """High level first, then the lambda-augmented low level."""
    sim, tc = cfg.sim, cfg.train
    channels = build_channels(sim)
    days = list(cfg.train_days)
    logs = [r for r in logs if r.day in set(days)]
    try:
        ds_h = build_high_dataset(logs, advertisers, sim.n_channels, sim.n_categories, tc, days)
    except Exception as exc:
        raise PipelineError("high-dataset", exc) from exc
    if high is None:
        try:
            high = train_high(ds_h, tc)
        except Exception as exc:
            raise PipelineError("train-high", exc) from exc
    try:
        alloc = planner_allocations(high, advertisers, sim.n_categories, days)
        ds_l = build_low_dataset(logs, advertisers, channels, alloc, tc)
        aug = augment_dataset(ds_l, tc.n_repeat, tc.lambda_max, np.random.default_rng([tc.seed, 0x41, 0x47]))
    except Exception as exc:
        raise PipelineError("low-dataset", exc) from exc
    try:
        low = train_low_model(aug, tc)
    except Exception as exc:
        raise PipelineError("train-low", exc) from exc
    report = {"high_transitions": len(ds_h), "low_transitions": len(ds_l), "augmented_transitions": len(aug),
              "n_repeat": tc.n_repeat, "high_final": asdict(high.curve[-1]) if high.curve else None,
              "low_final": asdict(low.curve[-1]) if low.curve else None}
    return TrainedBundle(high, low, report)


def train_low_model(aug, tc: TrainConfig) -> LowModel:
    from .executor import train_low
    return train_low(aug, tc)


# ---------------------------------------------------------------------------
# Online prediction
# ---------------------------------------------------------------------------

TRACE_STEPS = ("features", "allocate", "lambda", "cpc_pred", "action")


class HiBidPolicy:
    """Per request: features, cached allocation, lambda, predicted CPC, bid.

    ``use_lambda_selection=False`` pins lambda to ``fixed_lambda``;
    ``use_cpc_as=False`` bids the plain greedy action.
    """

    def __init__(self, sim: SimConfig, tc: TrainConfig, bundle: TrainedBundle,
                 advertisers: Sequence[Advertiser], use_lambda_selection: bool = True,
                 fixed_lambda: float = 0.0, use_cpc_as: bool = True, trace: bool = False):
        self.sim, self.tc = sim, tc
        self.high, self.low = bundle.high, bundle.low
        self.adv = list(advertisers)
        self.P = sim.n_channels
        self.quality = np.asarray([c.quality_factor for c in build_channels(sim)])
        self.feats = adv_feature_matrix(self.adv, sim.n_categories)
        self.budget = np.asarray([a.daily_budget for a in self.adv])
        self.cpc = np.asarray([a.cpc_target for a in self.adv])
        self.ctr = np.asarray([a.hist_ctr for a in self.adv])
        self.cat = np.asarray([a.category for a in self.adv])
        self.use_lambda_selection = use_lambda_selection
        self.fixed_lambda = fixed_lambda
        self.use_cpc_as = use_cpc_as
        self.lams = lambda_grid(tc.n_lambda, self.low.lambda_max)
        self.grid = self.low.grid
        self.trace_enabled = trace
        self.trace: list[tuple[int, int, str]] = []
        self.allocations: dict[tuple[int, int], tuple[float, ...]] = {}
        self.last: dict[int, tuple[float, float, float]] = {}
        self.start_day(0, self.adv)

    def start_day(self, day: int, advertisers: Sequence[Advertiser] | None = None) -> None:
        M, P = len(self.adv), self.P
        self.day = day
        self.cost = np.zeros(M)
        self.clicks = np.zeros(M)
        self.ch_spend = np.zeros((M, P))
        self.cache_c = np.zeros((M, P))
        self.cache_u = np.zeros((M, P))
        self.alloc = np.zeros((M, P))
        self.alloc_done = np.zeros(M, dtype=bool)

    def _allocate(self, idx: np.ndarray) -> None:
        todo = idx[~self.alloc_done[idx]]
        if todo.size:
            frac = np.atleast_2d(allocate_budget(self.high.q, self.feats[todo], self.P, self.high.n_units))
            self.alloc[todo] = frac * self.budget[todo, None]
            self.alloc_done[todo] = True
            for m, f in zip(todo, frac):
                self.allocations[(self.day, int(m))] = tuple(float(x) for x in f * self.budget[m])

    def _trace(self, rid: int, idx: np.ndarray, step: str) -> None:
        if self.trace_enabled:
            self.trace.extend((rid, int(m), step) for m in idx)

    def bid(self, request: AdRequest, candidates: Sequence[Advertiser]) -> np.ndarray:
        idx = np.asarray([a.id for a in candidates], dtype=np.int64)
        p = request.channel_id
        rid = request.id
        self._trace(rid, idx, "features")
        self._allocate(idx)
        self._trace(rid, idx, "allocate")
        K = len(idx)
        oc = self.cache_c[idx].sum(axis=1) - self.cache_c[idx, p]
        ou = self.cache_u[idx].sum(axis=1) - self.cache_u[idx, p]
        aff = np.asarray(request.user_affinity)[self.cat[idx]]
        S = low_states(self.alloc[idx, p], np.full(K, request.timestamp / SECONDS_PER_DAY), self.ch_spend[idx, p],
                       self.cost[idx], self.cost[idx], self.clicks[idx], self.quality[p] * aff, self.ctr[idx],
                       self.cpc[idx], self.budget[idx], oc, ou, np.full(K, p), self.P)
        rows = np.arange(K)
        if self.use_lambda_selection:
            q, qc, qu = policy_estimates(self.low, S, self.lams)
            pi = q.argmax(axis=2)
            c_pi = np.take_along_axis(qc, pi[..., None], axis=2)[..., 0]
            u_pi = np.take_along_axis(qu, pi[..., None], axis=2)[..., 0]
            if self.tc.budget_operand == "remaining":
                room = np.maximum(self.alloc[idx, p] - self.ch_spend[idx, p], 0.0)
            else:
                room = self.alloc[idx, p]
            li = choose_lambda(c_pi, u_pi, room)
            lam = self.lams[li]
            q, qc, qu = q[rows, li], qc[rows, li], qu[rows, li]
        else:
            lam = np.full(K, self.fixed_lambda)
            q, qc, qu = (x[:, 0] for x in policy_estimates(self.low, S, np.asarray([self.fixed_lambda])))
        self._trace(rid, idx, "lambda")
        preds = cpc_pred_grid(self.cost[idx], self.clicks[idx], oc, ou, qc, qu)
        self._trace(rid, idx, "cpc_pred")
        if self.use_cpc_as:
            act = select_action(q, preds, self.cpc[idx])
        else:
            act = q.argmax(axis=1)
        self._trace(rid, idx, "action")
        self.cache_c[idx, p] = qc[rows, act]
        self.cache_u[idx, p] = qu[rows, act]
        for k, m in enumerate(idx):
            self.last[int(m)] = (float(self.grid[act[k]]), float(lam[k]), float(preds[k, act[k]]))
        return self.grid[act]

    def observe(self, request: AdRequest, records: Sequence[LogRecord]) -> None:
        p = request.channel_id
        for r in records:
            if r.charged:
                m = r.advertiser_id
                self.cost[m] += r.charged
                self.clicks[m] += 1
                self.ch_spend[m, p] += r.charged


def predict_online(sim: SimConfig, tc: TrainConfig, bundle: TrainedBundle, advertisers: Sequence[Advertiser],
                   days: Sequence[int], **flags) -> tuple[list[LogRecord], HiBidPolicy]:
    from .market import ListSink, replay
    pol = HiBidPolicy(sim, tc, bundle, advertisers, **flags)
    sink = ListSink()
    replay(sim, pol, sink, days=days, advertisers=advertisers)
    return sink.records, pol


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class Evaluation:
    report: MetricsReport
    reference: MetricsReport
    deltas: dict[str, float]

    def to_dict(self) -> dict[str, Any]:
        return {"report": self.report.to_dict(), "reference": self.reference.to_dict(), "normalized": self.deltas}


def evaluate(logs: Sequence[LogRecord], reference_logs: Sequence[LogRecord], advertisers: Sequence[Advertiser],
             allocations=None, eps_fraction: float = 0.01) -> Evaluation:
    """Metrics against channel capacities taken from the reference logs."""
    kap = reference_kappa(reference_logs, advertisers)
    rep = compute_metrics(logs, advertisers, kap, allocations, eps_fraction)
    ref = compute_metrics(reference_logs, advertisers, kap, None, eps_fraction)
    return Evaluation(rep, ref, normalized_deltas(rep, ref))


# ---------------------------------------------------------------------------
# PID baseline
# ---------------------------------------------------------------------------

@dataclass
class PidState:
    kp: float = 0.4
    ki: float = 0.05
    kd: float = 0.1
    integral: float = 0.0
    last_error: float = 0.0
    multiplier: float = 1.0
    a_min: float = 0.5
    a_max: float = 1.5
    integral_limit: float = 20.0


def pid_bid(state: PidState, realized_cpc: float, cpc_set: float) -> float:
    """Update ``state`` in place with the normalised CPC error and return the ratio."""
    e = (cpc_set - realized_cpc) / cpc_set
    state.integral = min(max(state.integral + e, -state.integral_limit), state.integral_limit)
    d = e - state.last_error
    state.last_error = e
    u = 1.0 + state.kp * e + state.ki * state.integral + state.kd * d
    state.multiplier = min(max(u, state.a_min), state.a_max)
    return state.multiplier


class PidPolicy:
    def __init__(self, advertisers: Sequence[Advertiser], tc: TrainConfig = TrainConfig(),
                 gains: tuple[float, float, float] = (0.4, 0.05, 0.1)):
        self.adv = list(advertisers)
        self.tc, self.gains = tc, gains
        self.start_day(0)

    def start_day(self, day: int, advertisers=None) -> None:
        kp, ki, kd = self.gains
        self.states = [PidState(kp, ki, kd, a_min=self.tc.a_min, a_max=self.tc.a_max) for _ in self.adv]
        self.cost = np.zeros(len(self.adv))
        self.clicks = np.zeros(len(self.adv))

    def bid(self, request: AdRequest, candidates: Sequence[Advertiser]) -> np.ndarray:
        out = np.empty(len(candidates))
        for k, a in enumerate(candidates):
            m = a.id
            real = self.cost[m] / self.clicks[m] if self.clicks[m] else 0.0
            out[k] = pid_bid(self.states[m], real, a.cpc_target)
        return out

    def observe(self, request: AdRequest, records: Sequence[LogRecord]) -> None:
        for r in records:
            if r.charged:
                self.cost[r.advertiser_id] += r.charged
                self.clicks[r.advertiser_id] += 1


def pid_stationary_stream(n_requests: int = 10_000, cpc_target: float = 1.0, ctr: float = 0.1,
                          competitor_median: float = 1.1, competitor_sigma: float = 0.25, seed: int = 0,
                          state: PidState | None = None) -> tuple[float, list[float]]:
    """One PID bidder against a stationary lognormal highest competing bid.

    Returns the realised CPC and the emitted ratios.
    """
    rng = np.random.default_rng(seed)
    comp = cpc_target * competitor_median * np.exp(competitor_sigma * rng.standard_normal(n_requests))
    clicks = rng.random(n_requests) < ctr
    st = state or PidState()
    cost = 0.0
    n_clicks = 0
    ratios = []
    for i in range(n_requests):
        real = cost / n_clicks if n_clicks else 0.0
        u = pid_bid(st, real, cpc_target)
        ratios.append(u)
        if u * cpc_target > comp[i] and clicks[i]:
            cost += comp[i]
            n_clicks += 1
    return (cost / n_clicks if n_clicks else 0.0), ratios


# ---------------------------------------------------------------------------
# Flat shaped-reward baseline
# ---------------------------------------------------------------------------

def shaped_reward_baseline(r, c, cpc_set, mean_cpc, w_x: float = 1.35, w_y: float = 1.31):
    """(1 + w_x * mean_cpc * (1 + CPC_set)) * r - w_y * c."""
    return (1.0 + w_x * mean_cpc * (1.0 + cpc_set)) * r - w_y * c


@dataclass
class FlatModel:
    q: Any
    grid: np.ndarray


def train_flat(ds: LowDataset, tc: TrainConfig, w_x: float = 1.35, w_y: float = 1.31) -> FlatModel:
    """Single-level agent on the shaped reward; no lambda, no CPC masking."""
    rng = np.random.default_rng([tc.seed, 0x46])
    grid = np.asarray(tc.low_grid)
    learner = QLearner(ds.states.shape[1], len(grid), tc.hidden, tc.low_lr, rng)
    clicks = ds.rewards.sum()
    mean_cpc = ds.costs.sum() / clicks if clicks else 0.0
    r = shaped_reward_baseline(ds.rewards, ds.costs, ds.states[:, 8], mean_cpc, w_x, w_y)
    B = min(tc.low_batch_size, len(ds))
    for _ in range(tc.low_iters):
        i = rng.integers(len(ds), size=B)
        learner.step(QBatch(ds.states[i], ds.actions[i], r[i], ds.next_states[i], ds.terminal[i]),
                     tc.gamma_low, 1.0, target_sync=tc.target_sync, limit=tc.divergence_limit)
    return FlatModel(learner.q, grid)


class FlatPolicy:
    def __init__(self, sim: SimConfig, model: FlatModel, advertisers: Sequence[Advertiser]):
        self.model, self.P = model, sim.n_channels
        self.adv = list(advertisers)
        self.quality = np.asarray([c.quality_factor for c in build_channels(sim)])
        self.budget = np.asarray([a.daily_budget for a in self.adv])
        self.cpc = np.asarray([a.cpc_target for a in self.adv])
        self.ctr = np.asarray([a.hist_ctr for a in self.adv])
        self.cat = np.asarray([a.category for a in self.adv])
        self.start_day(0)

    def start_day(self, day: int, advertisers=None) -> None:
        M = len(self.adv)
        self.cost, self.clicks, self.ch_spend = np.zeros(M), np.zeros(M), np.zeros((M, self.P))

    def bid(self, request: AdRequest, candidates: Sequence[Advertiser]) -> np.ndarray:
        idx = np.asarray([a.id for a in candidates])
        K, p = len(idx), request.channel_id
        aff = np.asarray(request.user_affinity)[self.cat[idx]]
        z = np.zeros(K)
        S = low_states(self.budget[idx], np.full(K, request.timestamp / SECONDS_PER_DAY), self.ch_spend[idx, p],
                       self.cost[idx], self.cost[idx], self.clicks[idx], self.quality[p] * aff, self.ctr[idx],
                       self.cpc[idx], self.budget[idx], z, z, np.full(K, p), self.P)
        return self.model.grid[self.model.q.predict(S).argmax(axis=1)]

    def observe(self, request: AdRequest, records: Sequence[LogRecord]) -> None:
        for r in records:
            if r.charged:
                self.cost[r.advertiser_id] += r.charged
                self.clicks[r.advertiser_id] += 1
                self.ch_spend[r.advertiser_id, request.channel_id] += r.charged


# ---------------------------------------------------------------------------
# Small-instance allocation oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleInstance:
    """Deterministic market: channel p offers ``impressions[p]`` identical
    impressions; advertiser m bids ``bids[m]``, can reach at most
    ``audience[m][p]`` of them, and gets ``ctr[m] * quality[p]`` expected
    clicks per impression won."""

    budgets: tuple[float, ...]
    bids: tuple[float, ...]
    ctr: tuple[float, ...]
    quality: tuple[float, ...]
    impressions: tuple[float, ...]
    floor: tuple[float, ...] = ()
    audience: tuple[tuple[float, ...], ...] = ()
    reserve: float = 0.01

    def floor_price(self, p: int) -> float:
        """Outside competition on channel p: the lowest price a click can clear at."""
        return max(self.floor[p] if self.floor else 0.0, self.reserve)

    @property
    def n_advertisers(self) -> int:
        return len(self.budgets)

    @property
    def n_channels(self) -> int:
        return len(self.quality)

    def advertisers(self) -> list[Advertiser]:
        """Each advertiser is its own category, so planner states tell them apart."""
        return [Advertiser(m, m, self.budgets[m], self.bids[m], min(self.ctr[m], 1.0), 0.0, 0.0)
                for m in range(self.n_advertisers)]


def allocation_options(n_channels: int, n_units: int) -> np.ndarray:
    """Every per-channel unit vector with total <= n_units, descending lexicographic."""
    opts = [c for c in itertools.product(range(n_units, -1, -1), repeat=n_channels) if sum(c) <= n_units]
    return np.asarray(opts, dtype=np.int64)


def fluid_execute(inst: OracleInstance, alloc: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Expected clicks, spend and impressions for allocations ``alloc`` of
    shape (C, M, P) in budget fractions.

    The instance's advertisers are price takers: an outside bid sets the
    clearing price per click on each channel (the floor), and bids below it
    never win.  Within a channel the highest bidder (ties by id) with
    allocation left takes impressions until its allocation, its reachable
    audience or the channel's inventory runs out; the next one continues on
    what is left.
    """
    alloc = np.asarray(alloc, dtype=np.float64)
    C, M, P = alloc.shape
    budgets = np.asarray(inst.budgets)
    bids = np.asarray(inst.bids)
    order = sorted(range(M), key=lambda m: (-bids[m], m))
    clicks = np.zeros((C, M, P))
    spend = np.zeros((C, M, P))
    impr = np.zeros((C, M, P))
    for p in range(P):
        X = alloc[:, :, p] * budgets[None, :]
        R = np.full(C, float(inst.impressions[p]))
        price = inst.floor_price(p)
        for m in order:
            if bids[m] < price:
                continue
            cpi = min(inst.ctr[m] * inst.quality[p], 1.0)
            charge = cpi * price
            active = X[:, m] > 0
            cap = X[:, m] / charge if charge > 0 else np.full(C, np.inf)
            if inst.audience:
                cap = np.minimum(cap, inst.audience[m][p])
            n = np.where(active, np.minimum(R, cap), 0.0)
            impr[:, m, p] = n
            clicks[:, m, p] = n * cpi
            spend[:, m, p] = n * charge
            R = R - n
    return clicks, spend, impr


@dataclass
class OracleResult:
    allocation: np.ndarray
    clicks: float
    n_combinations: int


def brute_force_alloc(inst: OracleInstance, n_units: int = 5, max_combinations: int = 10**7,
                      chunk: int = 200_000) -> OracleResult:
    """Exhaustive joint search over grid allocations; the first optimum in
    descending lexicographic order (advertiser 0 most significant) wins ties."""
    opts = allocation_options(inst.n_channels, n_units)
    K, M = len(opts), inst.n_advertisers
    total = K ** M
    if total > max_combinations:
        raise ValueError(f"instance too large: {total} combinations > {max_combinations}")
    best_val, best_idx = -np.inf, 0
    vals_all = np.empty(total)
    for start in range(0, total, chunk):
        ks = np.arange(start, min(start + chunk, total))
        digits = np.stack(np.unravel_index(ks, (K,) * M), axis=1)
        frac = opts[digits] / n_units
        c, _, _ = fluid_execute(inst, frac)
        vals_all[start:start + len(ks)] = c.sum(axis=(1, 2))
    best_val = vals_all.max()
    tol = 1e-9 * max(1.0, abs(best_val))
    best_idx = int(np.flatnonzero(vals_all >= best_val - tol)[0])
    digits = np.unravel_index(best_idx, (K,) * M)
    return OracleResult(opts[list(digits)] / n_units, float(vals_all[best_idx]), total)


def random_oracle_instance(rng: np.random.Generator, n_advertisers: int, n_channels: int = 2) -> OracleInstance:
    quality = rng.uniform(0.6, 1.4, n_channels)
    floor = rng.uniform(0.4, 0.9, n_channels)
    bids = rng.uniform(0.9, 1.5, n_advertisers)
    ctr = rng.uniform(0.05, 0.2, n_advertisers)
    audience = rng.uniform(40, 160, (n_advertisers, n_channels))
    # inventory covers most of the combined audience, so coupling stays mild
    imps = audience.sum(axis=0) * rng.uniform(0.7, 1.0, n_channels)
    # a budget buys 40-90% of the advertiser's reachable clicks at the floor
    reach_cost = (audience * ctr[:, None] * quality[None, :] * floor[None, :]).sum(axis=1)
    budgets = rng.uniform(0.4, 0.9, n_advertisers) * reach_cost
    r = lambda x: tuple(float(round(v, 6)) for v in x)
    return OracleInstance(r(budgets), r(bids), r(ctr), r(quality), r(imps), r(floor),
                          tuple(r(row) for row in audience))


def oracle_dataset(inst: OracleInstance, n_days: int, n_units: int, rng: np.random.Generator):
    """Behaviour logs: every advertiser-day draws a uniform random grid allocation."""
    opts = allocation_options(inst.n_channels, n_units)
    pick = rng.integers(len(opts), size=(n_days, inst.n_advertisers))
    frac = opts[pick] / n_units
    clicks, spend, impr = fluid_execute(inst, frac)
    advs = inst.advertisers()
    return episodes_from_totals(spend, clicks, impr, advs, list(range(n_days)), len(advs), n_units), advs


@dataclass
class OracleComparison:
    planner_clicks: float
    optimal_clicks: float
    planner_allocation: np.ndarray
    optimal_allocation: np.ndarray

    @property
    def gap(self) -> float:
        return abs(self.optimal_clicks - self.planner_clicks) / self.optimal_clicks if self.optimal_clicks else 0.0


def oracle_compare(inst: OracleInstance, tc: TrainConfig, n_days: int = 300, n_units: int = 5) -> OracleComparison:
    tc = tc.replace(high_grid_step=1.0 / n_units)
    ds, advs = oracle_dataset(inst, n_days, n_units, np.random.default_rng([tc.seed, 0x0C]))
    model = train_high(ds, tc)
    frac = allocate_budget(model.q, adv_feature_matrix(advs, len(advs)), inst.n_channels, n_units)
    clicks, _, _ = fluid_execute(inst, frac[None])
    opt = brute_force_alloc(inst, n_units)
    return OracleComparison(float(clicks.sum()), opt.clicks, frac, opt.allocation)
