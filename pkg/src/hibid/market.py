"""Synthetic cross-channel ad market: advertisers, request streams, GSP/CPC
auctions, user feedback, and day-by-day policy replay.

Prices are quantised to ``SimConfig.price_tick`` (a power of two) so that all
spend totals are exact in binary floating point, whatever the summation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence

import numpy as np

from .domain import (
    SECONDS_PER_DAY,
    AdRequest,
    Advertiser,
    Channel,
    LogRecord,
    MetricsReport,
    dumps,
    log_record_from_json,
    log_record_to_json,
)


@dataclass(frozen=True)
class CategoryParams:
    """Gaussian (mean, sd) pairs for one advertiser category."""

    weight: float
    budget: tuple[float, float]
    cpc_target: tuple[float, float]
    ctr: tuple[float, float]
    cvr: tuple[float, float]
    gmv: tuple[float, float]

    def __post_init__(self) -> None:
        for name in ("budget", "cpc_target", "ctr", "cvr", "gmv"):
            pair = tuple(float(v) for v in getattr(self, name))
            if len(pair) != 2 or pair[1] < 0:
                raise ValueError(f"category {name} must be (mean, sd >= 0)")
            object.__setattr__(self, name, pair)
        if self.weight < 0:
            raise ValueError("category weight must be >= 0")


DEFAULT_CATEGORIES = (
    CategoryParams(0.30, (45.0, 12.0), (1.00, 0.15), (0.10, 0.02), (0.12, 0.03), (40.0, 10.0)),
    CategoryParams(0.25, (70.0, 18.0), (1.20, 0.20), (0.08, 0.02), (0.10, 0.03), (60.0, 15.0)),
    CategoryParams(0.25, (30.0, 8.0), (0.80, 0.12), (0.12, 0.03), (0.15, 0.04), (25.0, 6.0)),
    CategoryParams(0.20, (55.0, 15.0), (1.10, 0.18), (0.09, 0.02), (0.08, 0.02), (80.0, 20.0)),
)
DEFAULT_VOLUMES = (18000, 14000, 11000, 7000)
DEFAULT_QUALITY = (1.3, 1.0, 0.85, 1.15)
DEFAULT_PEAKS = (12.0, 19.0, 8.0, 21.0)
DEFAULT_USER_MIX = (
    (0.40, 0.30, 0.15, 0.15),
    (0.20, 0.20, 0.40, 0.20),
    (0.25, 0.25, 0.25, 0.25),
    (0.15, 0.35, 0.15, 0.35),
)


@dataclass(frozen=True)
class SimConfig:
    n_advertisers: int = 200
    n_channels: int = 4
    days: int = 4
    categories: tuple[CategoryParams, ...] = DEFAULT_CATEGORIES
    channel_volumes: tuple[int, ...] | None = None
    channel_quality: tuple[float, ...] | None = None
    channel_peaks: tuple[float, ...] | None = None
    arrival_profiles: tuple[tuple[float, ...], ...] | None = None
    channel_user_mix: tuple[tuple[float, ...], ...] | None = None
    reserve_price: float = 0.01
    retrieval_size: int = 10
    ctr_noise: float = 0.2
    affinity_match: float = 1.0
    affinity_other: float = 0.3
    gmv_noise: float = 0.25
    price_tick: float = 2.0 ** -14
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_channels < 2:
            raise ValueError("need at least two channels")
        if self.n_advertisers < 1 or self.days < 1:
            raise ValueError("n_advertisers and days must be >= 1")
        if self.reserve_price < 0:
            raise ValueError("reserve_price must be >= 0")
        if self.retrieval_size < 1:
            raise ValueError("retrieval_size must be >= 1")
        if self.ctr_noise < 0 or self.gmv_noise < 0:
            raise ValueError("noise sigmas must be >= 0")
        if not self.categories:
            raise ValueError("need at least one category")
        cats = tuple(c if isinstance(c, CategoryParams) else CategoryParams(**c) for c in self.categories)
        object.__setattr__(self, "categories", cats)
        if sum(c.weight for c in cats) <= 0:
            raise ValueError("category weights must not all be zero")
        mant, _ = math.frexp(self.price_tick)
        if self.price_tick <= 0 or mant != 0.5:
            raise ValueError("price_tick must be a positive power of two")
        P = self.n_channels
        for name in ("channel_volumes", "channel_quality", "channel_peaks",
                     "arrival_profiles", "channel_user_mix"):
            v = getattr(self, name)
            if v is not None:
                v = tuple(tuple(x) if isinstance(x, (list, tuple)) else x for x in v)
                if len(v) != P:
                    raise ValueError(f"{name} needs {P} entries")
                object.__setattr__(self, name, v)

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    def to_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SimConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SimConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "categories" in d:
            d["categories"] = tuple(CategoryParams(**c) if isinstance(c, dict) else c
                                    for c in d["categories"])
        return cls(**d)


def _cycle(values: Sequence, n: int) -> list:
    return [values[i % len(values)] for i in range(n)]


def peak_profile(peak_hour: float, width: float = 3.5, floor: float = 0.15) -> tuple[float, ...]:
    """A 24-bin daily arrival profile with a wrapped Gaussian bump."""
    h = np.arange(24) + 0.5
    d = np.minimum(np.abs(h - peak_hour), 24 - np.abs(h - peak_hour))
    w = floor + np.exp(-0.5 * (d / width) ** 2)
    w = w / w.sum()
    return tuple(float(x) for x in w)


def build_channels(cfg: SimConfig) -> list[Channel]:
    P = cfg.n_channels
    vols = cfg.channel_volumes or _cycle(DEFAULT_VOLUMES, P)
    qual = cfg.channel_quality or _cycle(DEFAULT_QUALITY, P)
    if cfg.arrival_profiles is not None:
        profiles = [tuple(float(x) / math.fsum(p) for x in p) for p in cfg.arrival_profiles]
    else:
        peaks = cfg.channel_peaks or _cycle(DEFAULT_PEAKS, P)
        profiles = [peak_profile(pk) for pk in peaks]
    return [Channel(p, int(vols[p]), profiles[p], float(qual[p])) for p in range(P)]


def user_mix(cfg: SimConfig) -> np.ndarray:
    C = cfg.n_categories
    if cfg.channel_user_mix is not None:
        mix = np.asarray(cfg.channel_user_mix, dtype=np.float64)
    else:
        rows = []
        for p in range(cfg.n_channels):
            base = np.asarray(DEFAULT_USER_MIX[p % len(DEFAULT_USER_MIX)], dtype=np.float64)
            rows.append(np.resize(base, C))
        mix = np.vstack(rows)
    if mix.shape != (cfg.n_channels, C) or (mix < 0).any():
        raise ValueError("channel_user_mix must be a nonnegative P x n_categories table")
    return mix / mix.sum(axis=1, keepdims=True)


def generate_advertisers(cfg: SimConfig) -> list[Advertiser]:
    rng = np.random.default_rng([cfg.seed, 0xAD])
    w = np.asarray([c.weight for c in cfg.categories], dtype=np.float64)
    cats = rng.choice(len(w), size=cfg.n_advertisers, p=w / w.sum())
    out = []

    def draw(pair: tuple[float, float], lo: float, hi: float = math.inf) -> float:
        v = pair[0] + pair[1] * rng.standard_normal()
        return float(min(max(v, lo), hi))

    for i, c in enumerate(cats):
        cp = cfg.categories[int(c)]
        out.append(Advertiser(
            id=i,
            category=int(c),
            daily_budget=draw(cp.budget, 1e-3 * max(cp.budget[0], 1e-9)),
            cpc_target=draw(cp.cpc_target, max(1e-3 * cp.cpc_target[0], 1e-6)),
            hist_ctr=draw(cp.ctr, 1e-4, 1.0),
            hist_cvr=draw(cp.cvr, 0.0, 1.0),
            hist_gmv_mean=draw(cp.gmv, 0.0),
        ))
    return out


def generate_requests(cfg: SimConfig, day: int) -> list[AdRequest]:
    if not 0 <= day < cfg.days:
        raise ValueError(f"day {day} outside 0..{cfg.days - 1}")
    rng = np.random.default_rng([cfg.seed, day, 1])
    channels = build_channels(cfg)
    mix = user_mix(cfg)
    C = cfg.n_categories
    affinity_rows = []
    for c in range(C):
        row = [cfg.affinity_other] * C
        row[c] = cfg.affinity_match
        affinity_rows.append(tuple(row))

    ts, chs, cats = [], [], []
    for ch in channels:
        n = ch.volume_per_day
        counts = rng.multinomial(n, ch.arrival_profile)
        hours = np.repeat(np.arange(24), counts)
        t = (hours + rng.random(n)) * 3600.0
        ts.append(np.minimum(t, np.nextafter(SECONDS_PER_DAY, 0)))
        chs.append(np.full(n, ch.id))
        cats.append(rng.choice(C, size=n, p=mix[ch.id]))
    t = np.concatenate(ts)
    c = np.concatenate(chs)
    u = np.concatenate(cats)
    order = np.lexsort((c, t))
    return [AdRequest(i, int(c[j]), float(t[j]), affinity_rows[int(u[j])])
            for i, j in enumerate(order)]


def quantize_price(x: float | np.ndarray, tick: float) -> float | np.ndarray:
    """Round to the nearest tick, never below one tick."""
    return np.maximum(np.round(np.asarray(x) / tick), 1.0) * tick


def tick_reserve(cfg: SimConfig) -> float:
    return float(math.ceil(cfg.reserve_price / cfg.price_tick) * cfg.price_tick)


@dataclass(frozen=True)
class AuctionOutcome:
    winner_id: int | None
    charged: float
    ranked: tuple[tuple[int, float], ...] = ()


def rank_bids(bids: dict[int, float], reserve: float = 0.0) -> list[tuple[int, float]]:
    """Bids at or above the reserve, descending by price, ties by ascending id."""
    return sorted(((a, p) for a, p in bids.items() if p >= reserve), key=lambda x: (-x[1], x[0]))


def run_auction(request: AdRequest, bids: dict[int, float], click_outcome: bool,
                reserve_price: float = 0.01) -> AuctionOutcome:
    """Single-slot GSP auction with CPC pricing.

    The winner pays nothing unless ``click_outcome``; otherwise it pays the
    second-highest bid, or the reserve when it was the only bidder.
    """
    if any(p <= 0 for p in bids.values()):
        raise ValueError("all bids must be > 0")
    ranked = rank_bids(bids, reserve_price)
    if not ranked:
        return AuctionOutcome(None, 0.0, ())
    winner, _ = ranked[0]
    if not click_outcome:
        return AuctionOutcome(winner, 0.0, tuple(ranked))
    second = ranked[1][1] if len(ranked) > 1 else reserve_price
    return AuctionOutcome(winner, max(second, reserve_price), tuple(ranked))


def click_probability(adv: Advertiser, channel: Channel, request: AdRequest) -> float:
    return min(max(adv.hist_ctr * channel.quality_factor * request.affinity(adv.category), 0.0), 1.0)


def feedback_from_draws(p_click: float, cvr: float, gmv_mean: float, gmv_sd: float,
                        u_click: float, u_order: float, z_amount: float) -> tuple[bool, bool, float]:
    clicked = u_click < p_click
    ordered = clicked and u_order < cvr
    amount = max(0.0, gmv_mean + gmv_sd * z_amount) if ordered else 0.0
    return clicked, ordered, amount


def sample_feedback(request: AdRequest, winner: Advertiser, channel: Channel,
                    rng: np.random.Generator, gmv_noise: float = 0.25) -> tuple[bool, bool, float]:
    u1, u2 = rng.random(2)
    z = rng.standard_normal()
    return feedback_from_draws(click_probability(winner, channel, request), winner.hist_cvr,
                               winner.hist_gmv_mean, gmv_noise * winner.hist_gmv_mean, u1, u2, z)


# ---------------------------------------------------------------------------
# Policies and replay
# ---------------------------------------------------------------------------

class BidPolicy(Protocol):
    def bid(self, request: AdRequest, candidates: Sequence[Advertiser]) -> np.ndarray:
        """Bid ratios aligned with ``candidates``."""
        ...


def snap_to_grid(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(values)[..., None] - grid).argmin(axis=-1)


class CtrBiddingPolicy:
    """Base logging policy: bid ratio = noisy predicted CTR over historical CTR."""

    def __init__(self, cfg: SimConfig, grid: Sequence[float] = tuple(0.5 + 0.05 * i for i in range(21))):
        self.cfg = cfg
        self.channels = build_channels(cfg)
        self.grid = np.asarray(grid, dtype=np.float64)
        self.rng = np.random.default_rng([cfg.seed, 0, 4])

    def start_day(self, day: int, advertisers: Sequence[Advertiser]) -> None:
        self.rng = np.random.default_rng([self.cfg.seed, day, 4])

    def bid(self, request: AdRequest, candidates: Sequence[Advertiser]) -> np.ndarray:
        q = self.channels[request.channel_id].quality_factor
        aff = np.fromiter((request.user_affinity[a.category] for a in candidates), float, len(candidates))
        noise = np.exp(self.cfg.ctr_noise * self.rng.standard_normal(len(candidates)))
        ratio = np.clip(q * aff * noise, self.grid[0], self.grid[-1])
        return self.grid[snap_to_grid(ratio, self.grid)]


class ReplayAborted(RuntimeError):
    pass


class LogSink(Protocol):
    def __call__(self, records: Sequence[LogRecord]) -> None: ...


class ListSink:
    def __init__(self) -> None:
        self.records: list[LogRecord] = []

    def __call__(self, records: Sequence[LogRecord]) -> None:
        self.records.extend(records)


class JsonlDaySink:
    """Writes one ``day_NNN.jsonl`` file per simulated day."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._fh = None
        self._day: int | None = None
        self.written = 0

    def __call__(self, records: Sequence[LogRecord]) -> None:
        for r in records:
            if r.day != self._day:
                self.close()
                self._day = r.day
                self._fh = open(self.out_dir / f"day_{r.day:03d}.jsonl", "w")
            self._fh.write(dumps(log_record_to_json(r)) + "\n")
            self.written += 1

    def mark_partial(self, reason: str) -> None:
        (self.out_dir / "PARTIAL").write_text(f"{reason}\nrecords_written={self.written}\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def replay(cfg: SimConfig, policy: BidPolicy, log_sink: LogSink | None = None,
           days: Iterable[int] | None = None,
           advertisers: Sequence[Advertiser] | None = None) -> MetricsReport:
    """Auction every request of every requested day in timestamp order.

    An advertiser whose remaining daily budget is below its bid price is
    dropped from that auction and leaves no log line.
    """
    from .metrics import MetricsAccumulator

    advertisers = list(advertisers) if advertisers is not None else generate_advertisers(cfg)
    channels = build_channels(cfg)
    n = len(advertisers)
    budgets = np.asarray([a.daily_budget for a in advertisers], dtype=np.float64)
    cpcs = np.asarray([a.cpc_target for a in advertisers], dtype=np.float64)
    reserve = tick_reserve(cfg)
    tick = cfg.price_tick
    k = min(cfg.retrieval_size, n)
    acc = MetricsAccumulator(advertisers)
    days = list(range(cfg.days)) if days is None else list(days)
    start_day = getattr(policy, "start_day", None)
    observe = getattr(policy, "observe", None)

    for day in days:
        requests = generate_requests(cfg, day)
        ret_rng = np.random.default_rng([cfg.seed, day, 2])
        draws = np.random.default_rng([cfg.seed, day, 3])
        U = draws.random((len(requests), 2))
        Z = draws.standard_normal(len(requests))
        spent = np.zeros(n)
        if start_day is not None:
            start_day(day, advertisers)
        for qi, req in enumerate(requests):
            idx = np.sort(ret_rng.choice(n, size=k, replace=False)) if k < n else np.arange(n)
            cands = [advertisers[i] for i in idx]
            ratios = np.asarray(policy.bid(req, cands), dtype=np.float64)
            prices = quantize_price(ratios * cpcs[idx], tick)
            ok = (budgets[idx] - spent[idx] >= prices) & (prices >= reserve)
            if not ok.any():
                if observe is not None:
                    observe(req, [])
                continue
            elig = np.flatnonzero(ok)
            ep = prices[elig]
            # argmax takes the first maximum, and idx is sorted, so ties go to the lowest id.
            w_local = elig[int(np.argmax(ep))]
            winner = advertisers[idx[w_local]]
            ch = channels[req.channel_id]
            clicked, ordered, amount = feedback_from_draws(
                click_probability(winner, ch, req), winner.hist_cvr, winner.hist_gmv_mean,
                cfg.gmv_noise * winner.hist_gmv_mean, U[qi, 0], U[qi, 1], Z[qi])
            charged = 0.0
            if clicked:
                rest = np.delete(ep, int(np.argmax(ep)))
                second = float(rest.max()) if rest.size else reserve
                charged = max(second, reserve)
                spent[idx[w_local]] += charged
            recs = []
            for j in elig:
                won = j == w_local
                a = advertisers[idx[j]]
                recs.append(LogRecord(req, a.id, float(ratios[j]), float(prices[j]), bool(won),
                                      charged if won else 0.0, bool(clicked and won),
                                      bool(ordered and won), amount if won else 0.0, day))
            acc.add(recs)
            if observe is not None:
                observe(req, recs)
            if log_sink is not None:
                try:
                    log_sink(recs)
                except OSError as exc:
                    if hasattr(log_sink, "mark_partial"):
                        log_sink.mark_partial(f"aborted on day {day} request {req.id}: {exc}")
                    raise ReplayAborted(f"log sink failed on day {day}: {exc}") from exc
    if log_sink is not None and hasattr(log_sink, "close"):
        log_sink.close()
    return acc.report()


# ---------------------------------------------------------------------------
# JSONL log files
# ---------------------------------------------------------------------------

class LogFormatError(ValueError):
    def __init__(self, path: str | Path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


def write_log(path: str | Path, records: Iterable[LogRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(dumps(log_record_to_json(r)) + "\n")


def read_log(path: str | Path) -> list[LogRecord]:
    out = []
    cache: dict = {}
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(log_record_from_json(json.loads(line), cache))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise LogFormatError(path, i, f"malformed log line ({exc})") from exc
    return out


def read_log_dir(path: str | Path, days: Iterable[int] | None = None) -> list[LogRecord]:
    path = Path(path)
    files = sorted(path.glob("day_*.jsonl"))
    if days is not None:
        wanted = {f"day_{d:03d}.jsonl" for d in days}
        files = [f for f in files if f.name in wanted]
    out: list[LogRecord] = []
    for f in files:
        out.extend(read_log(f))
    return out


def write_advertisers(path: str | Path, advertisers: Iterable[Advertiser]) -> None:
    with open(path, "w") as fh:
        for a in advertisers:
            fh.write(dumps(asdict(a)) + "\n")


def read_advertisers(path: str | Path) -> list[Advertiser]:
    with open(path) as fh:
        return [Advertiser(**json.loads(line)) for line in fh if line.strip()]
