"""Core value types shared by the simulator, the learners and the pipeline.

Everything here is an immutable value object.  Feature vectors are stored as
tuples so records stay hashable and round-trip through JSON exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

SECONDS_PER_DAY = 86400


@dataclass(frozen=True, slots=True)
class Advertiser:
    id: int
    category: int
    daily_budget: float
    cpc_target: float
    hist_ctr: float
    hist_cvr: float
    hist_gmv_mean: float

    def __post_init__(self) -> None:
        # A zero budget is allowed: it models a paused advertiser.
        if not self.daily_budget >= 0:
            raise ValueError(f"advertiser {self.id}: daily_budget must be >= 0")
        if not self.cpc_target > 0:
            raise ValueError(f"advertiser {self.id}: cpc_target must be > 0")
        for name in ("hist_ctr", "hist_cvr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"advertiser {self.id}: {name}={v} outside [0, 1]")


@dataclass(frozen=True, slots=True)
class Channel:
    id: int
    volume_per_day: int
    arrival_profile: tuple[float, ...]
    quality_factor: float

    def __post_init__(self) -> None:
        if self.volume_per_day <= 0:
            raise ValueError(f"channel {self.id}: volume_per_day must be > 0")
        if len(self.arrival_profile) != 24:
            raise ValueError(f"channel {self.id}: arrival_profile needs 24 weights")
        if any(w < 0 for w in self.arrival_profile):
            raise ValueError(f"channel {self.id}: negative arrival weight")
        if abs(math.fsum(self.arrival_profile) - 1.0) > 1e-9:
            raise ValueError(f"channel {self.id}: arrival_profile must sum to 1")
        if not self.quality_factor > 0:
            raise ValueError(f"channel {self.id}: quality_factor must be > 0")


@dataclass(frozen=True, slots=True)
class AdRequest:
    id: int
    channel_id: int
    timestamp: float
    user_affinity: tuple[float, ...]

    def __post_init__(self) -> None:
        if not 0.0 <= self.timestamp < SECONDS_PER_DAY:
            raise ValueError(f"request {self.id}: timestamp {self.timestamp} outside the day")

    def affinity(self, category: int) -> float:
        return self.user_affinity[category]


@dataclass(frozen=True, slots=True)
class LogRecord:
    """One advertiser's participation in one auction.

    ``day`` is the index of the simulated day the request belongs to; it is
    needed to group records into advertiser-day episodes.
    """

    request: AdRequest
    advertiser_id: int
    bid_ratio: float
    bid_price: float
    won: bool
    charged: float
    clicked: bool
    ordered: bool
    order_amount: float
    day: int = 0


def validate_log(record: LogRecord) -> list[str]:
    """Return every broken LogRecord invariant; an empty list means valid."""
    problems = []
    if record.charged < 0:
        problems.append("negative charge")
    if record.charged > 0 and not record.won:
        problems.append("charged without win")
    if record.charged > 0 and not record.clicked:
        problems.append("charged without click")
    if record.charged > record.bid_price:
        problems.append("charged exceeds bid")
    if record.clicked and not record.won:
        problems.append("clicked without win")
    if record.ordered and not record.clicked:
        problems.append("ordered without click")
    if record.order_amount < 0:
        problems.append("negative order amount")
    if record.order_amount > 0 and not record.ordered:
        problems.append("order amount without order")
    return problems


@dataclass(frozen=True, slots=True)
class HighTransition:
    """One channel-allocation step of an advertiser-day episode.

    ``impressions`` is carried alongside the reward so channel capacities can
    be computed from a batch.
    """

    state: tuple[float, ...]
    action: int
    reward: float
    cost: float
    next_state: tuple[float, ...]
    terminal: bool
    impressions: int = 0
    channel: int = 0

    def __post_init__(self) -> None:
        if self.reward < 0 or self.cost < 0:
            raise ValueError("high-level reward and cost must be nonnegative")
        if self.action < 0:
            raise ValueError("action index must be nonnegative")


@dataclass(frozen=True, slots=True)
class LowTransition:
    state: tuple[float, ...]
    action: int
    reward: float
    cost: float
    next_state: tuple[float, ...]
    terminal: bool

    def __post_init__(self) -> None:
        if self.reward not in (0.0, 1.0):
            raise ValueError("low-level reward must be 0 or 1")
        if self.cost < 0:
            raise ValueError("low-level cost must be nonnegative")
        if self.reward == 1.0 and not self.cost > 0:
            raise ValueError("a click reward implies a positive cost")


@dataclass(frozen=True, slots=True)
class AugmentedLowTransition:
    state: tuple[float, ...]
    action: int
    reward: float
    cost: float
    next_state: tuple[float, ...]
    terminal: bool
    lam: float
    shaped_reward: float

    @classmethod
    def from_transition(cls, t: LowTransition, lam: float) -> AugmentedLowTransition:
        return cls(t.state, t.action, t.reward, t.cost, t.next_state, t.terminal,
                   lam, t.reward - lam * t.cost)


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters for both levels.

    The first block mirrors the published defaults; everything after
    ``high_grid_step`` is a local choice.
    """

    high_batch_size: int = 4096
    low_batch_size: int = 1024
    high_lr: float = 1e-5
    low_lr: float = 1e-5
    gamma_high: float = 1.0
    gamma_low: float = 0.999
    w1: float = 1.0
    w2: float = 0.05
    wb: float = 0.1
    lambda_max: float = 1.45
    n_repeat: int = 30
    n_lambda: int = 50
    a_min: float = 0.5
    a_max: float = 1.5
    high_interval_days: int = 1
    eps_fraction: float = 0.01

    high_grid_step: float = 0.05
    low_grid_size: int = 21
    beta: float = 2.0
    target_sync: int = 100
    seed: int = 0
    hidden: tuple[int, ...] = (128, 128, 128)
    latent_dim: int = 4
    n_mu_samples: int = 10
    cvae_lr: float = 1e-3
    high_iters: int = 2000
    low_iters: int = 2000
    soft_cost_form: str = "softmax"
    budget_operand: str = "remaining"
    high_reward_scale: float | None = None
    divergence_limit: float = 1e6

    def __post_init__(self) -> None:
        if not self.lambda_max > 0:
            raise ValueError("lambda_max must be > 0")
        if self.low_grid_size < 1 or not 0 < self.high_grid_step <= 1:
            raise ValueError("action grids must be nonempty")
        if self.a_min > self.a_max:
            raise ValueError("a_min must not exceed a_max")
        if self.n_repeat < 1 or self.n_lambda < 1:
            raise ValueError("n_repeat and n_lambda must be >= 1")
        if self.soft_cost_form not in ("softmax", "literal"):
            raise ValueError(f"unknown soft_cost_form {self.soft_cost_form!r}")
        if self.budget_operand not in ("remaining", "full"):
            raise ValueError(f"unknown budget_operand {self.budget_operand!r}")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    @property
    def high_grid(self) -> tuple[float, ...]:
        n = int(round(1.0 / self.high_grid_step))
        return tuple(i / n for i in range(n + 1))

    @property
    def low_grid(self) -> tuple[float, ...]:
        n = self.low_grid_size
        if n == 1:
            return (self.a_min,)
        step = (self.a_max - self.a_min) / (n - 1)
        return tuple(self.a_min + i * step for i in range(n))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes: Any) -> TrainConfig:
        return replace(self, **changes)


@dataclass
class MetricsReport:
    impr: int = 0
    clicks: int = 0
    cost: float = 0.0
    cpc: float = 0.0
    csr: float = 1.0
    roi: float = 0.0
    capacity_satisfactory_ratio: float = 1.0
    budget_satisfactory_ratio: float = 1.0
    channel_cost: dict[int, float] = field(default_factory=dict)
    channel_kappa_deviation: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["channel_cost"] = {str(k): v for k, v in self.channel_cost.items()}
        d["channel_kappa_deviation"] = {str(k): v for k, v in self.channel_kappa_deviation.items()}
        return d


# ---------------------------------------------------------------------------
# JSONL schemas
# ---------------------------------------------------------------------------

def log_record_to_json(r: LogRecord) -> dict[str, Any]:
    q = r.request
    return {
        "day": r.day,
        "request": {
            "id": q.id,
            "channel_id": q.channel_id,
            "timestamp": q.timestamp,
            "user_affinity": list(q.user_affinity),
        },
        "advertiser_id": r.advertiser_id,
        "bid_ratio": r.bid_ratio,
        "bid_price": r.bid_price,
        "won": r.won,
        "charged": r.charged,
        "clicked": r.clicked,
        "ordered": r.ordered,
        "order_amount": r.order_amount,
    }


def log_record_from_json(d: dict[str, Any], _requests: dict | None = None) -> LogRecord:
    q = d["request"]
    key = (d["day"], q["id"])
    req = _requests.get(key) if _requests is not None else None
    if req is None:
        req = AdRequest(int(q["id"]), int(q["channel_id"]), float(q["timestamp"]),
                        tuple(float(v) for v in q["user_affinity"]))
        if _requests is not None:
            _requests[key] = req
    return LogRecord(
        request=req,
        advertiser_id=int(d["advertiser_id"]),
        bid_ratio=float(d["bid_ratio"]),
        bid_price=float(d["bid_price"]),
        won=bool(d["won"]),
        charged=float(d["charged"]),
        clicked=bool(d["clicked"]),
        ordered=bool(d["ordered"]),
        order_amount=float(d["order_amount"]),
        day=int(d["day"]),
    )


def transition_to_json(t: HighTransition | LowTransition | AugmentedLowTransition) -> dict[str, Any]:
    d = asdict(t)
    d["state"] = list(t.state)
    d["next_state"] = list(t.next_state)
    return d


def high_transition_from_json(d: dict[str, Any]) -> HighTransition:
    return HighTransition(tuple(d["state"]), int(d["action"]), float(d["reward"]), float(d["cost"]),
                          tuple(d["next_state"]), bool(d["terminal"]),
                          int(d.get("impressions", 0)), int(d.get("channel", 0)))


def low_transition_from_json(d: dict[str, Any]) -> LowTransition:
    return LowTransition(tuple(d["state"]), int(d["action"]), float(d["reward"]), float(d["cost"]),
                         tuple(d["next_state"]), bool(d["terminal"]))


def dumps(obj: dict[str, Any]) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=False)
