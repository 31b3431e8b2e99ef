"""Offline evaluation metrics over auction logs."""

from __future__ import annotations

from collections import defaultdict
from typing import Iterable, Mapping, Sequence

from .domain import Advertiser, LogRecord, MetricsReport

# (day, advertiser_id) -> per-channel allocated budget in currency
Allocations = Mapping[tuple[int, int], Sequence[float]]
# (day, channel) -> capacity in currency
Kappa = Mapping[tuple[int, int], float]


class MetricsAccumulator:
    def __init__(self, advertisers: Iterable[Advertiser]):
        self.adv = {a.id: a for a in advertisers}
        self.impr = 0
        self.clicks = 0
        self.cost = 0.0
        self.orders = 0.0
        self.ad_cost: dict[tuple[int, int], float] = defaultdict(float)
        self.ad_clicks: dict[tuple[int, int], int] = defaultdict(int)
        self.ad_ch_cost: dict[tuple[int, int, int], float] = defaultdict(float)
        self.ch_cost: dict[tuple[int, int], float] = defaultdict(float)
        self.ch_impr: dict[tuple[int, int], int] = defaultdict(int)
        self.ch_clicks: dict[tuple[int, int], int] = defaultdict(int)
        self.days: set[int] = set()
        self.channels: set[int] = set()

    def add(self, records: Iterable[LogRecord]) -> None:
        for r in records:
            key = (r.day, r.advertiser_id)
            ch = r.request.channel_id
            self.days.add(r.day)
            self.channels.add(ch)
            self.ad_cost[key] += 0.0
            if not r.won:
                continue
            self.impr += 1
            self.ch_impr[(r.day, ch)] += 1
            if r.clicked:
                self.clicks += 1
                self.ad_clicks[key] += 1
                self.ch_clicks[(r.day, ch)] += 1
            if r.charged:
                self.cost += r.charged
                self.ad_cost[key] += r.charged
                self.ad_ch_cost[(r.day, r.advertiser_id, ch)] += r.charged
                self.ch_cost[(r.day, ch)] += r.charged
            self.orders += r.order_amount

    def kappa(self) -> dict[tuple[int, int], float]:
        """Channel capacity as historical CTR x CPC x impressions per channel-day."""
        out = {}
        for key, n in self.ch_impr.items():
            c = self.ch_clicks[key]
            ctr = c / n if n else 0.0
            cpc = self.ch_cost[key] / c if c else 0.0
            out[key] = ctr * cpc * n
        return out

    def report(self, kappa: Kappa | None = None, allocations: Allocations | None = None,
               eps_fraction: float = 0.01, channels: Iterable[int] | None = None) -> MetricsReport:
        sat = []
        for key, cost in self.ad_cost.items():
            clicks = self.ad_clicks.get(key, 0)
            target = self.adv[key[1]].cpc_target
            sat.append(cost == 0.0 if clicks == 0 else cost / clicks <= target)
        csr = sum(sat) / len(sat) if sat else 1.0

        chans = sorted(set(channels) if channels is not None else self.channels)
        days = sorted(self.days | ({d for d, _ in kappa} if kappa else set()))
        kap = dict(kappa) if kappa is not None else self.kappa()
        dev: dict[int, float] = {}
        ok = []
        for p in chans:
            devs = []
            for d in days:
                k = kap.get((d, p), 0.0)
                e = abs(self.ch_cost.get((d, p), 0.0) - k)
                devs.append(e)
                ok.append(e <= eps_fraction * k)
            dev[p] = sum(devs) / len(devs) if devs else 0.0
        cap = sum(ok) / len(ok) if ok else 1.0

        if allocations is not None:
            bud = []
            for (d, m), alloc in allocations.items():
                for p, a in enumerate(alloc):
                    bud.append(self.ad_ch_cost.get((d, m, p), 0.0) <= a + 1e-9)
        else:
            bud = [c <= self.adv[m].daily_budget + 1e-9 for (d, m), c in self.ad_cost.items()]
        bsr = sum(bud) / len(bud) if bud else 1.0

        ch_total: dict[int, float] = {p: 0.0 for p in chans}
        for (d, p), c in self.ch_cost.items():
            ch_total[p] = ch_total.get(p, 0.0) + c
        return MetricsReport(
            impr=self.impr, clicks=self.clicks, cost=self.cost,
            cpc=self.cost / self.clicks if self.clicks else 0.0,
            csr=csr, roi=float(self.orders / self.cost) if self.cost else 0.0,
            capacity_satisfactory_ratio=cap, budget_satisfactory_ratio=bsr,
            channel_cost=dict(sorted(ch_total.items())), channel_kappa_deviation=dev,
        )


def compute_metrics(records: Iterable[LogRecord], advertisers: Iterable[Advertiser],
                    kappa: Kappa | None = None, allocations: Allocations | None = None,
                    eps_fraction: float = 0.01) -> MetricsReport:
    acc = MetricsAccumulator(advertisers)
    acc.add(records)
    return acc.report(kappa, allocations, eps_fraction)


def reference_kappa(records: Iterable[LogRecord], advertisers: Iterable[Advertiser]) -> dict[tuple[int, int], float]:
    acc = MetricsAccumulator(advertisers)
    acc.add(records)
    return acc.kappa()


NORMALIZED_FIELDS = ("impr", "clicks", "cpc", "csr", "roi")


def normalized_deltas(report: MetricsReport, reference: MetricsReport) -> dict[str, float]:
    """Percentage change of each headline metric relative to ``reference``."""
    out = {}
    for name in NORMALIZED_FIELDS:
        v, r = getattr(report, name), getattr(reference, name)
        out[name] = 0.0 if v == r else (100.0 * (v - r) / r if r else float("inf"))
    return out
