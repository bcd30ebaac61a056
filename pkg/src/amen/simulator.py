"""Synthetic users whose scene-level activity announces what they click next.

Each user carries a latent preferred category that jumps at Poisson
change-points. Right after a jump the user tends to search for and collect
coupons in the new category; other scene events follow the current intent
most of the time. Impressions are served in channel sessions and clicked
with probability ``sigmoid(base + scenario_offset + beta * aligned + noise)``
where ``aligned`` says whether the shown item's category is the active
intent. Snapshots (moveline, active-intention items, click histories) are
frozen at each impression.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (RECENCY_BOUNDS, DatasetMeta, ImpressionTable, SceneKind,
                   recency_bucket)

DAY = 86400
EPOCH = 1_704_067_200  # 2024-01-01T00:00:00Z

_BACKGROUND_KINDS = (SceneKind.SearchResult, SceneKind.ShopVisit, SceneKind.CouponCollect,
                     SceneKind.HomepageFeed, SceneKind.TopicSearch)
_ACTIVE = (int(SceneKind.SearchResult), int(SceneKind.CouponCollect))


@dataclass
class SimConfig:
    n_users: int = 1000
    n_items: int = 2000
    n_categories: int = 8
    n_scenarios: int = 4
    n_shops: int = 200
    n_price_buckets: int = 10
    n_entities: int = 500
    n_age_buckets: int = 6
    horizon: int = 14 * DAY
    intent_shift_rate: float = 3.0
    signal_strength: float = 4.0
    base_click_logit: float = -2.0
    click_noise_std: float = 0.0
    user_propensity_std: float = 0.0
    activity_boost: float = 1.5
    activity_window: int = 3600
    scenario_offsets: tuple = (0.0, 0.0, 0.0, 0.0)
    scenario_weights: tuple = (0.4, 0.2, 0.2, 0.2)
    off_intent_rate: float = 0.3
    burst_search_prob: float = 0.9
    burst_coupon_prob: float = 0.8
    background_events_per_day: float = 6.0
    sessions_per_day: float = 1.5
    impressions_per_session: int = 5
    intent_exposure_rate: float = 0.1
    search_precision: float = 0.5
    items_per_exposure: int = 3
    test_fraction: float = 0.2
    caps: dict = field(default_factory=lambda: {
        "moveline": 30, "aiseq": 20, "short_seq": 10, "long_seq": 50})
    rng_seed: int = 0

    def __post_init__(self):
        self.scenario_offsets = tuple(float(x) for x in self.scenario_offsets)
        self.scenario_weights = tuple(float(x) for x in self.scenario_weights)
        for name in ("n_users", "n_items", "n_categories", "n_scenarios", "n_shops",
                     "n_price_buckets", "n_entities", "n_age_buckets", "horizon",
                     "impressions_per_session", "items_per_exposure"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if len(self.scenario_offsets) != self.n_scenarios or len(self.scenario_weights) != self.n_scenarios:
            raise ValueError("scenario_offsets and scenario_weights need one entry per scenario")
        if self.horizon < RECENCY_BOUNDS[-1]:
            raise ValueError("horizon must cover the longest pairing window (7 days)")
        for name in ("off_intent_rate", "burst_search_prob", "burst_coupon_prob",
                     "intent_exposure_rate", "search_precision", "test_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def from_json(cls, obj: dict) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown simulator keys {sorted(unknown)}")
        return cls(**obj)

    def to_json(self) -> dict:
        d = asdict(self)
        d["scenario_offsets"] = list(self.scenario_offsets)
        d["scenario_weights"] = list(self.scenario_weights)
        return d

    def meta(self) -> DatasetMeta:
        return DatasetMeta(
            vocab={
                "user_id": self.n_users, "item_id": self.n_items,
                "category_id": self.n_categories + 1, "shop_id": self.n_shops,
                "price_bucket": self.n_price_buckets, "scenario_id": self.n_scenarios,
                "kind": len(SceneKind), "entity_id": self.n_entities,
                "recency_bucket": len(RECENCY_BOUNDS) + 1,
                "age_bucket": self.n_age_buckets, "activity_bucket": 3,
            },
            caps=dict(self.caps), recency_bounds=list(RECENCY_BOUNDS), seed=self.rng_seed,
        )


@dataclass
class Catalog:
    category: np.ndarray  # item -> category (1-based)
    shop: np.ndarray
    price: np.ndarray
    items_by_category: list
    items_by_shop: list
    shops_by_category: list

    def features(self, items) -> np.ndarray:
        items = np.asarray(items, dtype=np.int64)
        return np.stack([items, self.category[items], self.shop[items], self.price[items]], axis=-1)


def build_catalog(cfg: SimConfig) -> Catalog:
    rng = np.random.default_rng([cfg.rng_seed, 0xCA7])
    n_cat = cfg.n_categories
    shop_cat = 1 + np.arange(cfg.n_shops) % n_cat
    category = 1 + np.arange(cfg.n_items) % n_cat
    rng.shuffle(category)
    shops_by_category = [np.flatnonzero(shop_cat == c) for c in range(n_cat + 1)]
    shop = np.empty(cfg.n_items, np.int64)
    for i, c in enumerate(category):
        pool = shops_by_category[c]
        shop[i] = pool[rng.integers(len(pool))] if len(pool) else rng.integers(cfg.n_shops)
    price = rng.integers(cfg.n_price_buckets, size=cfg.n_items)
    items_by_category = [np.flatnonzero(category == c) for c in range(n_cat + 1)]
    items_by_shop = [np.flatnonzero(shop == s) for s in range(cfg.n_shops)]
    return Catalog(category, shop, price, items_by_category, items_by_shop, shops_by_category)


@dataclass
class UserTrace:
    """Intent segments for one user: segment k starts at ``starts[k]``."""

    user_id: int
    starts: np.ndarray
    categories: np.ndarray

    def at(self, t) -> np.ndarray:
        return self.categories[np.searchsorted(self.starts, t, side="right") - 1]

    def to_json(self) -> dict:
        return {"user_id": self.user_id,
                "segments": [[int(s), int(c)] for s, c in zip(self.starts, self.categories)]}


@dataclass
class Simulation:
    table: ImpressionTable
    traces: list
    aligned: np.ndarray
    config: SimConfig

    @property
    def meta(self) -> DatasetMeta:
        return self.table.meta

    def split(self) -> tuple[ImpressionTable, ImpressionTable]:
        """Time split: the last ``test_fraction`` of the horizon is the test set."""
        cut = EPOCH + int(self.config.horizon * (1.0 - self.config.test_fraction))
        test = self.table.timestamp >= cut
        return self.table.take(np.flatnonzero(~test)), self.table.take(np.flatnonzero(test))

    def write_traces(self, path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            for tr in self.traces:
                fh.write(json.dumps(tr.to_json(), separators=(",", ":"), sort_keys=True) + "\n")


def _random_category(rng, n_cat: int) -> int:
    return int(rng.integers(1, n_cat + 1))


def _pick(rng, pool: np.ndarray, fallback: int) -> int:
    return int(pool[rng.integers(len(pool))]) if len(pool) else int(rng.integers(fallback))


def _simulate_user(u: int, cfg: SimConfig, cat: Catalog, meta: DatasetMeta):
    rng = np.random.default_rng([cfg.rng_seed, 1, u])
    H, C = cfg.horizon, cfg.n_categories
    days = H / DAY
    age = int(rng.integers(cfg.n_age_buckets))
    activity = int(rng.integers(3))
    rate = (0.5, 1.0, 1.5)[activity]
    propensity = rng.normal(0.0, cfg.user_propensity_std) if cfg.user_propensity_std > 0 else 0.0

    # latent intent
    n_shift = rng.poisson(cfg.intent_shift_rate)
    shifts = np.sort(rng.integers(1, H, size=n_shift))
    cats = [_random_category(rng, C)]
    for _ in shifts:
        if C > 1:
            nxt = int(rng.integers(1, C))  # skip the current category
            cats.append(nxt if nxt < cats[-1] else nxt + 1)
        else:
            cats.append(1)
    trace = UserTrace(u, np.concatenate([[0], shifts]).astype(np.int64), np.asarray(cats, np.int64))

    # scene events: (time, kind, category, entity, exposed item ids)
    events = []

    def exposure(kind, category, shop=None):
        n = cfg.items_per_exposure
        if kind == SceneKind.ShopVisit and shop is not None:
            pool = cat.items_by_shop[shop]
            return [_pick(rng, pool, cfg.n_items) for _ in range(n)]
        out = []
        for _ in range(n):
            c = category if rng.random() < cfg.search_precision else _random_category(rng, C)
            out.append(_pick(rng, cat.items_by_category[c], cfg.n_items))
        return out

    def add_event(t, kind, category):
        entity = int(rng.integers(1, cfg.n_entities))
        items = []
        if kind == SceneKind.ShopVisit:
            shop = _pick(rng, cat.shops_by_category[category], cfg.n_shops)
            entity = 1 + shop % (cfg.n_entities - 1)
            items = exposure(kind, category, shop)
        elif kind == SceneKind.SearchResult:
            items = exposure(kind, category)
        events.append((int(t), int(kind), int(category), entity, items))

    for tau, new_cat in zip(shifts, cats[1:]):
        if rng.random() < cfg.burst_search_prob:
            add_event(min(H - 1, tau + rng.exponential(600)), SceneKind.SearchResult, new_cat)
        if rng.random() < cfg.burst_coupon_prob:
            add_event(min(H - 1, tau + rng.exponential(1200)), SceneKind.CouponCollect, new_cat)
    n_bg = rng.poisson(cfg.background_events_per_day * days * rate)
    for t in rng.integers(0, H, size=n_bg):
        kind = _BACKGROUND_KINDS[rng.integers(len(_BACKGROUND_KINDS))]
        c = int(trace.at(t)) if rng.random() >= cfg.off_intent_rate else _random_category(rng, C)
        add_event(t, kind, c)

    # channel sessions with their impressions
    n_sess = rng.poisson(cfg.sessions_per_day * days * rate)
    sess_times = np.sort(rng.integers(0, H - 60, size=n_sess))
    weights = np.asarray(cfg.scenario_weights) / np.sum(cfg.scenario_weights)
    # times of recent searches and coupon grabs drive the activity boost
    active_times = np.sort(np.asarray([e[0] for e in events if e[1] in _ACTIVE], dtype=np.int64))
    imps = []  # (time, scenario, item, label, aligned)
    for t0 in sess_times:
        scen = int(rng.choice(cfg.n_scenarios, p=weights))
        events.append((int(t0), int(SceneKind.ChannelVisit), 0, 1 + scen, []))
        active = int(trace.at(t0))
        j = np.searchsorted(active_times, t0, side="left")
        recent = j > 0 and t0 - active_times[j - 1] <= cfg.activity_window
        for k in range(cfg.impressions_per_session):
            if rng.random() < cfg.intent_exposure_rate:
                item = _pick(rng, cat.items_by_category[active], cfg.n_items)
            else:
                item = int(rng.integers(cfg.n_items))
            aligned = int(cat.category[item] == active)
            logit = (cfg.base_click_logit + propensity + cfg.scenario_offsets[scen]
                     + cfg.signal_strength * aligned)
            if recent:
                logit += cfg.activity_boost
            if cfg.click_noise_std > 0:
                logit += rng.normal(0.0, cfg.click_noise_std)
            label = int(rng.random() < 1.0 / (1.0 + np.exp(-logit)))
            imps.append((int(t0) + 1 + 2 * k, scen, item, label, aligned))

    events.sort(key=lambda e: (e[0], e[1], e[2], e[3]))
    ev_time = np.asarray([e[0] for e in events], dtype=np.int64)
    ev_feat = np.asarray([[e[1], e[2], e[3]] for e in events], dtype=np.int64).reshape(-1, 3)
    exp_items, exp_time = [], []
    for e in events:
        if e[1] in (int(SceneKind.SearchResult), int(SceneKind.ShopVisit)):
            exp_items.extend(e[4])
            exp_time.extend([e[0]] * len(e[4]))
    exp_items = np.asarray(exp_items, dtype=np.int64)
    exp_time = np.asarray(exp_time, dtype=np.int64)

    caps = meta.caps
    n = len(imps)
    out = ImpressionTable.empty(meta, n)
    out.user_id[:] = u
    out.profile[:] = (age, activity)
    clicks: list[int] = []
    aligned_col = np.zeros(n, np.int8)
    for i, (t, scen, item, label, aligned) in enumerate(imps):
        ts = EPOCH + t
        out.timestamp[i] = ts
        out.scenario_id[i] = scen
        out.label[i] = label
        out.target[i] = cat.features([item])[0]
        aligned_col[i] = aligned
        hi = int(np.searchsorted(ev_time, t, side="left"))
        lo = max(0, hi - caps["moveline"])
        m = hi - lo
        out.moveline_len[i] = m
        if m:
            out.moveline[i, :m, 0:3] = ev_feat[lo:hi]
            out.moveline_time[i, :m] = EPOCH + ev_time[lo:hi]
            out.moveline[i, :m, 3] = recency_bucket(t - ev_time[lo:hi], meta.recency_bounds)
        hi = int(np.searchsorted(exp_time, t, side="left"))
        lo = max(0, hi - caps["aiseq"])
        out.aiseq_len[i] = hi - lo
        if hi > lo:
            out.aiseq[i, :hi - lo] = cat.features(exp_items[lo:hi])
        for name in ("short_seq", "long_seq"):
            hist = clicks[-caps[name]:] if caps[name] else []
            getattr(out, f"{name}_len")[i] = len(hist)
            if hist:
                getattr(out, name)[i, :len(hist)] = cat.features(hist)
        # impressions within a session are 2 s apart, so a click is history for the next one
        if label:
            clicks.append(item)
    return out, trace, aligned_col


def simulate(cfg: SimConfig | None = None) -> Simulation:
    """Generate the full dataset; identical configs give identical tables."""
    cfg = cfg or SimConfig()
    meta = cfg.meta()
    cat = build_catalog(cfg)
    tables, traces, aligned = [], [], []
    for u in range(cfg.n_users):
        t, tr, al = _simulate_user(u, cfg, cat, meta)
        tables.append(t)
        traces.append(tr)
        aligned.append(al)
    table = ImpressionTable.concatenate(tables) if tables else ImpressionTable.empty(meta)
    return Simulation(table=table, traces=traces, aligned=np.concatenate(aligned), config=cfg)
