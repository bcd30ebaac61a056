"""Mining opposite-label pairs from the same user's history.

For a target impression the candidates are the same user's impressions
with the other click label, between ``min_gap`` and ``max_gap`` seconds
away (either direction), optionally restricted to the same scenario.
One candidate is drawn uniformly with a generator keyed on
``(seed, target row)``, so a pairing never depends on processing order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import ImpressionTable

DOMAINS = ("same_scenario", "global")


@dataclass(frozen=True)
class SamplingConfig:
    min_gap: int = 60
    max_gap: int = 604800
    domain_constraint: str = "same_scenario"
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.min_gap < self.max_gap:
            raise ValueError(f"need 0 < min_gap < max_gap, got {self.min_gap}, {self.max_gap}")
        if self.domain_constraint not in DOMAINS:
            raise ValueError(f"domain_constraint must be one of {DOMAINS}")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ContrastivePair:
    target: int
    diff: int


@dataclass(frozen=True)
class CoverageReport:
    total_impressions: int
    matched_impressions: int

    @property
    def coverage_rate(self) -> float:
        if self.total_impressions == 0:
            return 0.0
        return self.matched_impressions / self.total_impressions

    def to_json(self) -> dict:
        return {"total_impressions": self.total_impressions,
                "matched_impressions": self.matched_impressions,
                "coverage_rate": self.coverage_rate}


class PairIndex:
    """Rows grouped per (user, scenario) -- or per user under ``global`` --
    each group sorted by (timestamp, row)."""

    def __init__(self, table: ImpressionTable, config: SamplingConfig):
        self.table = table
        self.config = config
        scen = table.scenario_id if config.domain_constraint == "same_scenario" else \
            np.full(len(table), -1)
        order = np.lexsort((np.arange(len(table)), table.timestamp, scen, table.user_id))
        keys = np.stack([table.user_id[order], scen[order]], axis=1) if len(table) else \
            np.zeros((0, 2), np.int64)
        self.groups: dict[tuple[int, int], np.ndarray] = {}
        if len(order):
            cuts = np.flatnonzero((keys[1:] != keys[:-1]).any(axis=1)) + 1
            for rows in np.split(order, cuts):
                self.groups[(int(table.user_id[rows[0]]), int(scen[rows[0]]))] = rows
        self._scen = scen

    def key(self, row: int) -> tuple[int, int]:
        return int(self.table.user_id[row]), int(self._scen[row])

    def lookup(self, user_id: int, scenario_id: int | None = None) -> np.ndarray:
        scen = -1 if self.config.domain_constraint == "global" or scenario_id is None else scenario_id
        return self.groups.get((user_id, scen), np.zeros(0, np.int64))

    def __len__(self) -> int:
        return sum(len(v) for v in self.groups.values())

    def candidates(self, row: int) -> np.ndarray:
        """All valid diff rows for ``row``, in (timestamp, row) order."""
        t = self.table
        rows = self.groups[self.key(row)]
        times = t.timestamp[rows]
        ts = t.timestamp[row]
        lo, hi = self.config.min_gap, self.config.max_gap
        before = rows[np.searchsorted(times, ts - hi, "left"):np.searchsorted(times, ts - lo, "right")]
        after = rows[np.searchsorted(times, ts + lo, "left"):np.searchsorted(times, ts + hi, "right")]
        near = np.concatenate([before, after])
        return near[t.label[near] != t.label[row]]


def build_index(table: ImpressionTable, config: SamplingConfig) -> PairIndex:
    return PairIndex(table, config)


def _pick(candidates: np.ndarray, row: int, seed: int) -> int | None:
    if len(candidates) == 0:
        return None
    rng = np.random.default_rng([seed, row])
    return int(candidates[rng.integers(len(candidates))])


def sample_diff(row: int, index: PairIndex, config: SamplingConfig | None = None) -> int | None:
    """Row of the diff impression paired with ``row``, or None if none is valid."""
    config = config or index.config
    if config.domain_constraint != index.config.domain_constraint:
        raise ValueError("index was built for a different domain constraint")
    return _pick(index.candidates(row), row, config.rng_seed)


def brute_force_candidates(table: ImpressionTable, row: int, config: SamplingConfig) -> np.ndarray:
    """Full-scan reference for :meth:`PairIndex.candidates`, same ordering."""
    gap = np.abs(table.timestamp - table.timestamp[row])
    ok = (table.user_id == table.user_id[row]) & (table.label != table.label[row]) \
        & (gap >= config.min_gap) & (gap <= config.max_gap)
    if config.domain_constraint == "same_scenario":
        ok &= table.scenario_id == table.scenario_id[row]
    rows = np.flatnonzero(ok)
    return rows[np.lexsort((rows, table.timestamp[rows]))]


def match_batch(rows, index: PairIndex, config: SamplingConfig | None = None
                ) -> tuple[list[ContrastivePair], CoverageReport]:
    config = config or index.config
    pairs = []
    for row in np.asarray(rows, dtype=np.int64):
        d = sample_diff(int(row), index, config)
        if d is not None:
            pairs.append(ContrastivePair(int(row), d))
    return pairs, CoverageReport(len(rows), len(pairs))


def pair_dataset(table: ImpressionTable, config: SamplingConfig
                 ) -> tuple[ImpressionTable, CoverageReport]:
    """Attach a diff column to every matchable row of ``table``."""
    index = build_index(table, config)
    pairs, report = match_batch(np.arange(len(table)), index, config)
    diff = np.full(len(table), -1, np.int64)
    for p in pairs:
        diff[p.target] = p.diff
    return table.with_diff(diff), report


def check_pair(table: ImpressionTable, pair: ContrastivePair, config: SamplingConfig) -> list[str]:
    """Names of the pair invariants that ``pair`` violates (empty when valid)."""
    a, b = pair.target, pair.diff
    broken = []
    if table.user_id[a] != table.user_id[b]:
        broken.append("same_user")
    if table.label[a] == table.label[b]:
        broken.append("opposite_label")
    gap = abs(int(table.timestamp[a]) - int(table.timestamp[b]))
    if not config.min_gap <= gap <= config.max_gap:
        broken.append("time_window")
    if config.domain_constraint == "same_scenario" and table.scenario_id[a] != table.scenario_id[b]:
        broken.append("same_scenario")
    return broken
