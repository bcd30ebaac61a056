"""Domain records, the columnar impression table, and the dataset file format.

A dataset file is UTF-8 text: line 1 is a JSON object with the dataset
metadata, every following line is one JSON impression record::

    {"user_id": 3, "profile": [1, 0], "scenario_id": 0, "timestamp": 86400,
     "label": 1, "target": [item, category, shop, price],
     "moveline": [[kind, timestamp, category, entity, recency], ...],
     "aiseq": [[item, category, shop, price], ...],
     "short_seq": [...], "long_seq": [...], "diff": 17}

``diff`` is optional; when present it is the 0-based record index of the
paired opposite-label impression, or ``null``.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

FORMAT_VERSION = 1

ITEM_FIELDS = ("item_id", "category_id", "shop_id", "price_bucket")
NODE_FIELDS = ("kind", "category_id", "entity_id", "recency_bucket")
PROFILE_FIELDS = ("age_bucket", "activity_bucket")

# upper edges in seconds; the last bucket is open-ended
RECENCY_BOUNDS = (60, 600, 3600, 21600, 86400, 604800)
N_HOUR_BUCKETS = 24


class SceneKind(enum.IntEnum):
    SearchResult = 0
    ShopVisit = 1
    CouponCollect = 2
    ChannelVisit = 3
    HomepageFeed = 4
    TopicSearch = 5


class DatasetFormatError(ValueError):
    """A dataset line could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DatasetValidationError(DatasetFormatError):
    """A parsed record violates the dataset metadata or record invariants."""

    def __init__(self, message: str, field: str, line: int | None = None):
        self.field = field
        super().__init__(f"{field}: {message}", line)


@dataclass(frozen=True)
class ItemFeatures:
    item_id: int
    category_id: int
    shop_id: int
    price_bucket: int

    def as_list(self) -> list[int]:
        return [self.item_id, self.category_id, self.shop_id, self.price_bucket]


@dataclass(frozen=True)
class MovelineNode:
    kind: SceneKind
    timestamp: int
    category_id: int = 0
    entity_id: int = 0
    recency_bucket: int = 0

    def as_list(self) -> list[int]:
        return [int(self.kind), self.timestamp, self.category_id, self.entity_id, self.recency_bucket]


@dataclass(frozen=True)
class Impression:
    user_id: int
    age_bucket: int
    activity_bucket: int
    scenario_id: int
    timestamp: int
    target: ItemFeatures
    label: int
    moveline: tuple[MovelineNode, ...] = ()
    aiseq: tuple[ItemFeatures, ...] = ()
    short_seq: tuple[ItemFeatures, ...] = ()
    long_seq: tuple[ItemFeatures, ...] = ()

    @property
    def hour_bucket(self) -> int:
        return hour_bucket(self.timestamp)


def hour_bucket(timestamp):
    return (np.asarray(timestamp) // 3600) % N_HOUR_BUCKETS


def recency_bucket(gap, bounds: Sequence[int] = RECENCY_BOUNDS):
    """Bucket index of a non-negative time gap in seconds."""
    return np.searchsorted(np.asarray(bounds), gap, side="right")


def snapshot_moveline(nodes: Sequence[MovelineNode], at: int, cap: int = 30,
                      bounds: Sequence[int] = RECENCY_BOUNDS) -> tuple[MovelineNode, ...]:
    """Most recent ``cap`` nodes strictly before ``at``, with recency filled in."""
    earlier = [n for n in nodes if n.timestamp < at]
    earlier.sort(key=lambda n: n.timestamp)
    kept = earlier[-cap:] if cap > 0 else []
    return tuple(
        MovelineNode(n.kind, n.timestamp, n.category_id, n.entity_id,
                     int(recency_bucket(at - n.timestamp, bounds)))
        for n in kept
    )


@dataclass
class DatasetMeta:
    vocab: dict[str, int]
    caps: dict[str, int] = field(default_factory=lambda: {
        "moveline": 30, "aiseq": 20, "short_seq": 10, "long_seq": 50})
    recency_bounds: list[int] = field(default_factory=lambda: list(RECENCY_BOUNDS))
    seed: int | None = None
    version: int = FORMAT_VERSION

    REQUIRED_VOCAB = ("user_id", "item_id", "category_id", "shop_id", "price_bucket",
                      "scenario_id", "kind", "entity_id", "recency_bucket",
                      "age_bucket", "activity_bucket")

    def __post_init__(self):
        missing = [k for k in self.REQUIRED_VOCAB if k not in self.vocab]
        if missing:
            raise DatasetValidationError(f"missing vocabulary sizes {missing}", "vocab")
        bad = {k: v for k, v in self.vocab.items() if not isinstance(v, int) or v <= 0}
        if bad:
            raise DatasetValidationError(f"vocabulary sizes must be positive ints: {bad}", "vocab")
        if self.vocab["kind"] < len(SceneKind):
            raise DatasetValidationError("kind vocabulary smaller than SceneKind", "vocab")
        if self.vocab["recency_bucket"] < len(self.recency_bounds) + 1:
            raise DatasetValidationError("recency vocabulary smaller than bucket count", "vocab")
        if list(self.recency_bounds) != sorted(set(self.recency_bounds)):
            raise DatasetValidationError("recency bounds must strictly increase", "recency_bounds")

    def to_json(self) -> dict:
        d = asdict(self)
        d["vocab"] = dict(sorted(d["vocab"].items()))
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetMeta":
        try:
            kwargs = {}
            if "caps" in obj:
                kwargs["caps"] = {k: int(v) for k, v in obj["caps"].items()}
            return cls(vocab={k: int(v) for k, v in obj["vocab"].items()},
                       **kwargs,
                       recency_bounds=[int(b) for b in obj.get("recency_bounds", RECENCY_BOUNDS)],
                       seed=obj.get("seed"),
                       version=int(obj.get("version", FORMAT_VERSION)))
        except (KeyError, TypeError, AttributeError) as exc:
            raise DatasetFormatError(f"malformed metadata header ({exc})", 1) from None

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# columnar table


_SEQS = ("aiseq", "short_seq", "long_seq")


class ImpressionTable:
    """Column store for a batch of impressions, padded per sequence.

    Sequences are left-aligned; ``<name>_len`` gives the valid prefix.
    ``diff`` holds the paired row index or -1.
    """

    COLUMNS = ("user_id", "profile", "scenario_id", "timestamp", "label", "target",
               "moveline", "moveline_time", "moveline_len",
               "aiseq", "aiseq_len", "short_seq", "short_seq_len",
               "long_seq", "long_seq_len", "diff")

    def __init__(self, meta: DatasetMeta, **columns):
        self.meta = meta
        for name in self.COLUMNS:
            if name not in columns:
                raise ValueError(f"missing column {name!r}")
            setattr(self, name, columns[name])

    # construction --------------------------------------------------
    @classmethod
    def empty(cls, meta: DatasetMeta, n: int = 0) -> "ImpressionTable":
        caps = meta.caps
        return cls(
            meta,
            user_id=np.zeros(n, np.int64), profile=np.zeros((n, 2), np.int32),
            scenario_id=np.zeros(n, np.int32), timestamp=np.zeros(n, np.int64),
            label=np.zeros(n, np.int8), target=np.zeros((n, 4), np.int32),
            moveline=np.zeros((n, caps["moveline"], 4), np.int32),
            moveline_time=np.zeros((n, caps["moveline"]), np.int64),
            moveline_len=np.zeros(n, np.int32),
            aiseq=np.zeros((n, caps["aiseq"], 4), np.int32), aiseq_len=np.zeros(n, np.int32),
            short_seq=np.zeros((n, caps["short_seq"], 4), np.int32), short_seq_len=np.zeros(n, np.int32),
            long_seq=np.zeros((n, caps["long_seq"], 4), np.int32), long_seq_len=np.zeros(n, np.int32),
            diff=np.full(n, -1, np.int64),
        )

    @classmethod
    def from_impressions(cls, impressions: Iterable[Impression], meta: DatasetMeta,
                         diff: Sequence[int | None] | None = None) -> "ImpressionTable":
        records = list(impressions)
        table = cls.empty(meta, len(records))
        for i, imp in enumerate(records):
            table._set_row(i, imp)
        if diff is not None:
            table.diff[:] = [-1 if d is None else d for d in diff]
        return table

    def _set_row(self, i: int, imp: Impression) -> None:
        caps = self.meta.caps
        self.user_id[i] = imp.user_id
        self.profile[i] = (imp.age_bucket, imp.activity_bucket)
        self.scenario_id[i] = imp.scenario_id
        self.timestamp[i] = imp.timestamp
        self.label[i] = imp.label
        self.target[i] = imp.target.as_list()
        nodes = imp.moveline
        if len(nodes) > caps["moveline"]:
            raise DatasetValidationError(f"length {len(nodes)} exceeds cap {caps['moveline']}", "moveline")
        self.moveline_len[i] = len(nodes)
        if nodes:
            self.moveline[i, :len(nodes)] = [[int(n.kind), n.category_id, n.entity_id, n.recency_bucket]
                                             for n in nodes]
            self.moveline_time[i, :len(nodes)] = [n.timestamp for n in nodes]
        for name in _SEQS:
            seq = getattr(imp, name)
            if len(seq) > caps[name]:
                raise DatasetValidationError(f"length {len(seq)} exceeds cap {caps[name]}", name)
            getattr(self, f"{name}_len")[i] = len(seq)
            if seq:
                getattr(self, name)[i, :len(seq)] = [s.as_list() for s in seq]

    @classmethod
    def concatenate(cls, tables: Sequence["ImpressionTable"]) -> "ImpressionTable":
        meta = tables[0].meta
        offsets = np.cumsum([0] + [len(t) for t in tables[:-1]])
        cols = {}
        for name in cls.COLUMNS:
            if name == "diff":
                cols[name] = np.concatenate([np.where(t.diff >= 0, t.diff + off, -1)
                                             for t, off in zip(tables, offsets)])
            else:
                cols[name] = np.concatenate([getattr(t, name) for t in tables])
        return cls(meta, **cols)

    # access ----------------------------------------------------------
    def __len__(self) -> int:
        return int(self.label.shape[0])

    def take(self, rows) -> "ImpressionTable":
        """Row subset; ``diff`` references are dropped since indices change."""
        rows = np.asarray(rows)
        cols = {name: getattr(self, name)[rows] for name in self.COLUMNS}
        cols["diff"] = np.full(len(cols["label"]), -1, np.int64)
        return ImpressionTable(self.meta, **cols)

    def with_diff(self, diff) -> "ImpressionTable":
        cols = {name: getattr(self, name) for name in self.COLUMNS}
        cols["diff"] = np.asarray(diff, dtype=np.int64)
        return ImpressionTable(self.meta, **cols)

    def without_diff(self) -> "ImpressionTable":
        return self.with_diff(np.full(len(self), -1, np.int64))

    def has_pairs(self) -> bool:
        return bool((self.diff >= 0).any())

    def hour(self) -> np.ndarray:
        return hour_bucket(self.timestamp).astype(np.int64)

    def mask(self, name: str) -> np.ndarray:
        cap = getattr(self, name).shape[1]
        return np.arange(cap)[None, :] < getattr(self, f"{name}_len")[:, None]

    def record(self, i: int) -> Impression:
        def items(arr, n):
            return tuple(ItemFeatures(*map(int, row)) for row in arr[:n])

        n_ml = int(self.moveline_len[i])
        nodes = tuple(
            MovelineNode(SceneKind(int(k)), int(t), int(c), int(e), int(r))
            for (k, c, e, r), t in zip(self.moveline[i, :n_ml], self.moveline_time[i, :n_ml])
        )
        return Impression(
            user_id=int(self.user_id[i]), age_bucket=int(self.profile[i, 0]),
            activity_bucket=int(self.profile[i, 1]), scenario_id=int(self.scenario_id[i]),
            timestamp=int(self.timestamp[i]), target=ItemFeatures(*map(int, self.target[i])),
            label=int(self.label[i]), moveline=nodes,
            aiseq=items(self.aiseq[i], self.aiseq_len[i]),
            short_seq=items(self.short_seq[i], self.short_seq_len[i]),
            long_seq=items(self.long_seq[i], self.long_seq_len[i]),
        )

    def __iter__(self) -> Iterator[Impression]:
        for i in range(len(self)):
            yield self.record(i)

    def equals(self, other: "ImpressionTable") -> bool:
        if self.meta.to_json() != other.meta.to_json() or len(self) != len(other):
            return False
        return all(np.array_equal(getattr(self, c), getattr(other, c)) for c in self.COLUMNS)

    # validation ------------------------------------------------------
    def validate(self) -> None:
        """Raise DatasetValidationError (with 1-based file line) on the first violation."""
        problem = _first_violation(self)
        if problem is not None:
            row, fld, msg = problem
            raise DatasetValidationError(msg, fld, line=row + 2)


def _first_violation(t: ImpressionTable):
    """(row, field, message) of the earliest invalid row, or None."""
    v = t.meta.vocab
    n = len(t)
    if n == 0:
        return None
    checks = []

    def check(bad: np.ndarray, fld: str, msg: str):
        if bad.any():
            checks.append((int(np.argmax(bad)), fld, msg))

    def vocab_check(values, name, fld, mask=None):
        bad = (values < 0) | (values >= v[name])
        if mask is not None:
            bad &= mask
        while bad.ndim > 1:
            bad = bad.any(axis=-1)
        check(bad, fld, f"id out of vocabulary (size {v[name]})")

    vocab_check(t.user_id, "user_id", "user_id")
    vocab_check(t.profile[:, 0], "age_bucket", "profile.age_bucket")
    vocab_check(t.profile[:, 1], "activity_bucket", "profile.activity_bucket")
    vocab_check(t.scenario_id, "scenario_id", "scenario_id")
    check((t.label != 0) & (t.label != 1), "label", "label must be 0 or 1")
    for j, name in enumerate(ITEM_FIELDS):
        vocab_check(t.target[:, j], name, f"target.{name}")
    for seq in _SEQS:
        m = t.mask(seq)
        for j, name in enumerate(ITEM_FIELDS):
            vocab_check(getattr(t, seq)[..., j], name, f"{seq}.{name}", m)
    m = t.mask("moveline")
    for j, name in enumerate(NODE_FIELDS):
        vocab_check(t.moveline[..., j], name, f"moveline.{name}", m)
    times = t.moveline_time
    check((m & (times >= t.timestamp[:, None])).any(axis=1), "moveline.timestamp",
          "node not strictly earlier than impression")
    order_bad = m[:, 1:] & (times[:, 1:] < times[:, :-1])
    check(order_bad.any(axis=1), "moveline.timestamp", "node timestamps decrease")
    expected = recency_bucket(t.timestamp[:, None] - times, t.meta.recency_bounds)
    check((m & (t.moveline[..., 3] != expected)).any(axis=1), "moveline.recency_bucket",
          "recency bucket inconsistent with time gap")
    check((t.diff < -1) | (t.diff >= n), "diff", "pair index out of range")
    if not checks:
        return None
    return min(checks, key=lambda c: c[0])


# ---------------------------------------------------------------------------
# file I/O


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _record_json(t: ImpressionTable, i: int, with_diff: bool) -> str:
    n_ml = int(t.moveline_len[i])
    ml = t.moveline[i, :n_ml].tolist()
    ts = t.moveline_time[i, :n_ml].tolist()
    rec = {
        "user_id": int(t.user_id[i]),
        "profile": t.profile[i].tolist(),
        "scenario_id": int(t.scenario_id[i]),
        "timestamp": int(t.timestamp[i]),
        "label": int(t.label[i]),
        "target": t.target[i].tolist(),
        "moveline": [[k, s, c, e, r] for (k, c, e, r), s in zip(ml, ts)],
    }
    for seq in _SEQS:
        rec[seq] = getattr(t, seq)[i, :getattr(t, f"{seq}_len")[i]].tolist()
    if with_diff:
        d = int(t.diff[i])
        rec["diff"] = None if d < 0 else d
    return _dumps(rec)


def write_dataset(impressions, meta: DatasetMeta, path, diff: Sequence[int | None] | None = None) -> None:
    """Write impressions (an ImpressionTable or iterable of Impression) to ``path``.

    Output bytes depend only on the inputs. The ``diff`` column is written
    when the table carries any pair (or ``diff`` is given explicitly).
    """
    table = impressions if isinstance(impressions, ImpressionTable) else \
        ImpressionTable.from_impressions(impressions, meta, diff)
    if diff is not None and isinstance(impressions, ImpressionTable):
        table = table.with_diff([-1 if d is None else d for d in diff])
    with_diff = diff is not None or table.has_pairs()
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(meta.to_json()) + "\n")
        for i in range(len(table)):
            fh.write(_record_json(table, i, with_diff) + "\n")


def _parse_line(line: str, lineno: int) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"invalid JSON ({exc.msg})", lineno) from None
    if not isinstance(rec, dict):
        raise DatasetFormatError("record is not an object", lineno)
    return rec


def _fill_row(t: ImpressionTable, i: int, rec: dict, lineno: int) -> None:
    caps = t.meta.caps
    try:
        t.user_id[i] = rec["user_id"]
        t.profile[i] = rec["profile"]
        t.scenario_id[i] = rec["scenario_id"]
        t.timestamp[i] = rec["timestamp"]
        t.label[i] = rec["label"]
        t.target[i] = rec["target"]
        ml = rec["moveline"]
        if len(ml) > caps["moveline"]:
            raise DatasetValidationError(f"length {len(ml)} exceeds cap {caps['moveline']}",
                                         "moveline", lineno)
        t.moveline_len[i] = len(ml)
        if ml:
            arr = np.asarray(ml, dtype=np.int64)
            if arr.shape[1] != 5:
                raise ValueError("moveline nodes need 5 fields")
            t.moveline[i, :len(ml)] = arr[:, [0, 2, 3, 4]]
            t.moveline_time[i, :len(ml)] = arr[:, 1]
        for seq in _SEQS:
            vals = rec[seq]
            if len(vals) > caps[seq]:
                raise DatasetValidationError(f"length {len(vals)} exceeds cap {caps[seq]}", seq, lineno)
            getattr(t, f"{seq}_len")[i] = len(vals)
            if vals:
                getattr(t, seq)[i, :len(vals)] = vals
        d = rec.get("diff")
        t.diff[i] = -1 if d is None else d
    except DatasetValidationError:
        raise
    except (KeyError, TypeError, ValueError, OverflowError) as exc:
        raise DatasetFormatError(f"malformed record ({type(exc).__name__}: {exc})", lineno) from None


def _read_header(fh) -> DatasetMeta:
    first = fh.readline()
    if not first:
        raise DatasetFormatError("missing metadata header", 1)
    return DatasetMeta.from_json(_parse_line(first, 1))


def load_table(path) -> ImpressionTable:
    """Read a whole dataset file into an ImpressionTable, validating every row."""
    with Path(path).open("r", encoding="utf-8") as fh:
        meta = _read_header(fh)
        lines = [ln for ln in fh]
    # tolerate a trailing blank line only
    while lines and not lines[-1].strip():
        lines.pop()
    table = ImpressionTable.empty(meta, len(lines))
    for i, line in enumerate(lines):
        _fill_row(table, i, _parse_line(line, i + 2), i + 2)
    table.validate()
    return table


def read_dataset(path) -> tuple[DatasetMeta, Iterator[Impression]]:
    """Validate the header and return it with a lazy stream of impressions.

    Each record is validated as it is read; errors carry the line number.
    """
    fh = Path(path).open("r", encoding="utf-8")
    try:
        meta = _read_header(fh)
    except Exception:
        fh.close()
        raise

    def stream() -> Iterator[Impression]:
        with fh:
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                one = ImpressionTable.empty(meta, 1)
                _fill_row(one, 0, _parse_line(line, lineno), lineno)
                one.diff[0] = -1  # pair index refers to the full file
                problem = _first_violation(one)
                if problem is not None:
                    raise DatasetValidationError(problem[2], problem[1], lineno)
                yield one.record(0)

    return meta, stream()
