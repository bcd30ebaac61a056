"""Experiment pipelines: generate, pair, train, evaluate, ablate, analyse.

Every stage reads and writes files and is deterministic given its
configuration, so a rerun with the same inputs reproduces its outputs
byte for byte.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import ImpressionTable, load_table, write_dataset
from .estimator import AMENClassifier, TSPPairer, sigmoid
from .metrics import RewardDistribution, auc, gauc, reward_distribution
from .model import ContractViolation
from .simulator import SimConfig, simulate

logger = logging.getLogger(__name__)


class ConfigError(ContractViolation, ValueError):
    """An experiment configuration breaks one of its invariants."""


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not valid JSON ({err})") from None


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat training/evaluation settings; see the README for every key."""

    d: int = 32
    n_heads: int = 4
    main_hidden: tuple = (64, 32)
    reward_hidden: tuple = (32,)
    learning_rate: float = 0.05
    adagrad_eps: float = 1e-8
    lr_decay: float = 1.0
    batch_size: int = 1024
    epochs: int = 6
    w1: float = 1.0
    w2: float = 0.1
    use_aiseq: bool = True
    use_tsp: bool = True
    use_moveline_reward: bool = True
    domain_constraint: str = "same_scenario"
    min_gap: int = 60
    max_gap: int = 604800
    model_seed: int = 0
    shuffle_seed: int = 0
    pair_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "main_hidden", tuple(int(x) for x in self.main_hidden))
        object.__setattr__(self, "reward_hidden", tuple(int(x) for x in self.reward_hidden))
        if self.use_tsp and not self.use_moveline_reward:
            raise ConfigError("use_tsp requires use_moveline_reward")
        if self.domain_constraint not in ("same_scenario", "global"):
            raise ConfigError(f"unknown domain_constraint {self.domain_constraint!r}")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ConfigError("batch_size must be positive and epochs non-negative")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        unknown = set(obj) - set(cls.keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as err:
            raise ConfigError(str(err)) from None

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        obj = _read_json(path) if path else {}
        obj.update(overrides or {})
        return cls.from_dict(obj)

    def override(self, **changes) -> "ExperimentConfig":
        unknown = set(changes) - set(self.keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["main_hidden"] = list(self.main_hidden)
        d["reward_hidden"] = list(self.reward_hidden)
        return d

    def estimator(self) -> AMENClassifier:
        return AMENClassifier(
            d=self.d, n_heads=self.n_heads, main_hidden=self.main_hidden,
            reward_hidden=self.reward_hidden, learning_rate=self.learning_rate,
            adagrad_eps=self.adagrad_eps, lr_decay=self.lr_decay, batch_size=self.batch_size,
            epochs=self.epochs, w1=self.w1, w2=self.w2, use_aiseq=self.use_aiseq,
            use_tsp=self.use_tsp, use_moveline_reward=self.use_moveline_reward,
            random_state=self.model_seed, shuffle_seed=self.shuffle_seed)

    def pairer(self) -> TSPPairer:
        return TSPPairer(min_gap=self.min_gap, max_gap=self.max_gap,
                         domain_constraint=self.domain_constraint, random_state=self.pair_seed)


# ---------------------------------------------------------------------------
# generate / pair


def generate(sim: SimConfig, out_dir) -> dict[str, Path]:
    """Simulate and write train/test datasets, intent traces and the config used."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = simulate(sim)
    train, test = result.split()
    paths = {"train": out / "train.jsonl", "test": out / "test.jsonl",
             "traces": out / "traces.jsonl", "config": out / "sim_config.json"}
    write_dataset(train, train.meta, paths["train"])
    write_dataset(test, test.meta, paths["test"])
    result.write_traces(paths["traces"])
    _dump_json(sim.to_json(), paths["config"])
    logger.info("generated %d train / %d test impressions", len(train), len(test))
    return paths


def pair(config: ExperimentConfig, dataset, out_path=None, report_path=None
         ) -> tuple[ImpressionTable, dict]:
    """Attach diff references to a dataset (path or table) under ``config``'s sampling rules."""
    table = load_table(dataset) if not isinstance(dataset, ImpressionTable) else dataset
    pairer = config.pairer()
    paired = pairer.fit_transform(table.without_diff())
    report = {"domain_constraint": config.domain_constraint, "min_gap": config.min_gap,
              "max_gap": config.max_gap, "pair_seed": config.pair_seed,
              **pairer.coverage_.to_json()}
    if out_path is not None:
        write_dataset(paired, paired.meta, out_path)
    if report_path is not None:
        _dump_json(report, report_path)
    return paired, report


# ---------------------------------------------------------------------------
# train / evaluate


def train(config: ExperimentConfig, dataset, checkpoint_path=None, log_path=None,
          eval_dataset=None) -> AMENClassifier:
    """Fit a model; writes a checkpoint and a JSON training log when paths are given."""
    table = load_table(dataset) if not isinstance(dataset, ImpressionTable) else dataset
    eval_table = eval_dataset
    if eval_dataset is not None and not isinstance(eval_dataset, ImpressionTable):
        eval_table = load_table(eval_dataset)
    model = config.estimator().fit(table, eval_set=eval_table)
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    if log_path is not None:
        _dump_json({"config": config.to_dict(), "meta_digest": table.meta.digest(),
                    "epochs": model.epoch_log_, "steps": model.history_}, log_path)
    return model


@dataclass
class EvalReport:
    n_records: int
    n_clicks: int
    auc: float
    gauc: float

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_model(model: AMENClassifier, table: ImpressionTable
                   ) -> tuple[EvalReport, dict[str, np.ndarray]]:
    """Inference-mode metrics plus the per-record dump columns."""
    logits, reward = model._outputs(table)
    y_hat = sigmoid(logits)
    labels = table.label.astype(np.int64)
    report = EvalReport(n_records=len(table), n_clicks=int(labels.sum()),
                        auc=auc(y_hat, labels), gauc=gauc(y_hat, labels, table.user_id))
    dump = {"user_id": table.user_id.astype(np.int64), "y_hat": y_hat, "reward": reward,
            "label": labels}
    return report, dump


def write_dump(dump: dict[str, np.ndarray], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for u, p, r, y in zip(dump["user_id"], dump["y_hat"], dump["reward"], dump["label"]):
            fh.write(json.dumps({"user_id": int(u), "y_hat": float(p), "reward": float(r),
                                 "label": int(y)}, sort_keys=True, separators=(",", ":")) + "\n")


def read_dump(path) -> dict[str, np.ndarray]:
    rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
    if not rows:
        raise ContractViolation(f"{path}: evaluation dump is empty")
    return {"user_id": np.array([r["user_id"] for r in rows], np.int64),
            "y_hat": np.array([r["y_hat"] for r in rows]),
            "reward": np.array([r["reward"] for r in rows]),
            "label": np.array([r["label"] for r in rows], np.int64)}


def evaluate(checkpoint_path, dataset, report_path=None, dump_path=None) -> EvalReport:
    """Score a dataset with a saved checkpoint; the dataset meta must match."""
    table = load_table(dataset) if not isinstance(dataset, ImpressionTable) else dataset
    model = AMENClassifier.load(checkpoint_path, table.meta)
    report, dump = evaluate_model(model, table)
    if report_path is not None:
        _dump_json(report.to_dict(), report_path)
    if dump_path is not None:
        write_dump(dump, dump_path)
    return report


# ---------------------------------------------------------------------------
# ablation grid


DEFAULT_GRID: dict[str, dict] = {
    "full": {},
    "no_aiseq": {"use_aiseq": False},
    "no_tsp": {"use_tsp": False},
    "no_moveline": {"use_tsp": False, "use_moveline_reward": False},
    "difgs": {"domain_constraint": "global"},
    "w2=0.02": {"w2": 0.02},
    "w2=0.5": {"w2": 0.5},
}


@dataclass
class AblationRow:
    name: str
    config: ExperimentConfig
    aucs: list = field(default_factory=list)
    gaucs: list = field(default_factory=list)
    dumps: list = field(default_factory=list, repr=False)

    @property
    def auc(self) -> float:
        return float(np.mean(self.aucs))

    @property
    def gauc(self) -> float:
        return float(np.mean(self.gaucs))

    def to_dict(self) -> dict:
        c = self.config
        return {"name": self.name, "aiseq": c.use_aiseq, "tsp": c.use_tsp,
                "moveline": c.use_moveline_reward, "domain": c.domain_constraint, "w2": c.w2,
                "auc": self.auc, "gauc": self.gauc, "auc_per_seed": self.aucs,
                "gauc_per_seed": self.gaucs}


def _fit_and_score(cfg: ExperimentConfig, data: ImpressionTable, test: ImpressionTable, seed: int):
    model = cfg.override(model_seed=seed, shuffle_seed=seed).estimator().fit(data)
    return evaluate_model(model, test)


def ablation_suite(base: ExperimentConfig, train_data, test_data, grid: dict | None = None,
                   seeds=(0,), jobs: int = 1) -> list[AblationRow]:
    """Train and evaluate each grid cell for every seed; pairing is redone per domain.

    Each row keeps the per-seed evaluation dumps for reward analysis.
    With ``jobs > 1`` the runs go to worker processes; every run is seeded
    on its own, so the results match a sequential run exactly.
    """
    train_table = load_table(train_data) if not isinstance(train_data, ImpressionTable) else train_data
    test_table = load_table(test_data) if not isinstance(test_data, ImpressionTable) else test_data
    grid = DEFAULT_GRID if grid is None else grid
    paired: dict[str, ImpressionTable] = {}
    rows, runs = [], []
    for name, changes in grid.items():
        cfg = base.override(**changes)
        rows.append(AblationRow(name, cfg))
        if cfg.use_tsp and cfg.domain_constraint not in paired:
            paired[cfg.domain_constraint] = pair(cfg, train_table)[0]
        data = paired[cfg.domain_constraint] if cfg.use_tsp else train_table.without_diff()
        runs += [(rows[-1], cfg, data, seed) for seed in seeds]

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_fit_and_score, cfg, data, test_table, seed)
                       for _, cfg, data, seed in runs]
            results = [f.result() for f in futures]
    else:
        results = (_fit_and_score(cfg, data, test_table, seed) for _, cfg, data, seed in runs)
    for (row, _, _, seed), (report, dump) in zip(runs, results):
        row.aucs.append(report.auc)
        row.gaucs.append(report.gauc)
        row.dumps.append(dump)
        logger.info("%s seed %d: auc %.4f gauc %.4f", row.name, seed, report.auc, report.gauc)
    return rows


def format_ablation(rows: list[AblationRow]) -> str:
    """Plain-text comparison table, one row per grid cell."""
    def mark(flag):
        return "yes" if flag else "-"

    head = f"{'setting':<12} {'AISeq':>5} {'TSP':>5} {'ML':>5} {'DifGS':>5} {'w2':>6} {'AUC':>8} {'GAUC':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        c = r.config
        lines.append(f"{r.name:<12} {mark(c.use_aiseq):>5} {mark(c.use_tsp):>5} "
                     f"{mark(c.use_moveline_reward):>5} "
                     f"{mark(c.use_tsp and c.domain_constraint == 'global'):>5} "
                     f"{c.w2:>6.2f} {r.auc:>8.4f} {r.gauc:>8.4f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# reward analysis


def analyze_reward(dump_tsp, dump_non_tsp, table_path=None, summary_path=None,
                   seed: int = 0) -> tuple[RewardDistribution, dict]:
    """Bucket curves for two models' rewards, compared at equal sample size.

    The larger dump is subsampled (seeded) to the size of the smaller one.
    """
    a = read_dump(dump_tsp) if not isinstance(dump_tsp, dict) else dump_tsp
    b = read_dump(dump_non_tsp) if not isinstance(dump_non_tsp, dict) else dump_non_tsp
    n = min(len(a["label"]), len(b["label"]))
    if n == 0:
        raise ContractViolation("both evaluation dumps must be non-empty")
    rng = np.random.default_rng(seed)

    def sample(d):
        if len(d["label"]) == n:
            return d["reward"], d["label"]
        rows = np.sort(rng.choice(len(d["label"]), size=n, replace=False))
        return d["reward"][rows], d["label"][rows]

    dist = reward_distribution(sample(a), sample(b))
    summary = {"sample_size": n, "degenerate": dist.degenerate, "curves": dist.summary(),
               "support": {name: dist.support(name) for name in dist.degenerate}}
    if table_path is not None:
        names = list(dist.curves)
        with Path(table_path).open("w", encoding="utf-8", newline="\n") as fh:
            fh.write("\t".join(["bucket"] + names) + "\n")
            for row in dist.table_rows():
                fh.write("\t".join([str(row[0])] + [repr(v) for v in row[1:]]) + "\n")
    if summary_path is not None:
        _dump_json(summary, summary_path)
    for name, flat in dist.degenerate.items():
        if flat:
            logger.warning("%s rewards have zero variance; distribution is degenerate", name)
    return dist, summary
