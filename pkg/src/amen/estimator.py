"""scikit-learn style estimators: the click model and the pair miner."""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .data import ImpressionTable
from .losses import batch_loss
from .metrics import auc
from .model import CheckpointMismatch, ModelConfig, ModelParams, forward
from .tsp import CoverageReport, SamplingConfig, pair_dataset
from .validation import check_impressions, check_labels

logger = logging.getLogger(__name__)


def sigmoid(logit: np.ndarray) -> np.ndarray:
    return ad.sigmoid(ad.Tensor(logit)).data


class MissingPairsError(ValueError):
    """Pairwise training was requested on a table without a diff column."""


class AMENClassifier(ClassifierMixin, BaseEstimator):
    """Click-through-rate model with a moveline reward branch.

    ``fit`` takes an :class:`~amen.data.ImpressionTable`; labels come from
    the table unless ``y`` is passed. With ``use_tsp`` the table must carry
    a diff column (see :class:`TSPPairer`), and each batch adds the
    pairwise reward loss over its matched rows.

    Parameters
    ----------
    d, n_heads : int
        Hidden width and attention heads; ``d`` must be divisible by ``n_heads``.
    main_hidden, reward_hidden : tuple of int
        Hidden widths of the Main Net and the Reward Net.
    learning_rate, adagrad_eps, lr_decay : float
        AdaGrad settings; ``lr_decay`` multiplies the rate once per step.
    batch_size, epochs : int
    w1, w2 : float
        Weights of the cross-entropy and pairwise losses.
    use_aiseq, use_tsp, use_moveline_reward : bool
        Ablation switches. ``use_tsp`` requires ``use_moveline_reward``.
    random_state : int
        Seed for parameter initialisation.
    shuffle_seed : int
        Seed for the batch order.
    """

    def __init__(self, d=32, n_heads=4, main_hidden=(64, 32), reward_hidden=(32,),
                 learning_rate=0.001, adagrad_eps=1e-8, lr_decay=1.0, batch_size=1024,
                 epochs=2, w1=1.0, w2=0.1, use_aiseq=True, use_tsp=True,
                 use_moveline_reward=True, random_state=0, shuffle_seed=0, eval_batch_size=4096):
        self.d = d
        self.n_heads = n_heads
        self.main_hidden = main_hidden
        self.reward_hidden = reward_hidden
        self.learning_rate = learning_rate
        self.adagrad_eps = adagrad_eps
        self.lr_decay = lr_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.w1 = w1
        self.w2 = w2
        self.use_aiseq = use_aiseq
        self.use_tsp = use_tsp
        self.use_moveline_reward = use_moveline_reward
        self.random_state = random_state
        self.shuffle_seed = shuffle_seed
        self.eval_batch_size = eval_batch_size

    def _check_params(self):
        if self.use_tsp and not self.use_moveline_reward:
            raise ValueError("use_tsp requires use_moveline_reward")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("loss weights must be non-negative")

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, n_heads=self.n_heads, main_hidden=tuple(self.main_hidden),
                           reward_hidden=tuple(self.reward_hidden), use_aiseq=self.use_aiseq,
                           use_moveline_reward=self.use_moveline_reward)

    # training ------------------------------------------------------------
    def fit(self, X, y=None, eval_set=None):
        """Train from scratch. ``eval_set`` (an ImpressionTable) adds a
        per-epoch test AUC to ``epoch_log_``."""
        self._check_params()
        X = check_impressions(X)
        labels = check_labels(X, y)
        if self.use_tsp and not X.has_pairs():
            raise MissingPairsError("use_tsp=True needs a table with a diff column; run TSPPairer first")
        self.params_ = ModelParams.initialize(X.meta, self.model_config(), seed=self.random_state)
        self.meta_ = X.meta
        self.classes_ = np.array([0, 1])
        self.history_ = []
        self.epoch_log_ = []
        self.optimizer_ = ad.AdaGrad(self.params_.tensors, lr=self.learning_rate,
                                     eps=self.adagrad_eps, decay=self.lr_decay)
        rng = np.random.default_rng(self.shuffle_seed)
        for epoch in range(self.epochs):
            order = rng.permutation(len(X))
            for start in range(0, len(X), self.batch_size):
                stats = self._step(X, labels, order[start:start + self.batch_size])
                stats["epoch"] = epoch
                self.history_.append(stats)
            self.epoch_log_.append(self._summarise_epoch(epoch, eval_set))
            logger.info("epoch %d: %s", epoch, self.epoch_log_[-1])
        return self

    def _summarise_epoch(self, epoch: int, eval_set) -> dict:
        steps = [h for h in self.history_ if h["epoch"] == epoch]
        row = {"epoch": epoch, "steps": len(steps)}
        for key in ("ce", "bpr", "total"):
            row[key] = float(np.mean([h[key] for h in steps])) if steps else 0.0
        row["matched"] = int(sum(h["matched"] for h in steps))
        if eval_set is not None:
            row["eval_auc"] = self.score(eval_set)
        return row

    def _step(self, X: ImpressionTable, labels: np.ndarray, rows: np.ndarray) -> dict:
        batch = X.take(rows)
        diff = None
        pair_rows = diff_labels = None
        if self.use_tsp:
            d = X.diff[rows]
            pair_rows = np.flatnonzero(d >= 0)
            if len(pair_rows):
                diff = X.take(d[pair_rows])
                diff_labels = labels[d[pair_rows]]
        out = forward(self.params_, batch, "train", diff=diff)
        loss = batch_loss(out, labels[rows], pair_rows, diff_labels, self.w1, self.w2)
        self.params_.zero_grad()
        loss.total.backward()
        self.optimizer_.step()
        return loss.values()

    # inference -----------------------------------------------------------
    def _outputs(self, X):
        check_is_fitted(self, "params_")
        X = check_impressions(X, allow_empty=True)
        if X.meta.digest() != self.meta_.digest():
            raise CheckpointMismatch("impressions were built with different dataset metadata")
        logits, rewards = [], []
        for start in range(0, len(X), self.eval_batch_size):
            batch = X.take(np.arange(start, min(start + self.eval_batch_size, len(X))))
            out = forward(self.params_, batch, "inference")
            logits.append(out.logit.data)
            rewards.append(out.reward.data)
        if not logits:
            return np.zeros(0), np.zeros(0)
        return np.concatenate(logits), np.concatenate(rewards)

    def decision_function(self, X) -> np.ndarray:
        """Pre-sigmoid score (Main Net logit plus moveline reward)."""
        return self._outputs(X)[0]

    def moveline_reward(self, X) -> np.ndarray:
        return self._outputs(X)[1]

    def predict_proba(self, X) -> np.ndarray:
        p = sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def score(self, X, y=None, sample_weight=None) -> float:
        """ROC AUC of the click probabilities (not accuracy)."""
        labels = check_labels(X, y)
        return auc(self.decision_function(X), labels)

    # persistence ---------------------------------------------------------
    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()}
        self.params_.save(path, self.meta_.digest(), extra={"estimator": params})

    @classmethod
    def load(cls, path, meta) -> "AMENClassifier":
        params, doc = ModelParams.load(path, meta)
        kwargs = dict(doc["extra"].get("estimator", {}))
        for key in ("main_hidden", "reward_hidden"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        est = cls(**kwargs)
        est.params_ = params
        est.meta_ = meta
        est.classes_ = np.array([0, 1])
        est.history_ = []
        est.epoch_log_ = []
        return est


class TSPPairer(TransformerMixin, BaseEstimator):
    """Attach an opposite-label diff impression to each matchable row.

    ``transform`` pairs rows within the table it is given (diff references
    are row indices into that table) and records ``coverage_``.
    """

    def __init__(self, min_gap=60, max_gap=604800, domain_constraint="same_scenario", random_state=0):
        self.min_gap = min_gap
        self.max_gap = max_gap
        self.domain_constraint = domain_constraint
        self.random_state = random_state

    def sampling_config(self) -> SamplingConfig:
        return SamplingConfig(min_gap=self.min_gap, max_gap=self.max_gap,
                              domain_constraint=self.domain_constraint, rng_seed=self.random_state)

    def fit(self, X, y=None):
        check_impressions(X, allow_empty=True, validate=False)
        self.config_ = self.sampling_config()
        return self

    def transform(self, X) -> ImpressionTable:
        check_is_fitted(self, "config_")
        X = check_impressions(X, allow_empty=True, validate=False)
        paired, report = pair_dataset(X, self.config_)
        self.coverage_: CoverageReport = report
        return paired
