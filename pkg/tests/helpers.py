"""Shared procedures for the unit and acceptance suites."""

import numpy as np

from amen import autodiff as ad
from amen.losses import batch_loss
from amen.model import ModelConfig, ModelParams, forward

TINY = ModelConfig(d=4, n_heads=2, main_hidden=(5, 3), reward_hidden=(3,))


def opposite_label_pair(table, rng):
    """Random (target_row, diff_row) from one user with opposite labels.

    Only impressions with a non-empty moveline qualify: without scene
    events the reward is the same constant for both sides of the pair.
    """
    has_scenes = table.moveline_len > 0
    users = [u for u in np.unique(table.user_id[has_scenes])
             if len(np.unique(table.label[(table.user_id == u) & has_scenes])) == 2]
    u = users[rng.integers(len(users))]
    rows = np.flatnonzero((table.user_id == u) & has_scenes)
    i = rows[rng.integers(len(rows))]
    others = rows[table.label[rows] != table.label[i]]
    return int(i), int(others[rng.integers(len(others))])


def pair_margin_step(table, seed, lr=0.001, w1=1.0, w2=0.1, config=TINY):
    """Take one AdaGrad step on a batch holding a single matched pair.

    Returns the intended margin I(y')(r' - r) before and after the step,
    both evaluated on the same inputs.
    """
    rng = np.random.default_rng(seed)
    i, j = opposite_label_pair(table, rng)
    params = ModelParams.initialize(table.meta, config, seed=seed)
    target, diff = table.take([i]), table.take([j])
    sign = 1.0 if table.label[j] == 1 else -1.0

    def margin():
        r = forward(params, target, "inference").reward.data[0]
        r_diff = forward(params, diff, "inference").reward.data[0]
        return sign * (r_diff - r)

    before = margin()
    out = forward(params, target, "train", diff=diff)
    loss = batch_loss(out, target.label, [0], diff.label, w1, w2)
    params.zero_grad()
    loss.total.backward()
    ad.AdaGrad(params.tensors, lr=lr).step()
    return before, margin()


def total_loss_fn(params, table, rows, diff_rows, w1=1.0, w2=0.1):
    """Closure computing the blended loss of one batch with given pairs."""
    batch = table.take(rows)
    pair_rows = np.flatnonzero(np.asarray(diff_rows) >= 0)
    diff = table.take(np.asarray(diff_rows)[pair_rows])

    def value():
        out = forward(params, batch, "train", diff=diff)
        return batch_loss(out, batch.label, pair_rows, diff.label, w1, w2).total

    return value
