"""The AMEN forward graph over batches of impressions.

Two pathways feed the click probability:

* item level: the target item attends over the active-intention sequence
  (items exposed in search and shop scenes) and over the short and long
  click histories; the Main Net maps those, the user profile and the
  target to a logit;
* scene level: a prompt built from the target and the serving context
  attends over the moveline; the Reward Net turns the result into an
  additive reward on that logit.

All functions are batched: a batch is an :class:`~amen.data.ImpressionTable`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import N_HOUR_BUCKETS, DatasetMeta, ImpressionTable


class ContractViolation(RuntimeError):
    """A caller broke a documented precondition."""


class CheckpointMismatch(ContractViolation):
    """A checkpoint does not belong to the dataset it is used with."""


@dataclass
class ModelConfig:
    d: int = 32
    n_heads: int = 4
    main_hidden: tuple = (64, 32)
    reward_hidden: tuple = (32,)
    use_aiseq: bool = True
    use_moveline_reward: bool = True

    def __post_init__(self):
        self.main_hidden = tuple(self.main_hidden)
        self.reward_hidden = tuple(self.reward_hidden)
        if self.d <= 0 or self.n_heads <= 0 or self.d % self.n_heads:
            raise ValueError(f"d={self.d} must be a positive multiple of n_heads={self.n_heads}")


# embedding table name -> vocabulary key in DatasetMeta
_EMBEDDINGS = {
    "item_id": "item_id",
    "category_id": "category_id",
    "shop_id": "shop_id",
    "price_bucket": "price_bucket",
    "kind": "kind",
    "entity_id": "entity_id",
    "recency_bucket": "recency_bucket",
    "scenario_id": "scenario_id",
    "age_bucket": "age_bucket",
    "activity_bucket": "activity_bucket",
}


class ModelParams:
    """Named learnable tensors, ordered deterministically.

    Names are prefixed by group: ``emb.``, ``item_attn.``, ``main.``,
    ``scene_attn.``, ``prompt.``, ``reward.``. The last three form the
    reward partition.
    """

    REWARD_PREFIXES = ("scene_attn.", "prompt.", "reward.")

    def __init__(self, tensors: dict[str, Tensor], config: ModelConfig):
        self.tensors = dict(tensors)
        self.config = config

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def reward_names(self) -> list[str]:
        return [n for n in self.tensors if n.startswith(self.REWARD_PREFIXES)]

    def main_names(self) -> list[str]:
        return [n for n in self.tensors if n.startswith(("main.", "item_attn."))]

    def embedding_names(self) -> list[str]:
        return [n for n in self.tensors if n.startswith("emb.")]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams({n: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                            for n, t in self.tensors.items()}, self.config)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    @classmethod
    def initialize(cls, meta: DatasetMeta, config: ModelConfig | None = None,
                   seed: int = 0) -> "ModelParams":
        config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        d = config.d
        tensors: dict[str, Tensor] = {}

        def emb(name: str, rows: int):
            tensors[f"emb.{name}"] = Tensor(rng.uniform(-0.05, 0.05, (rows, d)), requires_grad=True)

        def dense(name: str, fan_in: int, fan_out: int, bias: bool = True):
            bound = 1.0 / np.sqrt(fan_in)
            tensors[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)
            if bias:
                tensors[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)

        for name, key in _EMBEDDINGS.items():
            emb(name, meta.vocab[key])
        emb("hour", N_HOUR_BUCKETS)
        for group in ("item_attn", "scene_attn"):
            for proj in ("q", "k", "v"):
                dense(f"{group}.{proj}", d, d, bias=False)
        widths = (5 * d, *config.main_hidden, 1)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            dense(f"main.{i}", a, b)
        dense("prompt", 3 * d, d, bias=False)
        widths = (d, *config.reward_hidden, 1)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            dense(f"reward.{i}", a, b)
        return cls(tensors, config)

    # checkpoints -------------------------------------------------------
    def save(self, path, meta_digest: str, extra: dict | None = None) -> None:
        """Write a JSON checkpoint; identical parameters give identical bytes."""
        doc = {
            "meta_digest": meta_digest,
            "config": asdict(self.config),
            "extra": extra or {},
            "tensors": [{"name": n, "shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
                        for n, t in self.tensors.items()],
        }
        Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, meta: DatasetMeta | None = None) -> tuple["ModelParams", dict]:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if meta is not None and doc["meta_digest"] != meta.digest():
            raise CheckpointMismatch(
                f"checkpoint was trained on dataset meta {doc['meta_digest'][:12]}, "
                f"got {meta.digest()[:12]}")
        config = ModelConfig(**doc["config"])
        tensors = {e["name"]: Tensor(np.asarray(e["values"], dtype=np.float64).reshape(e["shape"]),
                                     requires_grad=True)
                   for e in doc["tensors"]}
        return cls(tensors, config), doc


@dataclass
class ForwardOutput:
    y_main: Tensor
    reward: Tensor
    y_hat: Tensor
    logit: Tensor
    reward_diff: Tensor | None = None
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# building blocks


def embed_items(params: ModelParams, items) -> Tensor:
    """Sum of item_id, category, shop and price embeddings; items[..., 4] -> [..., d]."""
    items = np.asarray(items)
    out = ad.gather(params["emb.item_id"], items[..., 0])
    out = out + ad.gather(params["emb.category_id"], items[..., 1])
    out = out + ad.gather(params["emb.shop_id"], items[..., 2])
    return out + ad.gather(params["emb.price_bucket"], items[..., 3])


def embed_nodes(params: ModelParams, nodes) -> Tensor:
    """Moveline node features [..., (kind, category, entity, recency)] -> [..., d].

    Node categories share the item category table so scenes and items meet
    in one space.
    """
    nodes = np.asarray(nodes)
    out = ad.gather(params["emb.kind"], nodes[..., 0])
    out = out + ad.gather(params["emb.category_id"], nodes[..., 1])
    out = out + ad.gather(params["emb.entity_id"], nodes[..., 2])
    return out + ad.gather(params["emb.recency_bucket"], nodes[..., 3])


def embed_user(params: ModelParams, profile) -> Tensor:
    profile = np.asarray(profile)
    return ad.gather(params["emb.age_bucket"], profile[..., 0]) + \
        ad.gather(params["emb.activity_bucket"], profile[..., 1])


def mhta(query: Tensor, sequence: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
         n_heads: int, mask=None) -> Tensor:
    """Multi-head target attention of one query over a sequence.

    Shapes: query [B, d] (or [d]), sequence [B, L, d] (or [L, d]), mask
    [B, L] with True at valid positions. Each head scores with its slice
    of the projections, scaled by sqrt(d/h); heads are concatenated.
    A fully masked row returns zeros.
    """
    single = query.ndim == 1
    if single:
        query = query.reshape(1, -1)
        sequence = sequence.reshape(1, *sequence.shape)
        if mask is not None:
            mask = np.asarray(mask)[None]
    b, length, d = sequence.shape
    if query.shape != (b, d):
        raise ad.DimensionError(f"query shape {query.shape} does not match sequence {sequence.shape}")
    if d % n_heads:
        raise ad.DimensionError(f"d={d} not divisible by n_heads={n_heads}")
    dh = d // n_heads
    if mask is None:
        mask = np.ones((b, length), dtype=bool)
    q = (query @ wq).reshape(b, n_heads, 1, dh)
    k = (sequence @ wk).reshape(b, length, n_heads, dh).transpose(0, 2, 3, 1)
    v = (sequence @ wv).reshape(b, length, n_heads, dh).transpose(0, 2, 1, 3)
    logits = (q @ k) * (1.0 / np.sqrt(dh))
    weights = ad.masked_softmax(logits, np.asarray(mask, dtype=bool)[:, None, None, :])
    out = (weights @ v).reshape(b, d)
    return out.reshape(d) if single else out


def mlp(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    """Dense stack ``prefix.0 .. prefix.k`` with ReLU between layers, linear head."""
    i = 0
    while f"{prefix}.{i + 1}.w" in params.tensors:
        x = ad.relu(x @ params[f"{prefix}.{i}.w"] + params[f"{prefix}.{i}.b"])
        i += 1
    return x @ params[f"{prefix}.{i}.w"] + params[f"{prefix}.{i}.b"]


def build_prompt(params: ModelParams, target, scenario_id, hour) -> Tensor:
    """Virtual scene node for the target: [item; scenario; hour] projected to d."""
    parts = [embed_items(params, target),
             ad.gather(params["emb.scenario_id"], np.asarray(scenario_id)),
             ad.gather(params["emb.hour"], np.asarray(hour))]
    return ad.concat(parts, axis=-1) @ params["prompt.w"]


def moveline_reward(params: ModelParams, batch: ImpressionTable) -> Tensor:
    """Scene-level attention of the target prompt over the moveline -> reward [B]."""
    prompt = build_prompt(params, batch.target, batch.scenario_id, batch.hour())
    nodes = embed_nodes(params, batch.moveline)
    g = mhta(prompt, nodes, params["scene_attn.q.w"], params["scene_attn.k.w"],
             params["scene_attn.v.w"], params.config.n_heads, batch.mask("moveline"))
    return mlp(params, "reward", g).reshape(len(batch))


def main_logit(params: ModelParams, batch: ImpressionTable) -> Tensor:
    cfg = params.config
    e_t = embed_items(params, batch.target)
    wq, wk, wv = (params[f"item_attn.{p}.w"] for p in "qkv")
    parts = []
    for name in ("aiseq", "short_seq", "long_seq"):
        if name == "aiseq" and not cfg.use_aiseq:
            parts.append(Tensor(np.zeros((len(batch), cfg.d))))
            continue
        seq = embed_items(params, getattr(batch, name))
        parts.append(mhta(e_t, seq, wq, wk, wv, cfg.n_heads, batch.mask(name)))
    parts.append(embed_user(params, batch.profile))
    parts.append(e_t)
    return mlp(params, "main", ad.concat(parts, axis=-1)).reshape(len(batch))


def _diff_reward(params: ModelParams, diff: ImpressionTable) -> Tensor:
    return moveline_reward(params, diff)


def forward(params: ModelParams, batch: ImpressionTable, mode: str = "train",
            diff: ImpressionTable | None = None) -> ForwardOutput:
    """Predict click probabilities for ``batch``.

    In train mode an optional ``diff`` batch (the paired impressions) gets
    its own reward from the same reward parameters. Inference mode refuses
    a diff batch: that branch exists only for training.
    """
    if mode not in ("train", "inference"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "inference" and diff is not None:
        raise ContractViolation("the diff branch is not part of the inference graph")
    y_main = main_logit(params, batch)
    if params.config.use_moveline_reward:
        r = moveline_reward(params, batch)
    else:
        r = Tensor(np.zeros(len(batch)))
    logit = y_main + r
    out = ForwardOutput(y_main=y_main, reward=r, y_hat=ad.sigmoid(logit), logit=logit)
    if diff is not None and len(diff) and params.config.use_moveline_reward:
        out.reward_diff = _diff_reward(params, diff)
    return out
