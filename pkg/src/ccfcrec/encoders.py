"""Attribute, content (CBCE), co-occurrence (COCE) and user (UCE) encoders.

Embedding tables are stored one row per entity, i.e. the transpose of the
column-per-entity matrices in the model description:

* ``attr.<field>``  (vocab, d)   categorical attribute embeddings
* ``proj.<field>``  (d, dim)     projection of a dense attribute to d
* ``mlp.w1`` (h, m*d), ``mlp.b1`` (h,), ``mlp.w2`` (d, h), ``mlp.b2`` (d,)
* ``item_table``    (n_users, d) one row per user, summed into COCE
* ``user_table``    (n_items, d) one row per item, summed into UCE

Plain-numpy functions serve inference; the ``tape_*`` functions build the same
quantities on a :class:`~ccfcrec.autograd.Tape` for training.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import Node, Tape
from .data import AttributeSchema, AttributeTable, InteractionDataset


class ProtocolError(RuntimeError):
    """A cold item was routed through a path that needs training interactions."""


@dataclass
class Hyperparams:
    d: int = 128
    h: int | None = None  # hidden width, defaults to 2*d
    tau: float = 0.1
    lam: float = 0.5
    l2: float = 1e-4
    n_pos: int = 10
    n_neg: int = 40
    batch_size: int = 1024
    lr: float = 5e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    patience: int | None = 5
    leaky_slope: float = 0.01
    seed: int = 0
    mean_pool: bool = False
    mf_epochs: int = 20
    mf_lr: float = 1e-3
    embed_std: float = 0.01

    def __post_init__(self):
        if self.h is None:
            self.h = 2 * self.d
        checks = [
            (self.d >= 1 and self.h >= 1, "d and h must be >= 1"),
            (self.batch_size >= 1 and self.epochs >= 1, "batch_size and epochs must be >= 1"),
            (self.tau > 0, "tau must be > 0"),
            (self.lam >= 0 and self.l2 >= 0, "lam and l2 must be >= 0"),
            (self.n_pos >= 0 and self.n_neg >= 0, "n_pos and n_neg must be >= 0"),
            (0 < self.leaky_slope < 1, "leaky_slope must lie in (0, 1)"),
            (self.lr > 0 and self.mf_lr > 0, "learning rates must be > 0"),
            (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0, "bad Adam constants"),
            (self.patience is None or self.patience >= 1, "patience must be >= 1 or None"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "Hyperparams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class ModelParams:
    """All learnable arrays, keyed by name (see module docstring)."""

    tensors: dict[str, np.ndarray]
    schema: AttributeSchema
    n_users: int
    n_items: int
    d: int
    h: int
    tables: frozenset[str] = field(init=False, default=frozenset())

    def __post_init__(self):
        self.tables = frozenset(
            [f"attr.{f.name}" for f in self.schema.fields if f.categorical] + ["item_table", "user_table"]
        )

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.schema, self.n_users, self.n_items, self.d, self.h)

    def expected_shapes(self) -> dict[str, tuple]:
        return param_shapes(self.schema, self.n_users, self.n_items, self.d, self.h)

    def validate(self) -> None:
        shapes = self.expected_shapes()
        if set(shapes) != set(self.tensors):
            raise ValueError(f"parameter names differ: {sorted(set(shapes) ^ set(self.tensors))}")
        for name, shape in shapes.items():
            arr = self.tensors[name]
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite entries")


def param_shapes(schema: AttributeSchema, n_users: int, n_items: int, d: int, h: int) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    for f in schema.fields:
        if f.categorical:
            shapes[f"attr.{f.name}"] = (f.size, d)
        else:
            shapes[f"proj.{f.name}"] = (d, f.size)
    shapes["mlp.w1"] = (h, schema.m * d)
    shapes["mlp.b1"] = (h,)
    shapes["mlp.w2"] = (d, h)
    shapes["mlp.b2"] = (d,)
    shapes["item_table"] = (n_users, d)
    shapes["user_table"] = (n_items, d)
    return shapes


def init_params(
    schema: AttributeSchema, n_users: int, n_items: int, hyper: Hyperparams, rng: np.random.Generator | None = None
) -> ModelParams:
    """Glorot-uniform dense weights, zero biases, N(0, embed_std) tables."""
    rng = rng if rng is not None else np.random.default_rng(hyper.seed)
    tensors = {}
    for name, shape in param_shapes(schema, n_users, n_items, hyper.d, hyper.h).items():
        if name.startswith("mlp.b"):
            tensors[name] = np.zeros(shape)
        elif name.startswith(("mlp.w", "proj.")):
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-a, a, size=shape)
        else:
            tensors[name] = rng.normal(0.0, hyper.embed_std, size=shape)
    return ModelParams(tensors, schema, n_users, n_items, hyper.d, hyper.h)


def leaky_relu(x, slope=0.01):
    return np.where(x >= 0, x, slope * x)


# --------------------------------------------------------------------------
# plain forward passes
# --------------------------------------------------------------------------


def embed_attributes(item: int, params: ModelParams, table: AttributeTable) -> list[np.ndarray]:
    """One d-vector per schema field for ``item``."""
    out = []
    for f in params.schema.fields:
        if f.categorical:
            hot = table.hot_of(f.name, item)
            if len(hot) and (hot.min() < 0 or hot.max() >= f.size):
                raise IndexError(f"field {f.name!r}: hot index out of vocabulary range")
            out.append(params[f"attr.{f.name}"][hot].sum(axis=0) if len(hot) else np.zeros(params.d))
        else:
            out.append(params[f"proj.{f.name}"] @ table.dense[f.name][item])
    return out


def content_embedding(attr_embs: Sequence[np.ndarray], m: int | None = None, d: int | None = None) -> np.ndarray:
    """Concatenate attribute embeddings in schema order."""
    if not attr_embs:
        raise ValueError("content_embedding: no attribute embeddings")
    d = d if d is not None else len(attr_embs[0])
    if (m is not None and len(attr_embs) != m) or any(np.shape(e) != (d,) for e in attr_embs):
        raise ValueError(f"content_embedding: expected {m} vectors of dimension {d}")
    return np.concatenate(attr_embs)


def cbce(c: np.ndarray, params: ModelParams, slope: float = 0.01) -> np.ndarray:
    """Two-layer MLP: ``W2 leaky(W1 c + b1) + b2`` (works on a vector or a batch of rows)."""
    if np.shape(c)[-1] != params["mlp.w1"].shape[1]:
        raise ValueError(f"cbce: content embedding has dimension {np.shape(c)[-1]}, expected {params['mlp.w1'].shape[1]}")
    hidden = leaky_relu(c @ params["mlp.w1"].T + params["mlp.b1"], slope)
    q = hidden @ params["mlp.w2"].T + params["mlp.b2"]
    if not np.all(np.isfinite(q)):
        raise FloatingPointError("cbce: non-finite output")
    return q


def content_batch(items, params: ModelParams, table: AttributeTable) -> np.ndarray:
    """Content embeddings for many items at once, shape (len(items), m*d)."""
    items = np.asarray(items, dtype=np.int64)
    blocks = []
    for f in params.schema.fields:
        if f.categorical:
            hot, seg = table.gather(f.name, items)
            blk = np.zeros((len(items), params.d))
            np.add.at(blk, seg, params[f"attr.{f.name}"][hot])
        else:
            blk = table.dense[f.name][items] @ params[f"proj.{f.name}"].T
        blocks.append(blk)
    return np.concatenate(blocks, axis=1)


def cbce_batch(items, params: ModelParams, table: AttributeTable, slope: float = 0.01) -> np.ndarray:
    return cbce(content_batch(items, params, table), params, slope)


def _pool(table: np.ndarray, rows: np.ndarray, mean: bool) -> np.ndarray:
    if len(rows) == 0:
        return np.zeros(table.shape[1])
    out = table[rows].sum(axis=0)
    return out / len(rows) if mean else out


def coce(item: int, params: ModelParams, train: InteractionDataset, mean: bool = False) -> np.ndarray:
    """Sum of ``item_table`` rows over the training users of ``item``."""
    _require_warm([item], train)
    return _pool(params["item_table"], train.users_of_item(item), mean)


def coce_batch(items, params: ModelParams, train: InteractionDataset, mean: bool = False) -> np.ndarray:
    items = np.asarray(items, dtype=np.int64)
    _require_warm(items, train)
    return np.stack([_pool(params["item_table"], train.users_of_item(v), mean) for v in items]).reshape(len(items), params.d)


def _require_warm(items, train: InteractionDataset) -> None:
    warm = np.isin(items, train.items)
    if not np.all(warm):
        bad = np.asarray(items)[~warm][0]
        raise ProtocolError(f"COCE requested for item {bad}, which is not a training item")


def uce(user: int, params: ModelParams, train: InteractionDataset, mean: bool = False) -> np.ndarray:
    """Sum of ``user_table`` rows over the training items of ``user``."""
    if not 0 <= user < train.n_users:
        raise IndexError(f"user {user} out of range")
    return _pool(params["user_table"], train.items_of_user(user), mean)


def uce_all(params: ModelParams, train: InteractionDataset, mean: bool = False) -> np.ndarray:
    """UCE for every user, shape (n_users, d)."""
    users, items = train.pairs[:, 0], train.pairs[:, 1]
    out = np.zeros((train.n_users, params.d))
    np.add.at(out, users, params["user_table"][items])
    if mean:
        deg = np.bincount(users, minlength=train.n_users)
        out /= np.maximum(deg, 1)[:, None]
    return out


def predict(a: np.ndarray, b: np.ndarray) -> float:
    """Inner-product predictor shared by the CBCE and COCE paths."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"predict: dimension mismatch {a.shape} vs {b.shape}")
    return float(a @ b)


# --------------------------------------------------------------------------
# tape builders
# --------------------------------------------------------------------------


def tape_cbce(tape: Tape, items, params: ModelParams, table: AttributeTable, slope: float) -> Node:
    """CBCE rows for ``items`` recorded on ``tape``."""
    items = np.asarray(items, dtype=np.int64)
    blocks = []
    for f in params.schema.fields:
        if f.categorical:
            hot, seg = table.gather(f.name, items)
            blocks.append(tape.lookup(f"attr.{f.name}", hot, seg, len(items)))
        else:
            raw = tape.constant(table.dense[f.name][items])
            blocks.append(tape.affine(raw, tape.param(f"proj.{f.name}")))
    c = tape.concat(blocks, axis=1) if len(blocks) > 1 else blocks[0]
    hidden = tape.leaky_relu(tape.affine(c, tape.param("mlp.w1"), tape.param("mlp.b1")), slope)
    return tape.affine(hidden, tape.param("mlp.w2"), tape.param("mlp.b2"))


def _pool_segments(groups: Sequence[np.ndarray]):
    counts = np.array([len(g) for g in groups], dtype=np.int64)
    rows = np.concatenate(groups) if len(groups) else np.zeros(0, dtype=np.int64)
    return rows.astype(np.int64), np.repeat(np.arange(len(groups)), counts), counts


def tape_coce(tape: Tape, items, train: InteractionDataset, mean: bool = False) -> Node:
    rows, seg, counts = _pool_segments([train.users_of_item(v) for v in items])
    z = tape.lookup("item_table", rows, seg, len(items))
    return _tape_mean(tape, z, counts) if mean else z


def tape_uce(tape: Tape, users, train: InteractionDataset, mean: bool = False) -> Node:
    rows, seg, counts = _pool_segments([train.items_of_user(u) for u in users])
    s = tape.lookup("user_table", rows, seg, len(users))
    return _tape_mean(tape, s, counts) if mean else s


def _tape_mean(tape: Tape, x: Node, counts: np.ndarray) -> Node:
    # per-row scaling expressed as a weighted lookup is not in the primitive set;
    # scale each row by gathering it into a one-row segment per distinct count
    out = x
    for c in np.unique(counts[counts > 1]):
        rows = np.flatnonzero(counts == c)
        keep = np.setdiff1d(np.arange(len(counts)), rows)
        scaled = tape.scale(tape.lookup(out, rows), 1.0 / c)
        rest = tape.lookup(out, keep)
        merged = tape.concat([scaled, rest], axis=0)
        order = np.argsort(np.concatenate([rows, keep]))
        out = tape.lookup(merged, order)
    return out
