"""Joint training with lazy Adam, ablation variants, checkpoints and run history."""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd import GradBag
from .data import AttributeSchema, CoocIndex, SplitBundle, build_cooccurrence_index
from .encoders import Hyperparams, ModelParams, init_params
from .objectives import VARIANTS, LossReport, build_loss, build_mf_loss
from .sampling import _PairLookup, iter_batches

log = logging.getLogger(__name__)

MAGIC = b"CCFC1"
FORMAT_VERSION = 1


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or update; ``last_good`` holds the last finite parameters."""

    def __init__(self, msg, last_good: ModelParams | None = None, history=None):
        super().__init__(msg)
        self.last_good = last_good
        self.history = history


class CheckpointError(ValueError):
    """Truncated or otherwise unreadable checkpoint file."""


class IncompatibleCheckpoint(CheckpointError):
    """Checkpoint written for another format version or schema."""


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def slot(self, name: str, shape) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.m:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
        return self.m[name], self.v[name]


def adam_step(
    params: dict[str, np.ndarray],
    grads: GradBag,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    frozen: frozenset[str] | set[str] = frozenset(),
) -> None:
    """One bias-corrected Adam update, in place.

    Sparse-row gradients only touch their rows and the matching moment rows
    (lazy Adam); bias correction uses the global step count.
    """
    b1, b2 = betas
    if not grads.is_finite():
        raise DivergenceError("non-finite gradient")
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    updates = {}
    for name in sorted(grads.names() - set(frozen)):
        p = params[name]
        m, v = state.slot(name, p.shape)
        if name in grads.dense:
            g = grads.to_dense(name, p.shape)
            m_new = b1 * m + (1 - b1) * g
            v_new = b2 * v + (1 - b2) * g * g
            step = lr * (m_new / c1) / (np.sqrt(v_new / c2) + eps)
            updates[name] = (None, m_new, v_new, p - step)
        else:
            rows, g = grads.sparse_rows[name]
            m_new = b1 * m[rows] + (1 - b1) * g
            v_new = b2 * v[rows] + (1 - b2) * g * g
            step = lr * (m_new / c1) / (np.sqrt(v_new / c2) + eps)
            updates[name] = (rows, m_new, v_new, p[rows] - step)
    for name, (rows, m_new, v_new, p_new) in updates.items():
        if not np.all(np.isfinite(p_new)):
            raise DivergenceError(f"non-finite Adam update for {name}")
    for name, (rows, m_new, v_new, p_new) in updates.items():
        if rows is None:
            state.m[name][...] = m_new
            state.v[name][...] = v_new
            params[name][...] = p_new
        else:
            state.m[name][rows] = m_new
            state.v[name][rows] = v_new
            params[name][rows] = p_new


# --------------------------------------------------------------------------
# history
# --------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    l_q: float
    l_z: float
    l_c: float
    l_reg: float
    total: float
    valid_ndcg10: float | None
    seconds: float
    phase: str = "main"


@dataclass
class RunHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.phase == self.records[-1].phase and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(rec)

    def main(self) -> list[EpochRecord]:
        return [r for r in self.records if r.phase == "main"]

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r)) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "RunHistory":
        out = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    out.records.append(EpochRecord(**json.loads(line)))
        return out


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


def _mean_reports(reports: list[LossReport], sizes: list[int]) -> LossReport:
    w = np.asarray(sizes, dtype=np.float64)
    vals = np.array([[r.l_q, r.l_z, r.l_c, r.l_reg, r.total] for r in reports])
    return LossReport(*(vals * w[:, None]).sum(axis=0) / w.sum())


def pretrain_mf(params: ModelParams, bundle: SplitBundle, hyper: Hyperparams, history: RunHistory | None = None) -> None:
    """BPR matrix factorization on the warm interactions, updating both collaborative tables."""
    train = bundle.train
    lookup = _PairLookup(train)
    state = AdamState()
    warm = train.items
    for epoch in range(1, hyper.mf_epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([hyper.seed, epoch, 7919])
        order = rng.permutation(len(train))
        losses, sizes = [], []
        for start in range(0, len(order), hyper.batch_size):
            pairs = train.pairs[order[start : start + hyper.batch_size]]
            users, pos = pairs[:, 0], pairs[:, 1]
            neg = warm[rng.integers(len(warm), size=len(users))]
            bad = lookup.contains(users, neg)
            while bad.any():
                neg[bad] = warm[rng.integers(len(warm), size=int(bad.sum()))]
                bad = lookup.contains(users, neg)
            loss, tape, root = build_mf_loss(np.stack([users, pos, neg], axis=1), params, train, hyper.mean_pool)
            if not np.isfinite(loss):
                raise DivergenceError("non-finite loss during MF pretraining")
            adam_step(params.tensors, tape.backward(root), state, hyper.mf_lr, (hyper.beta1, hyper.beta2), hyper.eps)
            losses.append(loss)
            sizes.append(len(users))
        if history is not None:
            mean = float(np.sum(losses) / np.sum(sizes))
            history.append(EpochRecord(epoch, 0.0, mean, 0.0, 0.0, mean, None, time.perf_counter() - t0, "pretrain"))


def train(
    bundle: SplitBundle,
    hyper: Hyperparams,
    variant: str = "full",
    params: ModelParams | None = None,
    restore_best: bool = True,
    on_epoch=None,
) -> tuple[ModelParams, RunHistory]:
    """Fit the model on ``bundle.train`` with early stopping on validation NDCG@10.

    ``variant``: ``full`` optimizes all four terms; ``no-contrastive`` keeps only
    the CBCE ranking loss (plus regularization); ``pretrain`` first fits the two
    collaborative tables by BPR matrix factorization, then freezes
    ``item_table`` and trains without the COCE ranking loss.
    """
    from .evaluation import evaluate  # evaluation imports training for checkpoints

    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    tr = bundle.train
    if len(tr) == 0:
        raise ValueError("training split is empty")
    table = tr.attributes
    if table is None:
        raise ValueError("training split carries no attribute table")
    if params is None:
        params = init_params(table.schema, tr.n_users, tr.n_items, hyper)
    history = RunHistory()
    frozen: frozenset[str] = frozenset()
    if variant == "pretrain":
        pretrain_mf(params, bundle, hyper, history)
        frozen = frozenset({"item_table"})

    cooc: CoocIndex | None = None
    if variant != "no-contrastive" and (hyper.n_pos or hyper.n_neg):
        cooc = build_cooccurrence_index(tr)

    state = AdamState()
    best_score, best_params, stale = -np.inf, None, 0
    last_good = params.copy()
    has_valid = len(bundle.valid) > 0
    for epoch in range(1, hyper.epochs + 1):
        t0 = time.perf_counter()
        reports, sizes = [], []
        for batch in iter_batches(tr, cooc, hyper.n_pos, hyper.n_neg, hyper.batch_size, hyper.seed, epoch):
            try:
                report, tape, root = build_loss(batch, params, hyper, tr, table, variant)
                grads = tape.backward(root)
                adam_step(params.tensors, grads, state, hyper.lr, (hyper.beta1, hyper.beta2), hyper.eps, frozen)
            except FloatingPointError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}", last_good, history) from exc
            reports.append(report)
            sizes.append(len(batch))
        mean = _mean_reports(reports, sizes)
        score = None
        if has_valid:
            score = evaluate(bundle.valid, tr, params, ks=(10,), slope=hyper.leaky_slope, mean_pool=hyper.mean_pool).ndcg[10]
        history.append(
            EpochRecord(epoch, mean.l_q, mean.l_z, mean.l_c, mean.l_reg, mean.total, score, time.perf_counter() - t0)
        )
        last_good = params.copy()
        log.info("epoch %d total=%.5f valid_ndcg10=%s", epoch, mean.total, score)
        if on_epoch is not None:
            on_epoch(epoch, params, history)
        if score is None:
            continue
        if score > best_score:
            best_score, best_params, stale = score, params.copy(), 0
            history.best_epoch = epoch
        else:
            stale += 1
            if hyper.patience is not None and stale >= hyper.patience:
                log.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
                break
    if restore_best and best_params is not None:
        params = best_params
    return params, history


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, state: AdamState | None, meta: dict, path) -> None:
    """``CCFC1`` magic, u64 header length, JSON header, then little-endian float64 arrays."""
    arrays = [(name, params.tensors[name]) for name in sorted(params.tensors)]
    if state is not None:
        for name in sorted(state.m):
            arrays.append((f"adam.m.{name}", state.m[name]))
            arrays.append((f"adam.v.{name}", state.v[name]))
    header = {
        "version": FORMAT_VERSION,
        "schema": params.schema.to_json(),
        "schema_hash": params.schema.digest(),
        "n_users": params.n_users,
        "n_items": params.n_items,
        "d": params.d,
        "h": params.h,
        "adam_t": state.t if state is not None else None,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "meta": meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path, expected_schema_hash: str | None = None) -> tuple[ModelParams, AdamState | None, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        if raw[:4] == MAGIC[:4]:
            raise IncompatibleCheckpoint(f"{path}: unsupported checkpoint version {raw[:5]!r}")
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated header)")
    (n,) = struct.unpack("<Q", raw[5:13])
    if len(raw) < 13 + n:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[13 : 13 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("version") != FORMAT_VERSION:
        raise IncompatibleCheckpoint(f"{path}: checkpoint version {header.get('version')} != {FORMAT_VERSION}")
    schema = AttributeSchema.from_json(header["schema"])
    if schema.digest() != header["schema_hash"]:
        raise CheckpointError(f"{path}: schema hash does not match embedded schema")
    if expected_schema_hash is not None and header["schema_hash"] != expected_schema_hash:
        raise IncompatibleCheckpoint(
            f"{path}: checkpoint schema {header['schema_hash']} does not match data schema {expected_schema_hash}"
        )
    offset = 13 + n
    tensors, adam_m, adam_v = {}, {}, {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        size = int(np.prod(shape)) * 8
        if offset + size > len(raw):
            raise CheckpointError(f"{path}: truncated data in array {spec['name']!r}")
        arr = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += size
        name = spec["name"]
        if name.startswith("adam.m."):
            adam_m[name[7:]] = arr
        elif name.startswith("adam.v."):
            adam_v[name[7:]] = arr
        else:
            tensors[name] = arr
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    params = ModelParams(tensors, schema, header["n_users"], header["n_items"], header["d"], header["h"])
    params.validate()
    state = AdamState(adam_m, adam_v, header["adam_t"]) if header["adam_t"] is not None else None
    return params, state, header["meta"]
