"""Loss terms: InfoNCE contrastive loss, the two BPR losses, their weighted sum,
and the BPR matrix-factorization loss used to pretrain the collaborative tables."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Node, Tape
from .data import AttributeTable, InteractionDataset
from .encoders import Hyperparams, ModelParams, coce_batch, tape_cbce, tape_coce, tape_uce
from .sampling import ContrastiveBatch

VARIANTS = ("full", "no-contrastive", "pretrain")


def _logsumexp(x: np.ndarray) -> float:
    shift = np.max(x)
    return float(shift + np.log(np.sum(np.exp(x - shift))))


def loss_contrastive(q: np.ndarray, z_pos, z_negs, tau: float) -> float:
    """InfoNCE for one anchor, averaged over its positives.

    Each positive's softmax denominator holds that positive and every negative.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    z_pos = np.atleast_2d(np.asarray(z_pos, dtype=np.float64))
    if z_pos.size == 0:
        raise ValueError("loss_contrastive needs at least one positive")
    z_negs = np.asarray(z_negs, dtype=np.float64).reshape(-1, len(q))
    pos = z_pos @ q / tau
    neg = z_negs @ q / tau
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise FloatingPointError("loss_contrastive: non-finite inner products")
    return float(np.mean([_logsumexp(np.append(neg, p)) - p for p in pos]))


def loss_bpr(score_pos: float, score_neg: float) -> float:
    """``-log sigmoid(pos - neg)`` as a softplus."""
    x = float(score_neg) - float(score_pos)
    if not np.isfinite(x):
        raise FloatingPointError("loss_bpr: non-finite scores")
    return max(x, 0.0) + float(np.log1p(np.exp(-abs(x))))


@dataclass
class LossReport:
    l_q: float
    l_z: float
    l_c: float
    l_reg: float
    total: float

    def as_dict(self) -> dict:
        return {"l_q": self.l_q, "l_z": self.l_z, "l_c": self.l_c, "l_reg": self.l_reg, "total": self.total}


def _bpr_sum(tape: Tape, pos: Node, neg: Node) -> Node:
    diff = tape.add(pos, tape.scale(neg, -1.0))
    return tape.scale(tape.sum(tape.log_sigmoid(diff)), -1.0)


def _sq_norm(tape: Tape, x: Node) -> Node:
    return tape.sum(tape.inner(x, x))


def build_loss(
    batch: ContrastiveBatch,
    params: ModelParams,
    hyper: Hyperparams,
    train: InteractionDataset,
    table: AttributeTable,
    variant: str = "full",
) -> tuple[LossReport, Tape, Node]:
    """Record the overall training loss for one batch.

    ``l_q`` and ``l_z`` are sums over the batch triples, ``l_c`` is the mean over
    (anchor, positive) pairs, ``l_reg`` the squared norm of every parameter
    entry the batch touches.  ``no-contrastive`` drops ``l_z`` and ``l_c``;
    ``pretrain`` drops ``l_z`` and reads COCE as constants (frozen table).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    use_z = variant == "full"
    use_c = variant != "no-contrastive" and batch.pos_items.shape[1] > 0
    tape = Tape(params.tensors)
    zero = tape.constant(0.0)
    B = len(batch)
    touched: dict[str, list[np.ndarray]] = {}

    anchors, a_inv = np.unique(batch.items, return_inverse=True)
    q_all = tape_cbce(tape, anchors, params, table, hyper.leaky_slope)
    q = tape.lookup(q_all, a_inv)
    for f in params.schema.fields:
        if f.categorical:
            touched.setdefault(f"attr.{f.name}", []).append(table.gather(f.name, anchors)[0])

    users, u_inv = np.unique(np.concatenate([batch.pos_users, batch.neg_users]), return_inverse=True)
    s_all = tape_uce(tape, users, train, hyper.mean_pool)
    touched["user_table"] = [np.concatenate([train.items_of_user(u) for u in users])]
    s_pos = tape.lookup(s_all, u_inv[:B])
    s_neg = tape.lookup(s_all, u_inv[B:])

    l_q = _bpr_sum(tape, tape.inner(q, s_pos), tape.inner(q, s_neg))
    l_z = l_c = zero

    if use_z or use_c:
        pool = np.unique(np.concatenate([batch.items, batch.pos_items.ravel(), batch.neg_items.ravel()]))
        if use_z:
            z_all = tape_coce(tape, pool, train, hyper.mean_pool)
            touched["item_table"] = [np.concatenate([train.users_of_item(v) for v in pool])]
        else:
            z_all = tape.constant(coce_batch(pool, params, train, hyper.mean_pool))
        where = {int(v): i for i, v in enumerate(pool)}
        if use_z:
            z = tape.lookup(z_all, [where[int(v)] for v in batch.items])
            l_z = _bpr_sum(tape, tape.inner(z, s_pos), tape.inner(z, s_neg))
        if use_c:
            l_c = _contrastive_batch(tape, q, z_all, batch, where, hyper.tau)

    l_reg = zero
    if hyper.l2 > 0:
        terms = []
        for name, parts in touched.items():
            rows = np.unique(np.concatenate(parts))
            if len(rows):
                terms.append(_sq_norm(tape, tape.lookup(name, rows)))
        dense = ["mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"] + [f"proj.{f.name}" for f in params.schema.fields if not f.categorical]
        for name in dense:
            p = tape.param(name)
            terms.append(_sq_norm(tape, p) if p.value.ndim == 2 else tape.inner(p, p))
        for t in terms:
            l_reg = tape.add(l_reg, t)

    total = tape.add(l_q, l_z)
    total = tape.add(total, tape.scale(l_c, hyper.lam))
    total = tape.add(total, tape.scale(l_reg, hyper.l2))
    report = LossReport(*(float(n.value) for n in (l_q, l_z, l_c, l_reg, total)))
    if not np.isfinite(report.total):
        raise FloatingPointError("non-finite training loss")
    return report, tape, total


def _contrastive_batch(tape: Tape, q: Node, z_all: Node, batch: ContrastiveBatch, where: dict, tau: float) -> Node:
    B, n_pos = batch.pos_items.shape
    n_neg = batch.neg_items.shape[1]
    P = B * n_pos
    pos_idx = np.array([where[int(v)] for v in batch.pos_items.ravel()], dtype=np.int64)
    pos_scores = tape.scale(tape.inner(tape.lookup(q, np.repeat(np.arange(B), n_pos)), tape.lookup(z_all, pos_idx)), 1.0 / tau)
    if n_neg == 0:
        return tape.constant(0.0)  # each softmax has a single term
    neg_idx = np.array([where[int(v)] for v in batch.neg_items.ravel()], dtype=np.int64)
    neg_scores = tape.scale(tape.inner(tape.lookup(q, np.repeat(np.arange(B), n_neg)), tape.lookup(z_all, neg_idx)), 1.0 / tau)
    # pair p = (b, j) gets the negatives of anchor b: flat neg positions b*n_neg + k
    anchor_of_pair = np.repeat(np.arange(B), n_pos)
    gather = (anchor_of_pair[:, None] * n_neg + np.arange(n_neg)[None, :]).ravel()
    logits = tape.concat([pos_scores, tape.lookup(neg_scores, gather)], axis=0)
    segments = np.concatenate([np.arange(P), np.repeat(np.arange(P), n_neg)])
    lse = tape.log_sum_exp(logits, segments, P)
    return tape.scale(tape.add(tape.sum(lse), tape.scale(tape.sum(pos_scores), -1.0)), 1.0 / P)


def loss_total(batch, params, hyper, train, table, variant="full") -> tuple[LossReport, Tape]:
    report, tape, _ = build_loss(batch, params, hyper, train, table, variant)
    return report, tape


# --------------------------------------------------------------------------
# matrix-factorization pretraining
# --------------------------------------------------------------------------


def check_mf_triples(triples, train: InteractionDataset) -> np.ndarray:
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    for u, vp, vn in triples:
        seen = train.items_of_user(u)
        if vp not in seen or vn in seen:
            raise ValueError(f"invalid MF triple ({u}, {vp}, {vn}): need v+ in V_u and v- outside it")
    return triples


def loss_mf_pretrain(triples, params: ModelParams, train: InteractionDataset, mean: bool = False) -> float:
    """``-sum log sigmoid(<s_u, z_v+> - <s_u, z_v->)`` with UCE/COCE from the two tables."""
    report, _, _ = build_mf_loss(triples, params, train, mean)
    return report


def build_mf_loss(triples, params: ModelParams, train: InteractionDataset, mean: bool = False) -> tuple[float, Tape, Node]:
    triples = check_mf_triples(triples, train)
    tape = Tape(params.tensors)
    users, u_inv = np.unique(triples[:, 0], return_inverse=True)
    items, i_inv = np.unique(triples[:, 1:].ravel(), return_inverse=True)
    i_inv = i_inv.reshape(-1, 2)
    s_all = tape_uce(tape, users, train, mean)
    z_all = tape_coce(tape, items, train, mean)
    s = tape.lookup(s_all, u_inv)
    loss = _bpr_sum(tape, tape.inner(s, tape.lookup(z_all, i_inv[:, 0])), tape.inner(s, tape.lookup(z_all, i_inv[:, 1])))
    return float(loss.value), tape, loss
