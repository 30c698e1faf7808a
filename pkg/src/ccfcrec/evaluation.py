"""Cold-item ranking, HR@k / NDCG@k and embedding distance reports."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import AttributeTable, InteractionDataset
from .encoders import ModelParams, cbce_batch, uce, uce_all

log = logging.getLogger(__name__)

DEFAULT_KS = (5, 10, 20)


def rank_order(scores: np.ndarray, users: np.ndarray | None = None) -> np.ndarray:
    """Positions sorted by score descending, ties by ascending user index."""
    users = np.arange(len(scores)) if users is None else np.asarray(users)
    return np.lexsort((users, -np.asarray(scores)))


def rank_users_for_item(
    item: int,
    params: ModelParams,
    table: AttributeTable,
    train: InteractionDataset,
    user_pool: Sequence[int] | None = None,
    slope: float = 0.01,
    mean_pool: bool = False,
) -> np.ndarray:
    """Users ordered by ``<q_v, s_u>``; ``q_v`` comes from attributes only."""
    if table is None:
        raise ValueError("item attributes are required to rank users")
    pool = np.arange(train.n_users) if user_pool is None else np.asarray(user_pool, dtype=np.int64)
    if len(pool) == 0:
        raise ValueError("empty user pool")
    q = cbce_batch([item], params, table, slope)[0]
    s = np.stack([uce(int(u), params, train, mean_pool) for u in pool])
    return pool[rank_order(s @ q, pool)]


def hr_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    """Relevant users within the top ``k``, divided by ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    top = set(int(u) for u in list(ranked)[:k])
    return sum(1 for u in set(relevant) if int(u) in top) / k


def ndcg_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    """Mean over relevant users of ``1[rank <= k] / log2(1 + rank)``, 1-based rank.

    No ideal-DCG normalization is applied.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(int(u) for u in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    gain = 0.0
    for pos, u in enumerate(list(ranked)[:k], start=1):
        if int(u) in relevant:
            gain += 1.0 / math.log2(1 + pos)
    return gain / len(relevant)


def recall_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    """Conventional hit ratio: share of relevant users found in the top ``k``."""
    relevant = set(int(u) for u in relevant)
    return hr_at_k(ranked, relevant, k) * k / len(relevant)


@dataclass
class RankingMetrics:
    hr: dict[int, float]
    ndcg: dict[int, float]
    n_items: int
    dropped_users: int = 0
    skipped_items: list[int] = field(default_factory=list)

    def to_json(self) -> list[dict]:
        return [{"k": k, "hr": self.hr[k], "ndcg": self.ndcg[k]} for k in sorted(self.hr)]

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    def table(self) -> str:
        lines = [f"{'k':>4} {'HR@k':>10} {'NDCG@k':>10}"]
        for k in sorted(self.hr):
            lines.append(f"{k:>4} {self.hr[k]:>10.4f} {self.ndcg[k]:>10.4f}")
        lines.append(f"items evaluated: {self.n_items}")
        return "\n".join(lines)


def _ranks_of(scores: np.ndarray, relevant: np.ndarray) -> np.ndarray:
    """1-based rank of each relevant user under :func:`rank_order` ordering."""
    ranks = np.empty(len(scores), dtype=np.int64)
    ranks[rank_order(scores)] = np.arange(1, len(scores) + 1)
    return ranks[relevant]


def evaluate(
    test: InteractionDataset,
    train: InteractionDataset,
    params: ModelParams,
    ks: Sequence[int] = DEFAULT_KS,
    slope: float = 0.01,
    mean_pool: bool = False,
    recall_hr: bool = False,
    table: AttributeTable | None = None,
) -> RankingMetrics:
    """Mean HR@k and NDCG@k over the cold items of ``test``.

    Every user index is a candidate.  Relevant users without training
    interactions (zero UCE) are dropped and counted in ``dropped_users``; an
    item left with no relevant user is skipped.
    """
    table = table if table is not None else test.attributes
    items = test.items
    if len(items) == 0:
        raise ValueError("empty test split")
    overlap = np.intersect1d(items, train.items)
    if len(overlap):
        raise ValueError(f"test item {overlap[0]} also appears in training; evaluation needs cold items")
    known = np.zeros(train.n_users, dtype=bool)
    known[train.active_users] = True

    S = uce_all(params, train, mean_pool)
    Q = cbce_batch(items, params, table, slope)
    scores = Q @ S.T
    hr_sum = {k: 0.0 for k in ks}
    ndcg_sum = {k: 0.0 for k in ks}
    n, dropped, skipped = 0, 0, []
    for row, v in enumerate(items):
        rel = test.users_of_item(v)
        keep = rel[known[rel]]
        dropped += len(rel) - len(keep)
        if len(keep) == 0:
            skipped.append(int(v))
            continue
        ranks = _ranks_of(scores[row], keep)
        for k in ks:
            hits = ranks <= k
            hr = hits.sum() / (len(keep) if recall_hr else k)
            hr_sum[k] += hr
            ndcg_sum[k] += float(np.sum(1.0 / np.log2(1.0 + ranks[hits]))) / len(keep)
        n += 1
    if dropped:
        log.info("dropped %d relevant users with no training interactions", dropped)
    if skipped:
        log.info("skipped %d test items with no known relevant user", len(skipped))
    if n == 0:
        raise ValueError("no test item has a relevant user seen in training")
    return RankingMetrics({k: hr_sum[k] / n for k in ks}, {k: ndcg_sum[k] / n for k in ks}, n, dropped, skipped)


# --------------------------------------------------------------------------
# distance reports
# --------------------------------------------------------------------------


@dataclass
class DistanceRow:
    pair: str
    d_pos: float
    d_neg: float

    @property
    def diff(self) -> float:
        return self.d_neg - self.d_pos


def distance_report(
    user: int,
    pos_items: Sequence[int],
    neg_items: Sequence[int],
    params: ModelParams,
    table: AttributeTable,
    train: InteractionDataset,
    slope: float = 0.01,
    mean_pool: bool = False,
    labels: Sequence[str] | None = None,
) -> list[DistanceRow]:
    """Euclidean distances from each item's CBCE to the user's UCE, per (pos, neg) pair."""
    if len(pos_items) != len(neg_items):
        raise ValueError("pos_items and neg_items must pair up")
    if table is None:
        raise ValueError("item attributes are required")
    if not len(train.items_of_user(user)):
        raise ValueError(f"user {user} has no training interactions, so no UCE")
    s = uce(user, params, train, mean_pool)
    q_pos = cbce_batch(pos_items, params, table, slope)
    q_neg = cbce_batch(neg_items, params, table, slope)
    rows = []
    for i in range(len(pos_items)):
        label = labels[i] if labels is not None else f"G{i + 1}"
        rows.append(DistanceRow(label, float(np.linalg.norm(q_pos[i] - s)), float(np.linalg.norm(q_neg[i] - s))))
    return rows


def write_distance_csv(rows: Sequence[DistanceRow], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["pair", "d_pos", "d_neg", "diff"])
    for r in rows:
        w.writerow([r.pair, repr(r.d_pos), repr(r.d_neg), repr(r.diff)])
