"""Training batch construction: BPR user pairs and contrastive item samples."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CoocIndex, InteractionDataset


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class ContrastiveBatch:
    """One row per training interaction.

    ``pos_items``/``neg_items`` have shape (B, n_pos)/(B, n_neg); they are empty
    along the second axis when contrastive sampling is off.
    """

    items: np.ndarray
    pos_users: np.ndarray
    neg_users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray

    def __len__(self):
        return len(self.items)


class _PairLookup:
    """Membership test for (user, item) pairs via sorted integer codes."""

    def __init__(self, ds: InteractionDataset):
        self.n_items = ds.n_items
        self.codes = ds.pairs[:, 0] * ds.n_items + ds.pairs[:, 1]  # pairs are sorted, so codes are too

    def contains(self, users, items) -> np.ndarray:
        q = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self.codes, q)
        pos = np.minimum(pos, len(self.codes) - 1)
        return self.codes[pos] == q if len(self.codes) else np.zeros(q.shape, dtype=bool)


def sample_negative_users(items, train: InteractionDataset, rng: np.random.Generator, lookup=None) -> np.ndarray:
    """For each item draw a user uniformly from those who did not interact with it."""
    items = np.asarray(items, dtype=np.int64)
    lookup = lookup or _PairLookup(train)
    degree = np.array([len(train.users_of_item(v)) for v in items])
    if np.any(degree >= train.n_users):
        bad = items[np.argmax(degree >= train.n_users)]
        raise SamplingError(f"item {bad} was seen by every user; no negative user exists")
    out = rng.integers(train.n_users, size=len(items))
    todo = np.flatnonzero(lookup.contains(out, items))
    while len(todo):
        out[todo] = rng.integers(train.n_users, size=len(todo))
        todo = todo[lookup.contains(out[todo], items[todo])]
    return out


def sample_bpr_pair(item: int, train: InteractionDataset, rng: np.random.Generator) -> tuple[int, int]:
    """(u+, u-): u+ uniform over the item's users, u- uniform over the rest by rejection."""
    users = train.users_of_item(item)
    if len(users) == 0:
        raise SamplingError(f"item {item} has no training users")
    pos = int(users[rng.integers(len(users))])
    neg = int(sample_negative_users([item], train, rng)[0])
    return pos, neg


def sample_contrastive_sets(
    item: int, cooc: CoocIndex, n_pos: int, n_neg: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Co-occurring positives and non-co-occurring negatives for one anchor item.

    Positives are drawn without replacement when there are enough of them and
    with replacement otherwise; an item with no co-occurring item uses itself.
    Negatives come from training items outside the positives and the anchor.
    """
    if n_pos < 0 or n_neg < 0:
        raise SamplingError("sample counts must be >= 0")
    positives = cooc.positives(item)
    if len(positives) == 0:
        pos = np.full(n_pos, item, dtype=np.int64)
    else:
        pos = rng.choice(positives, size=n_pos, replace=len(positives) < n_pos)

    pool = cooc.items
    n_valid = len(pool) - len(positives) - int(np.isin(item, pool))
    if n_neg == 0:
        return pos, np.zeros(0, dtype=np.int64)
    if n_valid <= 0:
        raise SamplingError(f"item {item} co-occurs with every training item; no negative exists")
    if n_valid < max(4 * n_neg, 64):
        # small candidate set: enumerate it
        cands = np.setdiff1d(pool, np.append(positives, item))
        neg = rng.choice(cands, size=n_neg, replace=len(cands) < n_neg)
        return pos, neg
    neg = np.zeros(0, dtype=np.int64)
    while len(neg) < n_neg:
        draw = pool[rng.integers(len(pool), size=2 * n_neg)]
        draw = draw[(draw != item) & ~_member(positives, draw)]
        merged = np.concatenate([neg, draw])
        _, first = np.unique(merged, return_index=True)
        neg = merged[np.sort(first)][:n_neg]
    return pos, neg


def _member(sorted_arr: np.ndarray, x: np.ndarray) -> np.ndarray:
    if len(sorted_arr) == 0:
        return np.zeros(len(x), dtype=bool)
    hit = np.minimum(np.searchsorted(sorted_arr, x), len(sorted_arr) - 1)
    return sorted_arr[hit] == x


def epoch_order(train: InteractionDataset, seed: int, epoch: int) -> np.ndarray:
    """Shuffled interaction indices for one epoch."""
    return np.random.default_rng([seed, epoch, 0]).permutation(len(train))


def n_batches(train: InteractionDataset, batch_size: int) -> int:
    return -(-len(train) // batch_size)


def make_batch(
    train: InteractionDataset,
    cooc: CoocIndex | None,
    n_pos: int,
    n_neg: int,
    batch_size: int,
    seed: int,
    epoch: int,
    index: int,
    lookup: _PairLookup | None = None,
    order: np.ndarray | None = None,
) -> ContrastiveBatch:
    """Batch ``index`` of ``epoch``; a pure function of its arguments.

    With ``cooc=None`` no contrastive samples are drawn.
    """
    order = order if order is not None else epoch_order(train, seed, epoch)
    sel = order[index * batch_size : (index + 1) * batch_size]
    rng = np.random.default_rng([seed, epoch, index + 1])
    pairs = train.pairs[sel]
    items, pos_users = pairs[:, 1].copy(), pairs[:, 0].copy()
    neg_users = sample_negative_users(items, train, rng, lookup)
    if cooc is None or (n_pos == 0 and n_neg == 0):
        empty = np.zeros((len(items), 0), dtype=np.int64)
        return ContrastiveBatch(items, pos_users, neg_users, empty, empty)
    pos_items = np.empty((len(items), n_pos), dtype=np.int64)
    neg_items = np.empty((len(items), n_neg), dtype=np.int64)
    for row, v in enumerate(items):
        pos_items[row], neg_items[row] = sample_contrastive_sets(int(v), cooc, n_pos, n_neg, rng)
    return ContrastiveBatch(items, pos_users, neg_users, pos_items, neg_items)


def iter_batches(train: InteractionDataset, cooc: CoocIndex | None, n_pos: int, n_neg: int, batch_size: int, seed: int, epoch: int):
    order = epoch_order(train, seed, epoch)
    lookup = _PairLookup(train)
    for index in range(n_batches(train, batch_size)):
        yield make_batch(train, cooc, n_pos, n_neg, batch_size, seed, epoch, index, lookup, order)
