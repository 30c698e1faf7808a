"""Dataset representation, file ingestion, cold-item splitting and co-occurrence indexing."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("one-hot", "multi-hot", "dense")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


# --------------------------------------------------------------------------
# schema and attributes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AttributeField:
    name: str
    kind: str
    vocab: tuple[str, ...] = ()
    dim: int = 0

    @property
    def size(self) -> int:
        """Vocabulary size for categorical fields, vector length for dense ones."""
        return self.dim if self.kind == "dense" else len(self.vocab)

    @property
    def categorical(self) -> bool:
        return self.kind != "dense"

    def to_json(self) -> dict:
        if self.kind == "dense":
            return {"name": self.name, "kind": self.kind, "dim": self.dim}
        return {"name": self.name, "kind": self.kind, "vocab": list(self.vocab)}


@dataclass(frozen=True)
class AttributeSchema:
    fields: tuple[AttributeField, ...]

    def __post_init__(self):
        if not self.fields:
            raise DataError("schema needs at least one field")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate field names in schema: {names}")
        for f in self.fields:
            if f.kind not in KINDS:
                raise DataError(f"field {f.name!r}: unknown kind {f.kind!r}")
            if f.size < 1:
                raise DataError(f"field {f.name!r}: size must be >= 1")
            if f.categorical and len(set(f.vocab)) != len(f.vocab):
                raise DataError(f"field {f.name!r}: duplicate vocabulary tokens")

    @property
    def m(self) -> int:
        return len(self.fields)

    def field(self, name: str) -> AttributeField:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)

    def to_json(self) -> dict:
        return {"fields": [f.to_json() for f in self.fields]}

    @classmethod
    def from_json(cls, doc: Mapping) -> "AttributeSchema":
        fields = []
        for raw in doc["fields"]:
            kind = raw["kind"]
            if kind == "dense":
                fields.append(AttributeField(raw["name"], kind, dim=int(raw["dim"])))
            else:
                fields.append(AttributeField(raw["name"], kind, vocab=tuple(str(t) for t in raw["vocab"])))
        return cls(tuple(fields))

    @classmethod
    def load(cls, path) -> "AttributeSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    def digest(self) -> str:
        """Stable hash used to tie checkpoints to a schema."""
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class AttributeTable:
    """Per-item attribute values, aligned with dense item indices.

    Categorical fields are stored CSR style: ``hot[name] = (indptr, indices)``
    so item ``v`` owns ``indices[indptr[v]:indptr[v+1]]``.  Dense fields are
    ``(n_items, dim)`` arrays.
    """

    schema: AttributeSchema
    n_items: int
    hot: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    dense: dict[str, np.ndarray] = field(default_factory=dict)

    def hot_of(self, name: str, item: int) -> np.ndarray:
        indptr, indices = self.hot[name]
        return indices[indptr[item] : indptr[item + 1]]

    def vector(self, name: str, item: int) -> np.ndarray:
        """Raw encoded attribute (multi-hot 0/1 vector or dense vector)."""
        f = self.schema.field(name)
        if f.kind == "dense":
            return self.dense[name][item]
        out = np.zeros(f.size)
        out[self.hot_of(name, item)] = 1.0
        return out

    def gather(self, name: str, items: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Hot indices of ``items`` flattened, with the position of their item."""
        indptr, indices = self.hot[name]
        items = np.asarray(items, dtype=np.int64)
        counts = indptr[items + 1] - indptr[items]
        segments = np.repeat(np.arange(len(items)), counts)
        starts = np.repeat(indptr[items], counts)
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        return indices[starts + offsets], segments

    @classmethod
    def from_records(
        cls,
        schema: AttributeSchema,
        records: Sequence[Mapping[str, object]],
        dense: Mapping[str, np.ndarray] | None = None,
    ) -> "AttributeTable":
        """Build from per-item dicts of field -> token or token list."""
        dense = dict(dense or {})
        n = len(records)
        hot = {}
        for f in schema.fields:
            if f.kind == "dense":
                arr = np.asarray(dense.get(f.name), dtype=np.float64)
                if arr.shape != (n, f.dim):
                    raise DataError(f"dense field {f.name!r}: expected shape {(n, f.dim)}, got {arr.shape}")
                dense[f.name] = arr
                continue
            pos = {tok: i for i, tok in enumerate(f.vocab)}
            indptr = [0]
            indices: list[int] = []
            for item, rec in enumerate(records):
                raw = rec.get(f.name)
                if raw is None:
                    raise DataError(f"item {item}: missing field {f.name!r}")
                toks = [raw] if isinstance(raw, (str, int)) else list(raw)
                if f.kind == "one-hot" and len(toks) != 1:
                    raise DataError(f"item {item}: one-hot field {f.name!r} needs exactly one value, got {toks}")
                hits = []
                for tok in toks:
                    tok = str(tok)
                    if tok not in pos:
                        raise DataError(f"item {item}: unknown token {tok!r} for field {f.name!r}")
                    hits.append(pos[tok])
                indices.extend(sorted(set(hits)))
                indptr.append(len(indices))
            hot[f.name] = (np.asarray(indptr, dtype=np.int64), np.asarray(indices, dtype=np.int64))
        return cls(schema, n, hot, {k: v for k, v in dense.items() if k in {f.name for f in schema.fields}})


# --------------------------------------------------------------------------
# interactions
# --------------------------------------------------------------------------


class InteractionDataset:
    """Users, items and the observed interaction set over dense indices.

    Split datasets share the index space of their source, so ``n_users`` and
    ``n_items`` describe the whole catalogue even when a split only holds a
    subset of items.
    """

    def __init__(
        self,
        n_users: int,
        n_items: int,
        pairs,
        user_ids: Sequence[str] | None = None,
        item_ids: Sequence[str] | None = None,
        attributes: AttributeTable | None = None,
        item_subset: Iterable[int] | None = None,
    ):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if len(pairs) and (
            pairs[:, 0].min() < 0 or pairs[:, 0].max() >= n_users or pairs[:, 1].min() < 0 or pairs[:, 1].max() >= n_items
        ):
            raise DataError("interaction references an out-of-range user or item")
        if len(pairs):
            pairs = np.unique(pairs, axis=0)
        pairs.setflags(write=False)
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self.pairs = pairs
        self.user_ids = list(user_ids) if user_ids is not None else [str(u) for u in range(n_users)]
        self.item_ids = list(item_ids) if item_ids is not None else [str(v) for v in range(n_items)]
        if attributes is not None and attributes.n_items != n_items:
            raise DataError("attribute table does not cover every item")
        self.attributes = attributes
        self._items_of_user = _group(pairs[:, 0], pairs[:, 1], n_users)
        self._users_of_item = _group(pairs[:, 1], pairs[:, 0], n_items)
        if item_subset is None:
            self.items = np.unique(pairs[:, 1])
        else:
            self.items = np.unique(np.asarray(list(item_subset), dtype=np.int64))
        self.items.setflags(write=False)

    def __len__(self):
        return len(self.pairs)

    def __repr__(self):
        return f"InteractionDataset(users={self.n_users}, items={self.n_items}, interactions={len(self)})"

    @property
    def interactions(self) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.pairs}

    def items_of_user(self, user: int) -> np.ndarray:
        return self._items_of_user[user]

    def users_of_item(self, item: int) -> np.ndarray:
        return self._users_of_item[item]

    @property
    def active_users(self) -> np.ndarray:
        return np.unique(self.pairs[:, 0])

    def restrict_items(self, items: Iterable[int]) -> "InteractionDataset":
        """Dataset holding only the interactions of ``items`` (same index space)."""
        items = np.asarray(sorted(set(int(i) for i in items)), dtype=np.int64)
        mask = np.isin(self.pairs[:, 1], items)
        return InteractionDataset(
            self.n_users, self.n_items, self.pairs[mask], self.user_ids, self.item_ids, self.attributes, items
        )

    def with_attributes(self, table: AttributeTable) -> "InteractionDataset":
        return InteractionDataset(
            self.n_users, self.n_items, self.pairs, self.user_ids, self.item_ids, table, self.items
        )


def _group(keys, values, n):
    order = np.lexsort((values, keys))
    keys, values = keys[order], values[order]
    bounds = np.searchsorted(keys, np.arange(n + 1))
    out = [values[bounds[i] : bounds[i + 1]] for i in range(n)]
    for arr in out:
        arr.setflags(write=False)
    return out


def load_interactions(path) -> InteractionDataset:
    """Parse ``user<TAB>item<TAB>timestamp`` lines; ids are indexed by first appearance."""
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: expected user<TAB>item<TAB>timestamp, got {line!r}")
            try:
                float(parts[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestamp {parts[2]!r}") from None
            u = users.setdefault(parts[0], len(users))
            v = items.setdefault(parts[1], len(items))
            pairs.append((u, v))
    if not pairs:
        raise DataError(f"{path}: no interactions")
    return InteractionDataset(len(users), len(items), pairs, list(users), list(items))


def write_interactions(ds: InteractionDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t, (u, v) in enumerate(ds.pairs):
            fh.write(f"{ds.user_ids[u]}\t{ds.item_ids[v]}\t{t}\n")


def load_attributes(
    path, schema: AttributeSchema, dataset: InteractionDataset, dense_paths: Mapping[str, str] | None = None
) -> AttributeTable:
    """Read JSON-lines attribute records and dense sidecar files for ``dataset``'s items."""
    index = {iid: i for i, iid in enumerate(dataset.item_ids)}
    records: list[dict | None] = [None] * dataset.n_items
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                iid, attrs = str(doc["item_id"]), doc.get("attrs", {})
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad attribute record ({exc})") from None
            if iid in index:
                records[index[iid]] = attrs
    missing = [dataset.item_ids[i] for i, r in enumerate(records) if r is None]
    if missing:
        raise DataError(f"no attribute record for item {missing[0]!r} ({len(missing)} missing)")

    dense = {}
    for f in schema.fields:
        if f.kind != "dense":
            continue
        src = (dense_paths or {}).get(f.name)
        if src is None:
            raise DataError(f"dense field {f.name!r} has no feature file")
        dense[f.name] = _load_dense(src, f, index, dataset.item_ids)
    try:
        return AttributeTable.from_records(schema, records, dense)
    except DataError as exc:
        # name the external item id rather than the dense index
        msg = str(exc)
        if msg.startswith("item "):
            num, rest = msg[5:].split(":", 1)
            msg = f"item {dataset.item_ids[int(num)]!r}:{rest}"
        raise DataError(msg) from None


def _load_dense(path, f: AttributeField, index, item_ids) -> np.ndarray:
    out = np.full((len(item_ids), f.dim), np.nan)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            iid, _, vec = line.rstrip("\n").partition("\t")
            if iid not in index:
                continue
            vals = np.array([float(x) for x in vec.split(",")]) if vec else np.zeros(0)
            if len(vals) != f.dim:
                raise DataError(f"{path}:{lineno}: field {f.name!r} expects {f.dim} values, got {len(vals)}")
            out[index[iid]] = vals
    missing = np.flatnonzero(np.isnan(out).any(axis=1))
    if len(missing):
        raise DataError(f"field {f.name!r}: no dense vector for item {item_ids[missing[0]]!r}")
    return out


def write_attributes(table: AttributeTable, item_ids: Sequence[str], path, dense_dir=None) -> dict[str, str]:
    """Write JSON-lines records plus one sidecar file per dense field; returns the sidecar paths."""
    with open(path, "w", encoding="utf-8") as fh:
        for v, iid in enumerate(item_ids):
            attrs = {}
            for f in table.schema.fields:
                if f.kind == "dense":
                    continue
                toks = [f.vocab[j] for j in table.hot_of(f.name, v)]
                attrs[f.name] = toks[0] if f.kind == "one-hot" else toks
            fh.write(json.dumps({"item_id": iid, "attrs": attrs}) + "\n")
    out = {}
    for f in table.schema.fields:
        if f.kind != "dense":
            continue
        side = Path(dense_dir or Path(path).parent) / f"{f.name}.tsv"
        with open(side, "w", encoding="utf-8") as fh:
            for v, iid in enumerate(item_ids):
                fh.write(iid + "\t" + ",".join(repr(float(x)) for x in table.dense[f.name][v]) + "\n")
        out[f.name] = str(side)
    return out


# --------------------------------------------------------------------------
# splitting and co-occurrence
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitBundle:
    train: InteractionDataset
    valid: InteractionDataset
    test: InteractionDataset
    seed: int
    split_mode: str = "by-item"


def split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Floor every share, then hand the remainder to the first (training) split."""
    counts = [math.floor(n * r + 1e-9) for r in ratios]
    counts[0] += n - sum(counts)
    return counts


def split_by_item(ds: InteractionDataset, ratios=(0.70, 0.15, 0.15), seed: int = 0) -> SplitBundle:
    """Partition items (not interactions) so valid/test items are cold."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"ratios must be three non-negative shares summing to 1, got {ratios}")
    items = ds.items
    if len(items) == 0:
        raise DataError("cannot split an empty dataset")
    counts = split_counts(len(items), ratios)
    if min(counts) == 0:
        raise DataError(f"split of {len(items)} items by {tuple(ratios)} leaves a split empty: {counts}")
    order = np.random.default_rng(seed).permutation(items)
    a, b = counts[0], counts[0] + counts[1]
    return SplitBundle(
        train=ds.restrict_items(order[:a]),
        valid=ds.restrict_items(order[a:b]),
        test=ds.restrict_items(order[b:]),
        seed=seed,
    )


@dataclass(frozen=True)
class CoocIndex:
    """``positives_of[v]``: sorted items sharing at least one user with ``v`` (``v`` excluded)."""

    positives_of: tuple[np.ndarray, ...]
    items: np.ndarray

    def positives(self, item: int) -> np.ndarray:
        return self.positives_of[item]


def build_cooccurrence_index(train: InteractionDataset) -> CoocIndex:
    """Co-occurrence sets via the user inverted index."""
    if len(train) == 0:
        raise DataError("co-occurrence index needs training interactions")
    pos: list[np.ndarray] = []
    for v in range(train.n_items):
        users = train.users_of_item(v)
        if len(users) == 0:
            pos.append(np.zeros(0, dtype=np.int64))
            continue
        linked = np.unique(np.concatenate([train.items_of_user(u) for u in users]))
        pos.append(linked[linked != v])
    return CoocIndex(tuple(pos), train.items)


# --------------------------------------------------------------------------
# synthetic benchmark
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    n_users: int = 200
    n_items: int = 300
    n_genres: int = 6
    n_stars: int = 5
    confound_rate: float = 0.4
    seed: int = 0
    genres_per_user: int = 2
    keep_rate: float = 0.15


@dataclass(frozen=True)
class SyntheticTruth:
    liked_genres: np.ndarray  # (n_users, n_genres) bool
    disliked_stars: np.ndarray  # (n_users, n_stars) bool
    genre: np.ndarray  # (n_items,)
    star: np.ndarray  # (n_items,)

    @property
    def preference(self) -> np.ndarray:
        """(n_users, n_items) bool: the user would interact if shown the item."""
        return self.liked_genres[:, self.genre] & ~self.disliked_stars[:, self.star]


def generate_synthetic(config: SyntheticConfig) -> tuple[InteractionDataset, SyntheticTruth]:
    """Genre/star confound benchmark.

    Every user likes ``genres_per_user`` genres and dislikes
    ``round(confound_rate * n_stars)`` star levels.  A user prefers an item iff
    its genre is liked and its star is not disliked; each preferred pair is
    observed with probability ``keep_rate``.  ``confound_rate`` is therefore
    the share of liked-genre pairs rejected only because of the star.
    """
    c = config
    if min(c.n_users, c.n_items, c.n_genres, c.n_stars) < 2:
        raise DataError("n_users, n_items, n_genres and n_stars must all be >= 2")
    if not 0.0 <= c.confound_rate <= 1.0:
        raise DataError("confound_rate must lie in [0, 1]")
    if not 1 <= c.genres_per_user <= c.n_genres:
        raise DataError("genres_per_user must lie in [1, n_genres]")
    if not 0.0 < c.keep_rate <= 1.0:
        raise DataError("keep_rate must lie in (0, 1]")
    n_disliked = int(round(c.confound_rate * c.n_stars))
    if n_disliked >= c.n_stars:
        raise DataError("confound_rate rules out every star: users would have no possible interaction")

    rng = np.random.default_rng(c.seed)
    genre = rng.integers(c.n_genres, size=c.n_items)
    star = rng.integers(c.n_stars, size=c.n_items)
    liked = np.zeros((c.n_users, c.n_genres), dtype=bool)
    disliked = np.zeros((c.n_users, c.n_stars), dtype=bool)
    for u in range(c.n_users):
        liked[u, rng.choice(c.n_genres, c.genres_per_user, replace=False)] = True
        disliked[u, rng.choice(c.n_stars, n_disliked, replace=False)] = True
    truth = SyntheticTruth(liked, disliked, genre, star)
    pref = truth.preference
    if not pref.any(axis=1).all():
        raise DataError("config leaves a user with zero possible interactions")
    if not pref.any(axis=0).all():
        raise DataError("config leaves an item with zero possible interactions")

    keep = rng.random(pref.shape) < c.keep_rate
    users, items = np.nonzero(pref & keep)
    # guarantee every user and item is observed at least once
    for u in np.flatnonzero(~(pref & keep).any(axis=1)):
        v = rng.choice(np.flatnonzero(pref[u]))
        users, items = np.append(users, u), np.append(items, v)
    observed = np.zeros(pref.shape, dtype=bool)
    observed[users, items] = True
    for v in np.flatnonzero(~observed.any(axis=0)):
        u = rng.choice(np.flatnonzero(pref[:, v]))
        users, items = np.append(users, u), np.append(items, v)

    schema = synthetic_schema(c.n_genres, c.n_stars)
    records = [{"genre": f"g{genre[v]}", "star": f"s{star[v]}"} for v in range(c.n_items)]
    table = AttributeTable.from_records(schema, records)
    ds = InteractionDataset(
        c.n_users,
        c.n_items,
        np.stack([users, items], axis=1),
        [f"u{u}" for u in range(c.n_users)],
        [f"i{v}" for v in range(c.n_items)],
        table,
    )
    return ds, truth


def synthetic_schema(n_genres: int, n_stars: int) -> AttributeSchema:
    return AttributeSchema(
        (
            AttributeField("genre", "one-hot", vocab=tuple(f"g{g}" for g in range(n_genres))),
            AttributeField("star", "one-hot", vocab=tuple(f"s{s}" for s in range(n_stars))),
        )
    )
