import numpy as np
import pytest

from ccfcrec.data import AttributeField, AttributeSchema, AttributeTable, InteractionDataset, split_by_item
from ccfcrec.encoders import Hyperparams, init_params


def random_dataset(n_users, n_items, density, seed, schema=None):
    """Random interactions where every user and item has at least one pair."""
    rng = np.random.default_rng(seed)
    mask = rng.random((n_users, n_items)) < density
    mask[np.arange(n_users), rng.integers(n_items, size=n_users)] = True
    mask[rng.integers(n_users, size=n_items), np.arange(n_items)] = True
    users, items = np.nonzero(mask)
    table = None
    if schema is not None:
        table = random_table(schema, n_items, rng)
    return InteractionDataset(n_users, n_items, np.stack([users, items], 1), attributes=table)


def random_table(schema, n_items, rng):
    records, dense = [], {}
    for v in range(n_items):
        rec = {}
        for f in schema.fields:
            if f.kind == "one-hot":
                rec[f.name] = f.vocab[rng.integers(f.size)]
            elif f.kind == "multi-hot":
                k = rng.integers(1, f.size + 1)
                rec[f.name] = [f.vocab[j] for j in rng.choice(f.size, k, replace=False)]
        records.append(rec)
    for f in schema.fields:
        if f.kind == "dense":
            dense[f.name] = rng.normal(size=(n_items, f.dim))
    return AttributeTable.from_records(schema, records, dense)


def two_field_schema(genres=4, stars=3):
    return AttributeSchema(
        (
            AttributeField("genre", "multi-hot", vocab=tuple(f"g{i}" for i in range(genres))),
            AttributeField("star", "one-hot", vocab=tuple(f"s{i}" for i in range(stars))),
        )
    )


def mixed_schema():
    return AttributeSchema(
        (
            AttributeField("genre", "multi-hot", vocab=("a", "b", "c", "d")),
            AttributeField("director", "one-hot", vocab=("x", "y", "z")),
            AttributeField("image", "dense", dim=5),
        )
    )


@pytest.fixture
def small_model():
    """20 users, 30 items, mixed schema, d=6; returns (dataset, bundle, params, hyper)."""
    schema = mixed_schema()
    ds = random_dataset(20, 30, 0.15, seed=3, schema=schema)
    bundle = split_by_item(ds, seed=1)
    hyper = Hyperparams(d=6, h=10, n_pos=3, n_neg=4, batch_size=16, lr=1e-2, epochs=3, seed=5)
    params = init_params(schema, ds.n_users, ds.n_items, hyper, np.random.default_rng(9))
    for name in params.names():
        if name.startswith("mlp.b"):
            params.tensors[name][:] = np.random.default_rng(2).normal(scale=0.1, size=params[name].shape)
        if name.endswith("_table"):
            params.tensors[name] *= 30.0
    return ds, bundle, params, hyper


# score geometry for the hand-enumerated metric fixture (d=2, identity MLP)
USER_VECS = [(1, 0), (0, 1), (1, 1), (2, 0), (0, 2)]
ITEM_VECS = [(1, 0), (0, 1), (1, 1), (0, 0)]
RELEVANT = [[0, 1], [2], [1, 4], [0, 4]]


def metric_fixture():
    """5 users, 4 cold test items; user ``u`` trains on warm item ``4 + u``.

    Scores are ``<ITEM_VECS[v], USER_VECS[u]>`` exactly, so ranks can be
    enumerated by hand.  Returns (train, test, params).
    """
    from ccfcrec.encoders import ModelParams

    n_users, n_items, d = 5, 9, 2
    schema = AttributeSchema((AttributeField("id", "one-hot", vocab=tuple(f"i{v}" for v in range(n_items))),))
    table = AttributeTable.from_records(schema, [{"id": f"i{v}"} for v in range(n_items)])
    attr = np.zeros((n_items, d))
    attr[:4] = ITEM_VECS
    user_table = np.zeros((n_items, d))
    user_table[4:] = USER_VECS
    tensors = {
        "attr.id": attr,
        "mlp.w1": np.eye(d),
        "mlp.b1": np.zeros(d),
        "mlp.w2": np.eye(d),
        "mlp.b2": np.zeros(d),
        "item_table": np.zeros((n_users, d)),
        "user_table": user_table,
    }
    params = ModelParams(tensors, schema, n_users, n_items, d, d)
    train = InteractionDataset(n_users, n_items, [(u, 4 + u) for u in range(n_users)], attributes=table)
    test_pairs = [(u, v) for v, users in enumerate(RELEVANT) for u in users]
    test = InteractionDataset(n_users, n_items, test_pairs, attributes=table)
    return train, test, params


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
