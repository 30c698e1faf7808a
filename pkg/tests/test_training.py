import math

import numpy as np
import pytest

from ccfcrec.autograd import GradBag
from ccfcrec.data import InteractionDataset, SplitBundle, SyntheticConfig, generate_synthetic, split_by_item
from ccfcrec.encoders import Hyperparams, init_params
from ccfcrec.experiments import ablation_hyperparams
from ccfcrec.objectives import build_loss
from ccfcrec.sampling import make_batch
from ccfcrec.training import (
    AdamState,
    CheckpointError,
    DivergenceError,
    EpochRecord,
    IncompatibleCheckpoint,
    RunHistory,
    adam_step,
    load_checkpoint,
    pretrain_mf,
    save_checkpoint,
    train,
)

from conftest import mixed_schema, random_dataset, two_field_schema


class DenseAdam:
    """Textbook Adam over full arrays; ``mask`` limits which rows move (lazy rule)."""

    def __init__(self, shapes, b1=0.9, b2=0.999, eps=1e-8):
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0
        self.b1, self.b2, self.eps = b1, b2, eps

    def step(self, params, grads, lr, masks):
        self.t += 1
        for k, g in grads.items():
            mask = masks.get(k)
            m = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.b2 * self.v[k] + (1 - self.b2) * g**2
            upd = lr * (m / (1 - self.b1**self.t)) / (np.sqrt(v / (1 - self.b2**self.t)) + self.eps)
            if mask is None:
                self.m[k], self.v[k] = m, v
                params[k] = params[k] - upd
            else:
                self.m[k][mask], self.v[k][mask] = m[mask], v[mask]
                params[k][mask] = params[k][mask] - upd[mask]


def random_grads(rng, shapes, rows_frac=0.4, all_rows=False):
    bag, dense, masks = GradBag(), {}, {}
    for k, shape in shapes.items():
        g = rng.normal(size=shape)
        if k.endswith("_table"):
            rows = np.arange(shape[0]) if all_rows else np.flatnonzero(rng.random(shape[0]) < rows_frac)
            bag.add_rows(k, rows, g[rows])
            full = np.zeros(shape)
            full[rows] = g[rows]
            dense[k] = full
            masks[k] = rows
        else:
            bag.add_dense(k, g)
            dense[k] = g
    return bag, dense, masks


SHAPES = {"w": (3, 4), "b": (4,), "emb_table": (10, 3)}


def test_sparse_adam_matches_dense_reference_50_steps():
    rng = np.random.default_rng(0)
    init = {k: rng.normal(size=s) for k, s in SHAPES.items()}
    sparse, ref = {k: v.copy() for k, v in init.items()}, {k: v.copy() for k, v in init.items()}
    state, dense = AdamState(), DenseAdam(SHAPES)
    for _ in range(50):
        bag, g, masks = random_grads(rng, SHAPES)
        adam_step(sparse, bag, state, lr=0.01)
        dense.step(ref, g, 0.01, masks)
    for k in SHAPES:
        assert np.max(np.abs(sparse[k] - ref[k])) <= 1e-10


def test_sparse_adam_equals_plain_adam_when_every_row_is_touched():
    rng = np.random.default_rng(1)
    init = {k: rng.normal(size=s) for k, s in SHAPES.items()}
    sparse, ref = {k: v.copy() for k, v in init.items()}, {k: v.copy() for k, v in init.items()}
    state, dense = AdamState(), DenseAdam(SHAPES)
    for _ in range(50):
        bag, g, _ = random_grads(rng, SHAPES, all_rows=True)
        adam_step(sparse, bag, state, lr=0.003)
        dense.step(ref, g, 0.003, {})
    for k in SHAPES:
        assert np.max(np.abs(sparse[k] - ref[k])) <= 1e-10


def test_zero_gradient_leaves_parameter_unchanged():
    p = {"w": np.arange(6.0).reshape(2, 3)}
    before = p["w"].copy()
    bag = GradBag()
    bag.add_dense("w", np.zeros((2, 3)))
    adam_step(p, bag, AdamState(), lr=0.1)
    assert np.array_equal(p["w"], before)


def test_first_step_is_signed_lr():
    g = np.array([0.3, -2.0, 1e-3, -5e4])
    p = {"w": np.zeros(4)}
    bag = GradBag()
    bag.add_dense("w", g)
    adam_step(p, bag, AdamState(), lr=0.05, eps=1e-15)
    assert np.allclose(p["w"], -0.05 * np.sign(g), rtol=1e-9, atol=0)


def test_only_parameters_with_gradients_move():
    rng = np.random.default_rng(2)
    p = {k: rng.normal(size=s) for k, s in SHAPES.items()}
    before = {k: v.copy() for k, v in p.items()}
    bag = GradBag()
    bag.add_rows("emb_table", np.array([2, 7]), rng.normal(size=(2, 3)))
    adam_step(p, bag, AdamState(), lr=0.1)
    assert np.array_equal(p["w"], before["w"]) and np.array_equal(p["b"], before["b"])
    untouched = np.setdiff1d(np.arange(10), [2, 7])
    assert np.array_equal(p["emb_table"][untouched], before["emb_table"][untouched])
    assert not np.array_equal(p["emb_table"][[2, 7]], before["emb_table"][[2, 7]])


def test_frozen_names_skipped():
    p = {"w": np.ones(3), "emb_table": np.ones((4, 2))}
    bag = GradBag()
    bag.add_dense("w", np.ones(3))
    bag.add_rows("emb_table", np.array([0]), np.ones((1, 2)))
    state = AdamState()
    adam_step(p, bag, state, lr=0.1, frozen={"emb_table"})
    assert np.array_equal(p["emb_table"], np.ones((4, 2)))
    assert "emb_table" not in state.m
    assert not np.array_equal(p["w"], np.ones(3))


def test_non_finite_gradient_aborts_without_update():
    p = {"w": np.ones(2), "b": np.ones(2)}
    bag = GradBag()
    bag.add_dense("w", np.array([1.0, np.nan]))
    bag.add_dense("b", np.ones(2))
    with pytest.raises(DivergenceError):
        adam_step(p, bag, AdamState(), lr=0.1)
    assert np.array_equal(p["b"], np.ones(2))


# -- training loop -----------------------------------------------------------


def tiny_bundle():
    schema = two_field_schema()
    ds = random_dataset(6, 8, 0.0, seed=0, schema=schema)
    train_items = [0, 1, 2, 3, 4]
    pairs = [(0, 0), (1, 1), (2, 2), (3, 3), (4, 4)]
    tr = InteractionDataset(6, 8, pairs, attributes=ds.attributes)
    va = InteractionDataset(6, 8, [(0, 5), (1, 6)], attributes=ds.attributes)
    te = InteractionDataset(6, 8, [(2, 7)], attributes=ds.attributes)
    assert list(tr.items) == train_items
    return SplitBundle(tr, va, te, seed=0)


def test_one_epoch_one_record():
    bundle = tiny_bundle()
    hyper = Hyperparams(d=4, epochs=1, batch_size=2, n_pos=1, n_neg=1, lr=1e-3)
    _, hist = train(bundle, hyper, "full")
    assert len(hist.records) == 1
    assert hist.records[0].epoch == 1 and hist.records[0].valid_ndcg10 is not None


@pytest.mark.parametrize("variant", ["full", "no-contrastive", "pretrain"])
def test_training_bit_identical(small_model, variant):
    ds, bundle, _, hyper = small_model
    hyper.mf_epochs = 2
    a, ha = train(bundle, hyper, variant)
    b, hb = train(bundle, hyper, variant)
    for k in a.names():
        assert a[k].tobytes() == b[k].tobytes()
    assert [r.total for r in ha.records] == [r.total for r in hb.records]


def test_synthetic_loss_descends():
    ds, _ = generate_synthetic(SyntheticConfig(seed=0))
    bundle = split_by_item(ds, seed=0)
    _, hist = train(bundle, ablation_hyperparams(seed=0), "full")
    main = hist.main()
    assert len(main) == 20
    assert main[-1].total < main[0].total


def test_early_stopping_respects_patience(small_model):
    ds, bundle, _, hyper = small_model
    hyper.epochs, hyper.patience = 40, 2
    _, hist = train(bundle, hyper, "no-contrastive")
    scores = [r.valid_ndcg10 for r in hist.records]
    assert hist.best_epoch == 1 + int(np.argmax(scores))
    if len(scores) < 40:
        # stopped after exactly ``patience`` epochs without strict improvement
        assert len(scores) == hist.best_epoch + 2
        assert all(s <= scores[hist.best_epoch - 1] for s in scores[hist.best_epoch :])


def test_no_contrastive_never_touches_item_table(small_model):
    ds, bundle, params, hyper = small_model
    start = params.copy()
    trained, hist = train(bundle, hyper, "no-contrastive", params=params.copy())
    assert trained["item_table"].tobytes() == start["item_table"].tobytes()
    assert all(r.l_z == 0.0 and r.l_c == 0.0 for r in hist.records)


def test_pretrain_freezes_item_table(small_model):
    ds, bundle, params, hyper = small_model
    hyper.mf_epochs = 3
    after_mf = params.copy()
    pretrain_mf(after_mf, bundle, hyper)
    assert not np.array_equal(after_mf["item_table"], params["item_table"])
    trained, hist = train(bundle, hyper, "pretrain", params=params.copy())
    assert trained["item_table"].tobytes() == after_mf["item_table"].tobytes()
    assert [r.phase for r in hist.records].count("pretrain") == 3
    assert all(r.l_z == 0.0 for r in hist.main())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_keeps_last_good(small_model):
    ds, bundle, params, hyper = small_model
    hyper.lr = 1e300
    with pytest.raises(DivergenceError) as info:
        train(bundle, hyper, "full", params=params.copy())
    good = info.value.last_good
    assert good is not None
    assert all(np.all(np.isfinite(good[k])) for k in good.names())


def test_history_jsonl_round_trip(tmp_path):
    h = RunHistory()
    h.append(EpochRecord(1, 1.0, 2.0, 3.0, 4.0, 10.0, 0.5, 0.1))
    h.append(EpochRecord(2, 0.5, 1.0, 1.5, 2.0, 5.0, None, 0.1))
    with pytest.raises(ValueError):
        h.append(EpochRecord(2, 0, 0, 0, 0, 0, None, 0))
    h.write_jsonl(tmp_path / "h.jsonl")
    assert RunHistory.read_jsonl(tmp_path / "h.jsonl").records == h.records


# -- checkpoints -------------------------------------------------------------


@pytest.fixture
def saved(tmp_path, small_model):
    ds, bundle, params, hyper = small_model
    state = AdamState()
    batch = make_batch(bundle.train, None, 0, 0, 8, 0, 1, 0)
    _, tape, root = build_loss(batch, params, hyper, bundle.train, ds.attributes, "no-contrastive")
    adam_step(params.tensors, tape.backward(root), state, 0.01)
    path = tmp_path / "m.ccfc"
    save_checkpoint(params, state, {"note": "x", "seed": 5}, path)
    return path, params, state


def test_checkpoint_round_trip(saved):
    path, params, state = saved
    p2, s2, meta = load_checkpoint(path, params.schema.digest())
    assert meta == {"note": "x", "seed": 5}
    assert set(p2.names()) == set(params.names())
    for k in params.names():
        assert p2[k].tobytes() == params[k].tobytes()
    assert s2.t == state.t
    for k in state.m:
        assert s2.m[k].tobytes() == state.m[k].tobytes() and s2.v[k].tobytes() == state.v[k].tobytes()


def test_checkpoint_layout(saved):
    path, params, _ = saved
    raw = path.read_bytes()
    assert raw[:5] == b"CCFC1"
    n = int.from_bytes(raw[5:13], "little")
    header = __import__("json").loads(raw[13 : 13 + n])
    first = header["arrays"][0]
    count = math.prod(first["shape"])
    arr = np.frombuffer(raw[13 + n : 13 + n + 8 * count], dtype="<f8").reshape(first["shape"])
    assert np.array_equal(arr, params[first["name"]])


def test_truncated_checkpoint(saved):
    path, _, _ = saved
    raw = path.read_bytes()
    for cut in (3, 20, len(raw) - 8):
        path.write_bytes(raw[:cut])
        with pytest.raises(CheckpointError, match="truncated|bad magic"):
            load_checkpoint(path)


def test_trailing_bytes_rejected(saved):
    path, _, _ = saved
    path.write_bytes(path.read_bytes() + b"\0" * 8)
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_schema_mismatch_refused(saved):
    path, _, _ = saved
    other = two_field_schema().digest()
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(path, other)


def test_version_mismatch_refused(saved):
    path, _, _ = saved
    raw = path.read_bytes()
    path.write_bytes(b"CCFC2" + raw[5:])
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(path)


def test_checkpoint_shapes_validated(tmp_path):
    params = init_params(mixed_schema(), 3, 4, Hyperparams(d=2))
    params.tensors["mlp.b1"] = np.zeros(7)
    with pytest.raises(ValueError):
        save_checkpoint(params, None, {}, tmp_path / "x.ccfc")
        load_checkpoint(tmp_path / "x.ccfc")
