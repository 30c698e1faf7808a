import numpy as np
import pytest

from ccfcrec.autograd import GradBag, ShapeError, Tape, coalesce_rows, gradient_check


def central_diff(f, x, h=1e-5):
    """Numerical gradient of scalar f at array x (x is modified and restored)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f()
        x[idx] = orig - h
        down = f()
        x[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


# -- forward examples --------------------------------------------------------


def test_leaky_relu_values():
    t = Tape()
    out = t.leaky_relu(t.constant([-1.0, 2.0]), 0.01)
    assert out.value.tolist() == [-0.01, 2.0]


def test_inner_of_3_4():
    t = Tape()
    x = t.constant([3.0, 4.0])
    assert float(t.inner(x, x).value) == 25.0


def test_log_sum_exp_no_overflow():
    t = Tape()
    out = t.log_sum_exp(t.constant([1000.0, 1000.0]))
    assert np.isfinite(out.value)
    assert float(out.value) == pytest.approx(1000 + np.log(2), abs=1e-12)


def test_segmented_log_sum_exp():
    t = Tape()
    x = np.array([1.0, 2.0, 3.0, -1.0, 700.0])
    out = t.log_sum_exp(t.constant(x), [0, 0, 1, 1, 2], 3)
    want = [np.log(np.exp(1) + np.exp(2)), np.log(np.exp(3) + np.exp(-1)), 700.0]
    assert np.allclose(out.value, want, rtol=0, atol=1e-12)


def test_log_sigmoid_extremes():
    t = Tape()
    out = t.log_sigmoid(t.constant([-800.0, 0.0, 50.0]))
    assert np.allclose(out.value, [-800.0, -np.log(2), -np.log1p(np.exp(-50.0))], rtol=1e-15, atol=0)
    assert out.value[2] < 0


def test_lookup_segments_sum_rows():
    params = {"w": np.arange(12.0).reshape(4, 3)}
    t = Tape(params)
    out = t.lookup("w", [1, 3, 1, 0], [0, 0, 2, 2], 3)
    assert np.array_equal(out.value, [params["w"][1] + params["w"][3], np.zeros(3), params["w"][1] + params["w"][0]])


# -- backward examples -------------------------------------------------------


def test_bilinear_gradient():
    a, b = np.array([1.0, -2.0, 0.5]), np.array([3.0, 0.25, -4.0])
    t = Tape({"a": a, "b": b})
    bag = t.backward(t.inner(t.param("a"), t.param("b")))
    assert np.array_equal(bag.dense["a"], b)
    assert np.array_equal(bag.dense["b"], a)


def test_constant_tape_gives_empty_bag():
    t = Tape()
    bag = t.backward(t.sum(t.constant(np.ones(3))))
    assert bag.names() == set()


def test_non_scalar_root_rejected():
    t = Tape()
    with pytest.raises(ShapeError):
        t.backward(t.constant(np.ones(2)))


def test_shape_errors_name_primitive():
    t = Tape()
    with pytest.raises(ShapeError, match="inner"):
        t.inner(t.constant(np.ones(2)), t.constant(np.ones(3)))
    with pytest.raises(ShapeError, match="affine"):
        t.affine(t.constant(np.ones((2, 3))), t.constant(np.ones((4, 2))))
    with pytest.raises(ShapeError, match="add"):
        t.add(t.constant(np.ones(2)), t.constant(np.ones(3)))
    with pytest.raises(ShapeError, match="concat"):
        t.concat([t.constant(np.ones((2, 2))), t.constant(np.ones((3, 3)))], axis=1)


def test_lookup_adjoint_is_sparse_rows():
    params = {"w": np.random.default_rng(0).normal(size=(6, 2))}
    t = Tape(params)
    out = t.sum(t.lookup("w", [4, 1, 4]))
    bag = t.backward(out)
    assert "w" not in bag.dense
    rows, vals = bag.sparse_rows["w"]
    assert rows.tolist() == [1, 4]
    assert np.array_equal(vals, [[1.0, 1.0], [2.0, 2.0]])


# -- every primitive against finite differences at 20 points -----------------


def _primitive_cases():
    def affine(t):
        return t.sum(t.inner(t.affine(t.param("x"), t.param("W"), t.param("b")), t.constant(COEF_A)))

    def leaky(t):
        return t.sum(t.inner(t.leaky_relu(t.param("x"), 0.2), t.constant(COEF_X)))

    def concat(t):
        c = t.concat([t.param("x"), t.lookup("W", [0, 1])], axis=1)
        return t.sum(t.inner(c, t.constant(COEF_C)))

    def inner(t):
        return t.sum(t.inner(t.param("x"), t.lookup("W", [2, 0])))

    def log_sig(t):
        return t.sum(t.log_sigmoid(t.inner(t.param("x"), t.constant(COEF_X))))

    def lse(t):
        return t.sum(t.log_sum_exp(t.param("x")))

    def lse_seg(t):
        flat = t.lookup(t.param("x"), [0, 1])
        v = t.inner(flat, t.constant(COEF_X))
        return t.sum(t.log_sum_exp(t.concat([v, t.inner(t.param("x"), t.constant(COEF_X[::-1]))], 0), [0, 1, 0, 1], 2))

    def lookup(t):
        return t.sum(t.inner(t.lookup("W", [3, 1, 3, 0], [0, 0, 1, 1], 2), t.constant(COEF_W)))

    def add_scale(t):
        return t.sum(t.inner(t.add(t.scale(t.param("x"), -2.5), t.param("x")), t.param("x")))

    return [affine, leaky, concat, inner, log_sig, lse, lse_seg, lookup, add_scale]


COEF_A = np.linspace(-1, 1, 8).reshape(2, 4)
COEF_X = np.linspace(-2, 2, 6).reshape(2, 3)
COEF_C = np.linspace(0.5, -1.5, 12).reshape(2, 6)
COEF_W = np.linspace(-1, 2, 6).reshape(2, 3)


@pytest.mark.parametrize("build", _primitive_cases(), ids=lambda f: f.__name__)
def test_primitive_matches_finite_differences(build):
    rng = np.random.default_rng(hash(build.__name__) % 2**32)
    for _ in range(20):
        params = {"x": rng.normal(size=(2, 3)), "W": rng.normal(size=(4, 3)), "b": rng.normal(size=4)}
        if build.__name__ == "leaky":
            # keep inputs away from the kink
            params["x"] += np.sign(params["x"]) * 0.01

        def f():
            return float(build(Tape(params)).value)

        t = Tape(params)
        bag = t.backward(build(t))
        for name in bag.names():
            g = bag.to_dense(name, params[name].shape)
            assert rel_err(g, central_diff(f, params[name])) < 1e-6, name


def test_three_layer_composite():
    rng = np.random.default_rng(5)
    params = {
        "E": rng.normal(size=(7, 4)),
        "W1": rng.normal(size=(6, 8)),
        "b1": rng.normal(size=6),
        "W2": rng.normal(size=(5, 6)),
        "W3": rng.normal(size=(3, 5)),
    }

    def build(t):
        x = t.concat([t.lookup("E", [0, 2, 5], [0, 0, 1], 2), t.lookup("E", [6, 1])], axis=1)
        h = t.leaky_relu(t.affine(x, t.param("W1"), t.param("b1")), 0.1)
        h = t.leaky_relu(t.affine(h, t.param("W2")), 0.1)
        y = t.affine(h, t.param("W3"))
        return t.sum(t.log_sum_exp(y))

    t = Tape(params)
    bag = t.backward(build(t))
    for name, p in params.items():
        num = central_diff(lambda: float(build(Tape(params)).value), p)
        assert rel_err(bag.to_dense(name, p.shape), num) < 1e-6, name


# -- algebraic invariants ----------------------------------------------------


def _loss(t, alpha=1.0):
    x = t.lookup("E", [0, 3, 3, 1], [0, 0, 1, 1], 2)
    h = t.leaky_relu(t.affine(x, t.param("W"), t.param("b")))
    return t.scale(t.sum(t.log_sigmoid(t.inner(h, h))), alpha)


def _params(seed=0):
    rng = np.random.default_rng(seed)
    return {"E": rng.normal(size=(5, 3)), "W": rng.normal(size=(4, 3)), "b": rng.normal(size=4)}


def test_linearity_of_adjoints():
    # a power of two keeps every product exact
    params = _params()
    t1 = Tape(params)
    g1 = t1.backward(_loss(t1))
    t2 = Tape(params)
    g2 = t2.backward(_loss(t2, -4.0))
    for name, p in params.items():
        assert np.array_equal(g2.to_dense(name, p.shape), -4.0 * g1.to_dense(name, p.shape))
    # seeding the reverse sweep scales the same way
    t3 = Tape(params)
    g3 = t3.backward(_loss(t3), seed=-4.0)
    for name, p in params.items():
        assert np.array_equal(g3.to_dense(name, p.shape), g2.to_dense(name, p.shape))


def test_sum_rule():
    params = _params(1)

    def g(t):
        return t.sum(t.inner(t.lookup("E", [2, 4]), t.lookup("E", [4, 0])))

    ta, tb, tab = Tape(params), Tape(params), Tape(params)
    ga = ta.backward(_loss(ta))
    gb = tb.backward(g(tb))
    gab = tab.backward(tab.add(_loss(tab), g(tab)))
    merged = ga.merge(gb)
    for name, p in params.items():
        assert np.array_equal(gab.to_dense(name, p.shape), merged.to_dense(name, p.shape))


def test_sparse_dense_equivalence():
    rng = np.random.default_rng(3)
    E = rng.normal(size=(9, 4))
    idx = np.array([7, 2, 2, 0, 5, 7])
    seg = np.array([0, 0, 1, 1, 1, 2])
    coef = rng.normal(size=(3, 4))
    sparse_t = Tape({"E": E})
    bag_s = sparse_t.backward(sparse_t.sum(sparse_t.inner(sparse_t.lookup("E", idx, seg, 3), sparse_t.constant(coef))))
    # replace the lookup by a one-hot matrix product (E^T S^T)^T
    S = np.zeros((3, 9))
    for i, s in zip(idx, seg):
        S[s, i] += 1.0
    dense_t = Tape({"Et": E.T.copy()})
    out = dense_t.affine(dense_t.constant(S), dense_t.param("Et"))
    bag_d = dense_t.backward(dense_t.sum(dense_t.inner(out, dense_t.constant(coef))))
    assert np.allclose(bag_s.to_dense("E", E.shape), bag_d.dense["Et"].T, rtol=0, atol=1e-12)


def test_coalesce_rows():
    rows, vals = coalesce_rows(np.array([3, 1, 3]), np.array([[1.0], [2.0], [4.0]]))
    assert rows.tolist() == [1, 3] and vals.ravel().tolist() == [2.0, 5.0]


def test_gradbag_scaled_and_merge():
    a = GradBag()
    a.add_dense("x", np.ones(2))
    a.add_rows("E", np.array([1]), np.ones((1, 2)))
    b = a.scaled(2.0).merge(a)
    assert np.array_equal(b.dense["x"], [3.0, 3.0])
    assert np.array_equal(b.to_dense("E", (3, 2))[1], [3.0, 3.0])
    assert b.is_finite()


# -- gradient_check ----------------------------------------------------------


def test_gradient_check_quadratic():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 4))
    params = {"x": rng.normal(size=(3, 4))}

    def build(p):
        t = Tape(p)
        y = t.affine(t.param("x"), t.constant(A))
        return t, t.sum(t.inner(y, y))

    res = gradient_check(build, params, n_coords=12)
    assert res.checked == 12 and res.skipped == 0
    assert res.max_rel_error < 1e-9


def test_gradient_check_skips_kink():
    params = {"x": np.array([[0.0, 1.0, -2.0]])}

    def build(p):
        t = Tape(p)
        return t, t.sum(t.leaky_relu(t.param("x"), 0.1))

    res = gradient_check(build, params, n_coords=3)
    assert res.skipped == 1 and res.checked == 2
    assert res.max_rel_error < 1e-9


def test_gradient_check_rejects_non_finite():
    params = {"x": np.array([np.inf])}

    def build(p):
        t = Tape(p)
        return t, t.sum(t.param("x"))

    with pytest.raises(FloatingPointError):
        gradient_check(build, params)
