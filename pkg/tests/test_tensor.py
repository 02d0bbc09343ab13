"""Numerics core: closed-form values, independent oracles, gradient checks."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import graphground.tensor as gt
from graphground.errors import ComputationError, ContractError
from graphground.tensor import (
    ParameterStore,
    Tensor,
    concat,
    gather_rows,
    grad_check,
    kl_rows,
    matmul,
    maximum,
    minimum,
    mul,
    multihead_attention,
    segment_max,
    sigmoid,
    slice_cols,
    smooth_l1,
    softmax_rows,
    tanh,
    tmax,
    tmean,
    tsum,
)


@pytest.fixture(autouse=True)
def _finite_checks():
    gt.debug_checks = True
    yield
    gt.debug_checks = False


def rand_tensor(rng, rows, cols, scale=1.0, requires_grad=False):
    t = Tensor(rng.standard_normal((rows, cols)) * scale)
    t.requires_grad = requires_grad
    return t


# ---------------------------------------------------------------- softmax


def brute_softmax_row(row):
    # independent straight-line oracle: plain exp / normalize
    e = [math.exp(x) for x in row]
    s = sum(e)
    return [x / s for x in e]


def test_softmax_symmetry():
    out = softmax_rows(Tensor([[0.0, 0.0]]))
    np.testing.assert_allclose(out.value, [[0.5, 0.5]], atol=1e-12)


def test_softmax_analytic():
    out = softmax_rows(Tensor([[math.log(1.0), math.log(3.0)]]))
    np.testing.assert_allclose(out.value, [[0.25, 0.75]], atol=1e-12)


def test_softmax_matches_brute_force():
    row = [5.0, 2.0, 8.0]
    out = softmax_rows(Tensor([row]))
    np.testing.assert_allclose(out.value[0], brute_softmax_row(row), atol=1e-12)


def test_softmax_mask_and_sentinel():
    logits = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    mask = np.array([[True, False, True], [False, False, False]])
    out = softmax_rows(logits, mask).value
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out[0, [0, 2]], brute_softmax_row([1.0, 3.0]), atol=1e-12)
    assert (out[1] == 0.0).all()  # all-masked sentinel row


def test_softmax_rejects_nonfinite():
    with pytest.raises(ComputationError):
        softmax_rows(Tensor([[1.0, math.nan]]))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6))
def test_softmax_rows_stochastic_property(seed, rows, cols):
    rng = np.random.default_rng(seed)
    out = softmax_rows(Tensor(rng.standard_normal((rows, cols)) * 10)).value
    assert ((out >= 0) & (out <= 1)).all()
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


# ---------------------------------------------------------------- smooth L1


def test_smooth_l1_values():
    assert smooth_l1(0.3, 0.3).item() == 0.0
    assert smooth_l1(0.8, 0.3).item() == pytest.approx(0.125, abs=1e-12)
    assert smooth_l1(2.0, 0.0).item() == pytest.approx(1.5, abs=1e-12)


def test_smooth_l1_derivative_continuous_at_kink():
    # numerical one-sided derivatives straddling |x| = 1
    h = 1e-6
    left = (smooth_l1(1.0, 0.0).item() - smooth_l1(1.0 - h, 0.0).item()) / h
    right = (smooth_l1(1.0 + h, 0.0).item() - smooth_l1(1.0, 0.0).item()) / h
    assert abs(left - right) < 1e-5


# ---------------------------------------------------------------- KL


def brute_kl(q, p):
    total = 0.0
    for qrow, prow in zip(q, p):
        for a, b in zip(qrow, prow):
            if a > 0:
                total += a * math.log(a / max(b, 1e-8))
    return total / len(q)


def test_kl_self_is_zero():
    q = Tensor([[0.2, 0.3, 0.5]])
    assert abs(kl_rows(q, q).item()) <= 1e-9


def test_kl_analytic():
    got = kl_rows(Tensor([[1.0, 0.0]]), Tensor([[0.5, 0.5]])).item()
    assert got == pytest.approx(math.log(2.0), abs=1e-9)


def test_kl_matches_brute_force():
    rng = np.random.default_rng(7)
    q = rng.dirichlet(np.ones(4), size=3)
    p = rng.dirichlet(np.ones(4), size=3)
    got = kl_rows(Tensor(q), Tensor(p)).item()
    assert got == pytest.approx(brute_kl(q, p), abs=1e-10)


def test_kl_shape_mismatch():
    with pytest.raises(ContractError):
        kl_rows(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0, 0.0]]))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(2, 6))
def test_kl_nonnegative_property(seed, rows, cols):
    rng = np.random.default_rng(seed)
    q = Tensor(rng.dirichlet(np.ones(cols), size=rows))
    p = Tensor(rng.dirichlet(np.ones(cols), size=rows))
    assert kl_rows(q, p).item() >= -1e-9
    assert kl_rows(q, q).item() <= 1e-9


# ---------------------------------------------------------------- attention


def brute_multihead(q, k, v, heads, wq, wk, wv, wo):
    # independent single-pass reimplementation with python loops
    n_q, d = q.shape
    hd = d // heads
    qp, kp, vp = q @ wq.T, k @ wk.T, v @ wv.T
    out = np.zeros((n_q, d))
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        for i in range(n_q):
            scores = [float(qp[i, sl] @ kp[j, sl]) / math.sqrt(hd) for j in range(k.shape[0])]
            w = brute_softmax_row(scores)
            for j, wj in enumerate(w):
                out[i, sl] += wj * vp[j, sl]
    return q + out @ wo.T


def attn_params(rng, d):
    return [Tensor(rng.standard_normal((d, d)) * 0.3) for _ in range(4)]


def test_attention_single_key_ignores_query():
    rng = np.random.default_rng(0)
    d = 4
    wq, wk, wv, wo = attn_params(rng, d)
    kv = rand_tensor(rng, 1, d)
    q1, q2 = rand_tensor(rng, 1, d), rand_tensor(rng, 1, d)
    o1 = multihead_attention(q1, kv, kv, 2, wq, wk, wv, wo)
    o2 = multihead_attention(q2, kv, kv, 2, wq, wk, wv, wo)
    # attended part is the projected value regardless of the query
    np.testing.assert_allclose(o1.value - q1.value, o2.value - q2.value, atol=1e-12)


def test_attention_identical_keys_uniform_weights():
    rng = np.random.default_rng(1)
    d = 4
    wq, wk, wv, wo = attn_params(rng, d)
    key = rng.standard_normal((1, d))
    keys = Tensor(np.repeat(key, 5, axis=0))
    q = rand_tensor(rng, 3, d)
    _, weights = multihead_attention(q, keys, keys, 2, wq, wk, wv, wo, return_weights=True)
    for w in weights:
        np.testing.assert_allclose(w.value, 0.2, atol=1e-9)


def test_attention_matches_straight_line_oracle():
    rng = np.random.default_rng(2)
    d, heads = 4, 2
    wq, wk, wv, wo = attn_params(rng, d)
    q, k = rand_tensor(rng, 2, d), rand_tensor(rng, 3, d)
    got = multihead_attention(q, k, k, heads, wq, wk, wv, wo).value
    want = brute_multihead(q.value, k.value, k.value, heads, wq.value, wk.value, wv.value, wo.value)
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_attention_zero_keys_sentinel():
    rng = np.random.default_rng(3)
    d = 4
    wq, wk, wv, wo = attn_params(rng, d)
    q = rand_tensor(rng, 2, d)
    empty = Tensor(np.zeros((0, d)))
    out = multihead_attention(q, empty, empty, 2, wq, wk, wv, wo)
    np.testing.assert_array_equal(out.value, q.value)


def test_attention_dim_not_divisible():
    rng = np.random.default_rng(4)
    wq, wk, wv, wo = attn_params(rng, 6)
    q = rand_tensor(rng, 2, 6)
    with pytest.raises(ContractError):
        multihead_attention(q, q, q, 4, wq, wk, wv, wo)


# ---------------------------------------------------------------- gradients


def store_with(seed, **shapes):
    store = ParameterStore(seed=seed)
    for name, shape in shapes.items():
        store.create(name, shape)
    return store


def test_grad_check_quadratic():
    store = ParameterStore()
    w = store.create("w", (1, 1))
    w.value[:] = 3.0
    report = grad_check(lambda: tsum(mul(store["w"], 1.0) * store["w"]), store, sample_count=1, epsilon=1e-4)
    s = report.samples[0]
    assert s.analytic == pytest.approx(6.0, abs=1e-9)
    assert s.numeric == pytest.approx(6.0, abs=1e-6)


def test_grad_check_softmax_dot():
    rng = np.random.default_rng(5)
    store = store_with(5, w=(1, 6))
    c = rng.standard_normal((1, 6))

    def loss():
        return tsum(softmax_rows(store["w"]) * c)

    report = grad_check(loss, store, sample_count=6, epsilon=1e-5)
    assert report.max_rel_err < 1e-6


PRIMS = {}


def _prim(fn):
    PRIMS[fn.__name__] = fn
    return fn


@_prim
def loss_arith(store):
    a, b = store["a"], store["b"]
    return tsum((a + b) * a + (a - b) + a * 0.5 + (2.0 - b))


@_prim
def loss_matmul(store):
    return tsum(matmul(store["a"], store["c"].T) + matmul(store["a"], store["c"].T))


@_prim
def loss_concat_slice_gather(store):
    a = concat([store["a"], store["b"]], axis=0)
    g = gather_rows(a, np.array([0, 2, 1, 1]))
    return tsum(slice_cols(g, 1, 3))


@_prim
def loss_reductions(store):
    a = store["a"]
    return tsum(tmean(a, axis=0)) + tsum(tmax(a, axis=1)) + tmean(a)


@_prim
def loss_pointwise(store):
    a = store["a"]
    return tsum(sigmoid(a) + tanh(a) + gt.exp(a * 0.1) + gt.log(sigmoid(a)))


@_prim
def loss_minmax(store):
    return tsum(minimum(store["a"], store["b"]) + maximum(store["a"], store["b"]) * 2.0)


@_prim
def loss_softmax(store):
    return tsum(softmax_rows(store["a"]) * np.arange(8.0).reshape(2, 4))


@_prim
def loss_softmax_masked(store):
    mask = np.array([[True, False, True, True], [True, True, False, True]])
    return tsum(softmax_rows(store["a"], mask) * np.arange(8.0).reshape(2, 4))


@_prim
def loss_segment_max(store):
    a = concat([store["a"], store["b"]], axis=0)
    return tsum(segment_max(a, np.array([0, 1, 4])))


@_prim
def loss_smooth_l1(store):
    return tsum(smooth_l1(store["a"], 0.1))


@_prim
def loss_kl(store):
    q = softmax_rows(store["a"])
    p = softmax_rows(store["b"])
    return kl_rows(q, p)


@_prim
def loss_attention(store):
    out = multihead_attention(store["a"], store["b"], store["b"], 2, store["wq"], store["wk"], store["wv"], store["wo"])
    return tsum(out * out)


@pytest.mark.parametrize("name", sorted(PRIMS))
def test_primitive_gradients_match_finite_differences(name):
    store = store_with(11, a=(2, 4), b=(2, 4), c=(3, 4), wq=(4, 4), wk=(4, 4), wv=(4, 4), wo=(4, 4))
    report = grad_check(lambda: PRIMS[name](store), store, sample_count=60, epsilon=1e-5, seed=3)
    assert report.max_rel_err < 1e-4, report.worst


def test_forward_is_deterministic():
    store = store_with(9, a=(3, 5), b=(3, 5))

    def run():
        return tsum(softmax_rows(matmul(store["a"], store["b"].T)) * 2.0).item()

    assert run() == run()


# ---------------------------------------------------------------- parameters


def test_parameter_store_sorted_unique():
    store = store_with(0, b=(2, 2), a=(2, 2))
    assert store.names() == ["a", "b"]
    with pytest.raises(ContractError):
        store.create("a", (1, 1))


def test_parameter_init_deterministic_and_name_keyed():
    s1 = store_with(42, w=(4, 6), v=(4, 6))
    s2 = ParameterStore(seed=42)
    s2.create("v", (4, 6))  # creation order must not matter
    s2.create("w", (4, 6))
    np.testing.assert_array_equal(s1["w"].value, s2["w"].value)
    np.testing.assert_array_equal(s1["v"].value, s2["v"].value)
    assert not np.array_equal(s1["w"].value, s1["v"].value)
    bound = math.sqrt(6.0 / (4 + 6))
    assert np.abs(s1["w"].value).max() <= bound


def test_bias_initialized_zero():
    store = ParameterStore(seed=1)
    b = store.create("b", (7,))
    assert b.value.shape == (1, 7)
    assert (b.value == 0).all()


def test_checkpoint_round_trip_exact(tmp_path):
    store = store_with(3, w=(3, 4), b=(4,))
    store["b"].value[:] = np.pi
    path = str(tmp_path / "ckpt.json")
    store.save(path)
    other = store_with(99, w=(3, 4), b=(4,))
    other.load(path)
    np.testing.assert_array_equal(other["w"].value, store["w"].value)
    np.testing.assert_array_equal(other["b"].value, store["b"].value)


def test_checkpoint_name_mismatch(tmp_path):
    store = store_with(3, w=(3, 4))
    path = str(tmp_path / "ckpt.json")
    store.save(path)
    other = store_with(3, w=(3, 4), extra=(1, 1))
    with pytest.raises(ContractError):
        other.load(path)


def test_clip_grads_global_norm():
    store = store_with(0, a=(2, 2), b=(2, 2))
    store["a"].grad = np.full((2, 2), 3.0)
    store["b"].grad = np.full((2, 2), 4.0)
    store.clip_grads(5.0)
    assert store.grad_global_norm() == pytest.approx(5.0, rel=1e-12)
