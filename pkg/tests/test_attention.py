import numpy as np
import pytest

from structinbet import attention as A
from structinbet.gradcheck import check_gradients
from structinbet.oracles import eq1_attention
from structinbet.tensor import ShapeError, Tensor, default_dtype, sum_all, mul


def rand(rng, *shape):
    return Tensor(rng.normal(size=shape))


def make_inputs(rng, B=2, N=5, M=5, D=8, H=2):
    return A.AttentionInputs(*(rand(rng, B, n, D) for n in (N, M, M, M, M)), rand(rng, B, N, D),
                             rand(rng, B, M, D), rand(rng, B, M, D), H)


def test_augment_zero_embeddings_is_identity():
    rng = np.random.default_rng(0)
    inp = make_inputs(rng)
    z = Tensor(np.zeros((2, 5, 8)))
    inp = A.AttentionInputs(inp.q, inp.k0, inp.v0, inp.kT, inp.vT, z, z, z, 2)
    outs = A.augment(inp)
    for got, want in zip(outs, (inp.q, inp.k0, inp.v0, inp.kT, inp.vT)):
        assert np.array_equal(got.data, want.data)


def test_augment_definitions():
    rng = np.random.default_rng(1)
    inp = make_inputs(rng)
    qt, k0t, v0t, kTt, vTt = A.augment(inp)
    assert np.array_equal(qt.data, inp.q.data + inp.emb_c.data)
    assert np.array_equal(k0t.data, inp.k0.data + inp.emb_0.data)
    assert np.array_equal(v0t.data, inp.v0.data + inp.emb_0.data)
    assert np.array_equal(kTt.data, inp.kT.data + inp.emb_T.data)
    assert np.array_equal(vTt.data, inp.vT.data + inp.emb_T.data)
    neg = A.AttentionInputs(inp.q, inp.k0, inp.v0, inp.kT, inp.vT, inp.emb_c,
                            Tensor(-inp.k0.data), inp.emb_T, 2)
    assert not A.augment(neg)[1].data.any()


def test_attention_inputs_validate():
    rng = np.random.default_rng(2)
    inp = make_inputs(rng)
    with pytest.raises(ShapeError):
        A.AttentionInputs(inp.q, inp.k0, inp.v0, inp.kT, inp.vT, inp.emb_c, inp.emb_0, inp.emb_T, 3)
    with pytest.raises(ShapeError):
        A.AttentionInputs(inp.q, inp.k0, inp.v0, rand(rng, 2, 4, 8), inp.vT, inp.emb_c, inp.emb_0, inp.emb_T, 2)


def test_reduction_to_single_reference():
    rng = np.random.default_rng(3)
    for _ in range(20):
        B, N, H = (int(v) for v in rng.integers(1, 4, 3))
        D = H * int(rng.integers(1, 5))
        q, k, v = rand(rng, B, N, D), rand(rng, B, N + 1, D), rand(rng, B, N + 1, D)
        bi = A.bidirectional_reference_attention(q, k, v, k, v, H).data
        single = A.single_reference_attention(q, k, v, H).data
        assert np.max(np.abs(bi - single)) < 1e-6


def test_constant_values_pass_through():
    rng = np.random.default_rng(4)
    c = rng.normal(size=8)
    v = Tensor(np.broadcast_to(c, (1, 6, 8)).copy())
    out = A.bidirectional_reference_attention(rand(rng, 1, 3, 8), rand(rng, 1, 6, 8), v, rand(rng, 1, 6, 8), v, 4)
    np.testing.assert_allclose(out.data, np.broadcast_to(c, (1, 3, 8)), atol=1e-6)


def test_small_integer_case_matches_bruteforce():
    q = Tensor([[[1.0], [2.0]]])
    k0, v0 = Tensor([[[0.0], [1.0]]]), Tensor([[[3.0], [-1.0]]])
    kT, vT = Tensor([[[2.0], [-1.0]]]), Tensor([[[0.0], [4.0]]])
    got = A.bidirectional_reference_attention(q, k0, v0, kT, vT, 1).data
    want = eq1_attention(q.data, k0.data, v0.data, kT.data, vT.data, 1)
    assert np.max(np.abs(got - want)) < 1e-6
    # hand evaluation of the first query row: softmax([0,1]) and softmax([2,-1])
    e = np.exp
    r0 = (3 * e(0) - 1 * e(1)) / (e(0) + e(1))
    rT = (0 * e(2) + 4 * e(-1)) / (e(2) + e(-1))
    assert abs(got[0, 0, 0] - 0.5 * (r0 + rT)) < 1e-6


def test_random_cases_match_bruteforce():
    rng = np.random.default_rng(5)
    for _ in range(50):
        N = int(rng.integers(1, 5))
        H = int(rng.choice([1, 2]))
        D = H * int(rng.integers(1, 5))
        ops = [rng.normal(size=(1, N, D)) for _ in range(5)]
        got = A.bidirectional_reference_attention(*(Tensor(o) for o in ops), H).data
        assert np.max(np.abs(got - eq1_attention(*ops, H))) < 1e-6


def test_convex_hull_of_values():
    rng = np.random.default_rng(6)
    q, k0, kT = rand(rng, 1, 4, 2), rand(rng, 1, 3, 2), rand(rng, 1, 3, 2)
    v0, vT = rand(rng, 1, 3, 2), rand(rng, 1, 3, 2)
    out = A.bidirectional_reference_attention(q, k0, v0, kT, vT, 1).data[0]
    pool = np.concatenate([v0.data[0], vT.data[0]])
    # bounding box is a necessary condition for hull membership
    assert np.all(out >= pool.min(axis=0) - 1e-6) and np.all(out <= pool.max(axis=0) + 1e-6)
    from scipy.optimize import linprog

    for row in out:
        # find weights w >= 0, sum w = 1, pool^T w = row
        A_eq = np.vstack([pool.T, np.ones(len(pool))])
        res = linprog(np.zeros(len(pool)), A_eq=A_eq, b_eq=np.append(row, 1.0), bounds=(0, None))
        assert res.status == 0


def test_uniform_keys_scale_invariance():
    rng = np.random.default_rng(7)
    k = Tensor(np.ones((1, 4, 4)))
    q, v0, vT = rand(rng, 1, 3, 4), rand(rng, 1, 4, 4), rand(rng, 1, 4, 4)
    a = A.bidirectional_reference_attention(q, k, v0, k, vT, 2).data
    b = A.bidirectional_reference_attention(q, Tensor(5 * k.data), v0, Tensor(5 * k.data), vT, 2).data
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a[0, 0], 0.5 * (v0.data[0].mean(0) + vT.data[0].mean(0)), atol=1e-6)


def test_gradients_all_five_inputs():
    rng = np.random.default_rng(8)
    ops = [rng.normal(size=(1, 3, 4)) for _ in range(5)]
    wo = rng.normal(size=(4, 4))
    r = rng.normal(size=(1, 3, 4))

    def f(ts):
        out = A.bidirectional_reference_attention(*ts[:5], 2, ts[5])
        return sum_all(mul(out, Tensor(r)))

    assert check_gradients(f, ops + [wo]).ok


def test_self_attention_single_token():
    rng = np.random.default_rng(9)
    x = rand(rng, 1, 1, 4)
    p = {k: rand(rng, 4, 4) for k in ("wq", "wk", "wv", "wo")}
    out = A.self_attention(x, p, 2).data
    np.testing.assert_allclose(out, x.data @ p["wv"].data @ p["wo"].data, atol=1e-6)


def test_self_attention_permutation_equivariance():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(1, 6, 8))
    p = {k: rand(rng, 8, 8) for k in ("wq", "wk", "wv", "wo")}
    perm = rng.permutation(6)
    a = A.self_attention(Tensor(x), p, 4).data
    b = A.self_attention(Tensor(x[:, perm]), p, 4).data
    np.testing.assert_allclose(b, a[:, perm], atol=1e-6)


def test_self_attention_two_tokens_bruteforce():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(1, 2, 4))
    p = {k: rng.normal(size=(4, 4)) for k in ("wq", "wk", "wv", "wo")}
    with default_dtype(np.float64):
        got = A.self_attention(Tensor(x), {k: Tensor(v) for k, v in p.items()}, 2).data
    q, k, v = x[0] @ p["wq"], x[0] @ p["wk"], x[0] @ p["wv"]
    want = np.zeros((2, 4))
    for h in range(2):
        sl = slice(2 * h, 2 * h + 2)
        for i in range(2):
            s = np.array([q[i, sl] @ k[j, sl] for j in range(2)]) / np.sqrt(2)
            w = np.exp(s) / np.exp(s).sum()
            want[i, sl] = w @ v[:, sl]
    assert np.max(np.abs(got[0] - want @ p["wo"])) < 1e-6
    with pytest.raises(ShapeError):
        A.self_attention(Tensor(x), {k: Tensor(v) for k, v in p.items()}, 3)


def test_extract_kv():
    rng = np.random.default_rng(12)
    wk, wv = rand(rng, 32, 32), rand(rng, 32, 32)
    k, v = A.extract_kv(Tensor(np.zeros((1, 16, 32))), wk, wv)
    assert not k.data.any() and not v.data.any()
    x = rand(rng, 1, 16, 32)
    k1, v1 = A.extract_kv(x, wk, wv)
    k2, v2 = A.extract_kv(x, wk, wv)
    assert k1.shape == v1.shape == (1, 16, 32)
    assert np.array_equal(k1.data, k2.data) and np.array_equal(v1.data, v2.data)
