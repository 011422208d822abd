import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import _oracle as oracle
from dbean import kernels
from dbean.model import (
    DegenerateInputError,
    ModelParams,
    attention_weights,
    backward_batch,
    batch_loss,
    classify,
    elman_step,
    forward,
    forward_batch,
    fuse,
    make_batch,
    refine,
    run_backward_path,
    run_forward_path,
)
from dbean.tensor import ShapeError, relative_error, sgd_step
from dbean.text import pad_truncate

V, D, H, HA = 7, 2, 3, 2


def tiny_params(seed=0, scale=0.8):
    """f64 parameters with weights large enough to exercise every term."""
    params = ModelParams.init(V, embed_dim=D, hidden=H, att_hidden=HA, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    for _, t in params.named():
        t.data[...] = rng.uniform(-scale, scale, size=t.shape)
    params.E.data[0] = 0
    return params


def arrays(params):
    return {n: t.data for n, t in params.named()}


def ex(ids, label=0, max_len=8):
    return pad_truncate(list(ids), label, max_len=max_len)


SEQS = [[1, 2, 3, 4, 5], [6, 2, 2], [3]]
LABELS = [1, 3, 0]


# --------------------------------------------------------------------------
# elman_step


def test_elman_step_zero_weights():
    out = elman_step(np.ones(3), np.ones(2), np.zeros((3, 5)), np.zeros(3))
    np.testing.assert_array_equal(out, 0)


def test_elman_step_identity_input():
    W = np.hstack([np.zeros((2, 2)), np.eye(2)])
    x = np.array([0.3, -2.0])
    np.testing.assert_allclose(elman_step(np.zeros(2), x, W, np.zeros(2)), np.tanh(x), atol=1e-7)


def test_elman_step_vs_oracle():
    rng = np.random.default_rng(3)
    W, b = rng.standard_normal((4, 7)), rng.standard_normal(4)
    hp, x = rng.standard_normal(4), rng.standard_normal(3)
    got = elman_step(hp, x, W.astype(np.float64), b)
    np.testing.assert_allclose(got, oracle.elman_step(hp, x, W, b), atol=1e-6)


def test_elman_step_shape_error():
    with pytest.raises(ShapeError):
        elman_step(np.zeros(3), np.zeros(3), np.zeros((3, 5)), np.zeros(3))


# --------------------------------------------------------------------------
# paths


def test_forward_path_single_step():
    p = tiny_params()
    x = p.E.data[4]
    want = np.tanh(p.W.data @ np.concatenate([np.zeros(H), x]) + p.b_f.data[0])
    np.testing.assert_allclose(run_forward_path(ex([4]), p), [want], atol=1e-12)


def test_backward_path_single_step():
    p = tiny_params()
    x = p.E.data[4]
    want = np.tanh(p.W.data @ np.concatenate([np.zeros(H), x]) + p.b_b.data[0])
    np.testing.assert_allclose(run_backward_path(ex([4]), p), [want], atol=1e-12)


@pytest.mark.parametrize("ids", [[1, 2, 3, 4, 5], [6, 1, 2, 2]])
def test_paths_vs_oracle(ids):
    p = tiny_params(1)
    ref = oracle.example_forward(arrays(p), ids)
    np.testing.assert_allclose(run_forward_path(ex(ids), p), ref["H_f"], atol=1e-10)
    np.testing.assert_allclose(run_backward_path(ex(ids), p), ref["H_b"], atol=1e-10)


def test_pads_do_not_advance_state():
    p = tiny_params(2)
    short = run_forward_path(ex([1, 2, 3], max_len=3), p)
    padded = run_forward_path(ex([1, 2, 3], max_len=8), p)
    np.testing.assert_array_equal(short, padded[:3])
    assert padded.shape[0] == 3


def test_palindrome_symmetry():
    p = tiny_params(4)
    p.b_b.data[...] = p.b_f.data
    ids = [1, 2, 3, 2, 1]
    Hf, Hb = run_forward_path(ex(ids), p), run_backward_path(ex(ids), p)
    np.testing.assert_allclose(Hb, Hf[::-1], atol=1e-12)


def test_degenerate_empty_sequence():
    with pytest.raises(DegenerateInputError):
        run_forward_path(ex([]), tiny_params())


# --------------------------------------------------------------------------
# fusion, attention, refinement, classification


def test_fuse_single_step_equals_global():
    rng = np.random.default_rng(0)
    Hf, Hb = rng.standard_normal((1, 2)), rng.standard_normal((1, 2))
    fused, glob = fuse(Hf, Hb)
    np.testing.assert_array_equal(fused[0], glob)
    assert fused.shape == (1, 4)


def test_fuse_values_and_mismatch():
    rng = np.random.default_rng(1)
    Hf, Hb = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    fused, glob = fuse(Hf, Hb)
    for t in range(4):
        np.testing.assert_array_equal(fused[t], list(Hf[t]) + list(Hb[t]))
    np.testing.assert_array_equal(glob, list(Hf[-1]) + list(Hb[0]))
    with pytest.raises(ShapeError):
        fuse(Hf, Hb[:3])


def test_attention_singleton():
    A = attention_weights(np.ones((1, 4)), [1], np.ones(8), 0.7)
    np.testing.assert_array_equal(A, [1.0])


def test_attention_identical_states_uniform_over_true_len():
    # fused_0's predecessor is zero, so only W_a's current-state half may be nonzero
    fused = np.tile([0.5, -0.2, 0.1, 0.3], (5, 1))
    W_a = np.concatenate([np.ones(4), np.zeros(4)])
    A = attention_weights(fused, [1, 1, 1, 0, 0], W_a, 2.0)
    np.testing.assert_allclose(A, [1 / 3] * 3 + [0, 0], atol=1e-15)


def test_attention_all_masked():
    with pytest.raises(DegenerateInputError):
        attention_weights(np.ones((3, 4)), [0, 0, 0], np.ones(8), 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_attention_normalized(L, seed):
    rng = np.random.default_rng(seed)
    fused = rng.standard_normal((L + 3, 6))
    mask = np.r_[np.ones(L), np.zeros(3)]
    A = attention_weights(fused, mask, rng.standard_normal(12), float(rng.uniform(0.1, 3)))
    assert abs(A.sum() - 1) <= 1e-6
    assert (A[L:] == 0).all() and (A >= 0).all()


def test_refine_zero_weights():
    rng = np.random.default_rng(2)
    pooled, steps = refine(rng.standard_normal((4, 6)), np.full(4, 0.25), np.zeros((3, 7)))
    np.testing.assert_array_equal(pooled, 0)


def test_refine_single_step():
    rng = np.random.default_rng(3)
    fused, Wd = rng.standard_normal((1, 6)), rng.standard_normal((3, 7))
    pooled, steps = refine(fused, np.array([1.0]), Wd)
    np.testing.assert_allclose(pooled, steps[0], atol=1e-15)
    np.testing.assert_allclose(steps[0], np.tanh(Wd[:, :6] @ fused[0] + Wd[:, 6]), atol=1e-12)


def test_classify_zero_head_is_uniform():
    Y = classify(np.ones(6), np.ones(2), np.zeros((4, 8)), np.zeros(4))
    np.testing.assert_array_equal(Y, 0.25)


def test_classify_normalized():
    rng = np.random.default_rng(5)
    Y = classify(rng.standard_normal(6), rng.standard_normal(2), 5 * rng.standard_normal((4, 8)),
                 rng.standard_normal(4))
    assert abs(Y.sum() - 1) <= 1e-6


# --------------------------------------------------------------------------
# full forward


@pytest.mark.parametrize("ids", [[1, 2, 3, 4, 5], [6, 2, 2], [3]])
def test_forward_vs_oracle(ids):
    p = tiny_params(6)
    tr = forward(ex(ids), p)
    ref = oracle.example_forward(arrays(p), ids)
    for key, got in (("H_f", tr.H_f), ("H_b", tr.H_b), ("fused", tr.fused), ("A", tr.A),
                     ("R", tr.H_att_steps), ("H_att", tr.H_att), ("H_fusion", tr.H_fusion), ("Y", tr.Y)):
        np.testing.assert_allclose(got, ref[key], atol=1e-5, err_msg=key)
    assert tr.batch_trace.ssl_per_example[0] == pytest.approx(ref["ssl"], abs=1e-10)


def test_forward_deterministic():
    p = tiny_params(7)
    a, b = forward(ex([1, 2, 3]), p), forward(ex([1, 2, 3]), p)
    assert a.Y.tobytes() == b.Y.tobytes() and a.A.tobytes() == b.A.tobytes()


def test_padded_vs_unpadded_identical():
    p = tiny_params(8)
    alone = forward(ex([5, 1, 4], max_len=3), p).Y
    padded = forward(ex([5, 1, 4], max_len=64), p).Y
    # inside a batch whose longest member forces extra pad steps
    batched = forward_batch(p, make_batch([ex([5, 1, 4]), ex([1, 2, 3, 4, 5, 6, 1])])).Y[0]
    np.testing.assert_array_equal(alone, padded)
    np.testing.assert_allclose(alone, batched, atol=1e-14)


def test_batch_invariants_float32():
    params = ModelParams.init(50, embed_dim=8, hidden=6, att_hidden=4, seed=1)
    rng = np.random.default_rng(0)
    batch = make_batch([ex(rng.integers(1, 50, size=n), max_len=20) for n in (1, 5, 20, 9)])
    tr = forward_batch(params, batch)
    assert np.abs(tr.A.sum(axis=0) - 1).max() <= 1e-6
    assert (tr.A[batch.mask == 0] == 0).all()
    assert np.abs(tr.Y.sum(axis=1) - 1).max() <= 1e-6


# --------------------------------------------------------------------------
# gradients


def _fd_oracle(P, name, loss, eps=1e-6):
    base = P[name]
    g = np.zeros_like(base)
    for i in np.ndindex(base.shape):
        orig = base[i]
        base[i] = orig + eps
        lp = loss()
        base[i] = orig - eps
        lm = loss()
        base[i] = orig
        g[i] = (lp - lm) / (2 * eps)
    return g


def test_gradients_vs_oracle_finite_differences():
    p = tiny_params(9)
    batch = make_batch([ex(s, y) for s, y in zip(SEQS, LABELS)])
    grads = backward_batch(p, forward_batch(p, batch), ssl_weight=0.1)
    P = {n: a.copy() for n, a in arrays(p).items()}

    def loss():
        return oracle.batch_loss(P, SEQS, LABELS, ssl_weight=0.1)

    worst = 0.0
    for name in P:
        fd = _fd_oracle(P, name, loss)
        worst = max(worst, float(relative_error(grads[name], fd).max()))
    assert worst <= 1e-4


def test_shared_weight_gradient_is_sum_of_paths():
    p = tiny_params(10)
    batch = make_batch([ex(s, y) for s, y in zip(SEQS, LABELS)])
    tr = forward_batch(p, batch)
    full = backward_batch(p, tr, ssl_weight=0.1)["W"]
    f_only = backward_batch(p, tr, ssl_weight=0.1, paths=("forward",))["W"]
    b_only = backward_batch(p, tr, ssl_weight=0.1, paths=("backward",))["W"]
    np.testing.assert_allclose(full, f_only + b_only, atol=1e-14)

    # freeze one direction in the oracle by giving it its own copy of W
    P = {n: a.copy() for n, a in arrays(p).items()}
    Wf, Wb = P["W"].copy(), P["W"].copy()
    P_f = {"Wf": Wf}
    fd_f = _fd_oracle(P_f, "Wf", lambda: oracle.batch_loss(P, SEQS, LABELS, 0.1, W_f=Wf, W_b=P["W"]))
    P_b = {"Wb": Wb}
    fd_b = _fd_oracle(P_b, "Wb", lambda: oracle.batch_loss(P, SEQS, LABELS, 0.1, W_f=P["W"], W_b=Wb))
    assert relative_error(f_only, fd_f).max() <= 1e-4
    assert relative_error(b_only, fd_b).max() <= 1e-4


def test_pad_embedding_gets_zero_gradient():
    p = tiny_params(11)
    batch = make_batch([ex([1, 2, 3, 4, 5, 6], 2), ex([2], 1), ex([3, 4], 0)])
    grads = backward_batch(p, forward_batch(p, batch), ssl_weight=0.1)
    assert (grads["E"][0] == 0).all()
    assert np.abs(grads["E"][1:]).sum() > 0


def test_padded_batch_gradients_match_unpadded():
    p = tiny_params(12)
    alone = make_batch([ex([5, 1, 4], 2, max_len=3)])
    padded = make_batch([ex([5, 1, 4], 2, max_len=30)])
    ga = backward_batch(p, forward_batch(p, alone), ssl_weight=0.1)
    gp = backward_batch(p, forward_batch(p, padded), ssl_weight=0.1)
    for name in ga:
        np.testing.assert_allclose(ga[name], gp[name], atol=1e-14, err_msg=name)


def test_weight_sharing_structural_identity():
    p = ModelParams.init(20, embed_dim=4, hidden=3, att_hidden=2, seed=0)
    assert p.W_f is p.W_b is p.W
    names = [n for n, _ in p.named()]
    assert "W_f" not in names and "W_b" not in names and names.count("W") == 1
    batch = make_batch([ex([1, 2, 3], 1)])
    p.set_grads(backward_batch(p, forward_batch(p, batch)))
    sgd_step(p, 0.1)
    assert p.W_f is p.W_b
    assert np.shares_memory(p.W_f.data, p.W_b.data)


def test_init_shapes_and_ranges():
    p = ModelParams.init(30, embed_dim=5, hidden=4, att_hidden=3, seed=0)
    assert p.W.shape == (4, 9) and p.W_a.shape == (1, 16) and p.W_d.shape == (3, 9)
    assert p.W_o.shape == (4, 11) and p.W_ssl.shape == (5, 4) and p.E.shape == (30, 5)
    assert np.abs(p.W.data).max() <= 1 / math.sqrt(9)
    assert p.alpha == pytest.approx(1 / math.sqrt(8), rel=1e-6)
    assert (p.E.data[0] == 0).all()


@pytest.mark.skipif(len(kernels.available_backends()) < 2, reason="compiled kernels not built")
def test_backends_agree():
    params = ModelParams.init(40, embed_dim=6, hidden=5, att_hidden=3, seed=2)
    rng = np.random.default_rng(1)
    batch = make_batch([ex(rng.integers(1, 40, size=n), i % 4, max_len=16) for i, n in enumerate((16, 3, 9))])
    out = {}
    for be in ("cython", "numpy"):
        tr = forward_batch(params, batch, backend=be)
        out[be] = (tr.Y, backward_batch(params, tr, ssl_weight=0.1, backend=be), batch_loss(tr, 0.1))
    np.testing.assert_allclose(out["cython"][0], out["numpy"][0], atol=1e-6)
    for name in out["numpy"][1]:
        np.testing.assert_allclose(out["cython"][1][name], out["numpy"][1][name], atol=1e-6, err_msg=name)


def test_backend_scan_oracle_f64():
    rng = np.random.default_rng(4)
    pre = rng.standard_normal((6, 3, 4))
    w = rng.standard_normal((4, 4)) * 0.5
    want = np.zeros_like(pre)
    h = np.zeros((3, 4))
    for t in range(6):
        h = np.tanh(pre[t] + h @ w.T)
        want[t] = h
    for be in kernels.available_backends():
        np.testing.assert_allclose(kernels.scan_forward(pre, w, backend=be), want, atol=1e-12)
