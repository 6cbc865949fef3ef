import math

import numpy as np
import pytest

import msmil.numcore as nc
from msmil.numcore import Rng, Tensor


def backward_of(f, *params):
    for p in params:
        p.grad = None
    with nc.record() as g:
        loss = f()
    g.backward(loss)
    return loss


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    eye = nc.tensor(np.eye(2))
    m = nc.tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nc.matmul(eye, m).data, m.data)


def test_matmul_zero_annihilates():
    z = nc.tensor(np.zeros((2, 3)))
    m = nc.tensor(np.arange(12.0).reshape(3, 4))
    np.testing.assert_array_equal(nc.matmul(z, m).data, np.zeros((2, 4)))


def test_matmul_hand_case():
    a = nc.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = nc.tensor([[5.0], [6.0]])
    # by hand: [1*5+2*6, 3*5+4*6]
    np.testing.assert_array_equal(nc.matmul(a, b).data, [[17.0], [39.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nc.ShapeError) as e:
        nc.matmul(nc.tensor(np.zeros((2, 3))), nc.tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(e.value) and "(4, 5)" in str(e.value)


def test_matmul_backward_rule():
    a = nc.param(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = nc.param(np.array([[5.0, 6.0], [7.0, 8.0]]))
    backward_of(lambda: nc.sum_all(nc.matmul(a, b)), a, b)
    ones = np.ones((2, 2))
    np.testing.assert_allclose(a.grad, ones @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ ones)


# ---------------------------------------------------------------- softmax


def test_softmax_uniform_row():
    out = nc.softmax_rows(nc.tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_softmax_shift_invariance():
    x = np.array([[0.3, -1.2, 2.0, 0.0]])
    a = nc.softmax_rows(nc.tensor(x)).data
    b = nc.softmax_rows(nc.tensor(x + 17.5)).data
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_softmax_scalar_oracle():
    # exp(1)/(exp(1)+exp(2)) etc.
    out = nc.softmax_rows(nc.tensor([[1.0, 2.0]])).data
    e1, e2 = math.exp(1.0), math.exp(2.0)
    np.testing.assert_allclose(out, [[e1 / (e1 + e2), e2 / (e1 + e2)]], atol=1e-5)
    np.testing.assert_allclose(out, [[0.26894, 0.73106]], atol=1e-5)


def test_softmax_rows_sum_to_one_wide_range():
    rng = Rng(11)
    for _ in range(50):
        x = (rng.uniform(40).reshape(8, 5) - 0.5) * 100.0  # entries within +/-50
        y = nc.softmax_rows(nc.tensor(x)).data
        assert (y >= 0).all()
        np.testing.assert_allclose(y.sum(axis=1), np.ones(8), rtol=0, atol=1e-12)


# -------------------------------------------------------------- layer_norm


def test_layer_norm_constant_row_zero():
    g = nc.tensor(np.ones((1, 4)))
    b = nc.tensor(np.zeros((1, 4)))
    out = nc.layer_norm(nc.tensor([[3.0, 3.0, 3.0, 3.0]]), g, b)
    np.testing.assert_allclose(out.data, np.zeros((1, 4)), atol=1e-12)


def test_layer_norm_already_normalized():
    g = nc.tensor(np.ones((1, 2)))
    b = nc.tensor(np.zeros((1, 2)))
    out = nc.layer_norm(nc.tensor([[-1.0, 1.0]]), g, b, eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-6)


def test_layer_norm_moments():
    x = Rng(5).normal(4).reshape(1, 4) * 3.0 + 1.0
    g = nc.tensor(np.ones((1, 4)))
    b = nc.tensor(np.zeros((1, 4)))
    out = nc.layer_norm(nc.tensor(x), g, b).data
    assert abs(out.mean()) < 1e-9
    assert 1 - 1e-3 <= out.var() <= 1.0


def test_layer_norm_rejects_degenerate_row():
    g = nc.tensor(np.ones((1, 1)))
    with pytest.raises(nc.ShapeError):
        nc.layer_norm(nc.tensor([[1.0]]), g, g)


# ----------------------------------------------------------- cross entropy


def test_cross_entropy_perfect_prediction():
    logits = nc.tensor([[1e6, 0.0, 0.0]])
    assert nc.cross_entropy(logits, 0).item() == pytest.approx(0.0, abs=1e-9)


def test_cross_entropy_uniform_logits():
    logits = nc.tensor([[2.0] * 5])
    assert nc.cross_entropy(logits, 3).item() == pytest.approx(math.log(5.0), abs=1e-6)


def test_cross_entropy_scalar_oracle():
    # -log(e^1 / (e^1 + e^2)) = log(1 + e)
    val = nc.cross_entropy(nc.tensor([[1.0, 2.0]]), 0).item()
    assert val == pytest.approx(math.log(1.0 + math.e), abs=1e-5)
    assert val == pytest.approx(1.31326, abs=1e-5)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(nc.LabelError):
        nc.cross_entropy(nc.tensor([[0.0, 0.0]]), 2)


def test_cross_entropy_gradient_is_probs_minus_onehot():
    logits = nc.param(np.array([[0.5, -0.2, 1.1]]))
    backward_of(lambda: nc.cross_entropy(logits, 1), logits)
    p = np.exp(logits.data - logits.data.max())
    p /= p.sum()
    expected = p.copy()
    expected[0, 1] -= 1.0
    np.testing.assert_allclose(logits.grad, expected, atol=1e-12)


# ---------------------------------------------------------------- optimizer


def test_sgd_plain_step():
    p = nc.param(np.array([[1.0, 2.0]]))
    opt = nc.GradAccumSgd([p], lr=0.1, accum_steps=1)
    p.grad = np.array([[1.0, -1.0]])
    opt.accumulate()
    opt.step()
    np.testing.assert_allclose(p.data, [[0.9, 2.1]])


def test_sgd_cancellation():
    p = nc.param(np.array([[5.0]]))
    opt = nc.GradAccumSgd([p], lr=0.5, accum_steps=2)
    p.grad = np.array([[3.0]])
    opt.accumulate()
    p.grad = np.array([[-3.0]])
    opt.accumulate()
    opt.step()
    np.testing.assert_array_equal(p.data, [[5.0]])


def test_sgd_accumulation_means_grads():
    g = np.array([[0.7, -0.3]])
    p1 = nc.param(np.array([[1.0, 1.0]]))
    opt1 = nc.GradAccumSgd([p1], lr=0.2, accum_steps=4)
    for _ in range(4):
        p1.grad = g.copy()
        opt1.accumulate()
    opt1.step()

    p2 = nc.param(np.array([[1.0, 1.0]]))
    opt2 = nc.GradAccumSgd([p2], lr=0.2, accum_steps=1)
    p2.grad = (g + g + g + g) / 4
    opt2.accumulate()
    opt2.step()
    np.testing.assert_array_equal(p1.data, p2.data)


def test_sgd_premature_step_is_protocol_error():
    p = nc.param(np.array([[1.0]]))
    opt = nc.GradAccumSgd([p], lr=0.1, accum_steps=3)
    p.grad = np.array([[1.0]])
    opt.accumulate()
    with pytest.raises(nc.ProtocolError):
        opt.step()


def test_sgd_accumulate_never_mutates_params():
    p = nc.param(np.array([[2.0]]))
    opt = nc.GradAccumSgd([p], lr=0.1, accum_steps=2)
    p.grad = np.array([[1.0]])
    opt.accumulate()
    np.testing.assert_array_equal(p.data, [[2.0]])


# ---------------------------------------------------------- gradient check


def test_finite_diff_square():
    x = nc.param(np.array([[3.0]]))
    err = nc.finite_diff_check(lambda: nc.mul(x, x), [x])
    assert err < 1e-8


def test_finite_diff_linear_exact():
    x = nc.param(np.array([[1.0, -2.0, 0.5]]))
    w = nc.tensor(np.array([[2.0], [3.0], [-1.0]]))
    err = nc.finite_diff_check(lambda: nc.matmul(x, w), [x], h=1e-4)
    assert err < 1e-10


def test_finite_diff_detects_nondeterminism():
    state = {"v": 0.0}
    x = nc.param(np.array([[1.0]]))

    def f():
        state["v"] += 1.0
        return nc.scale(x, state["v"])

    with pytest.raises(nc.DeterminismError):
        nc.finite_diff_check(f, [x])


def _rand(rng, *shape):
    return rng.normal(int(np.prod(shape))).reshape(shape)


def test_all_ops_pass_finite_diff_on_random_shapes():
    """Every differentiable op, 100 seeded random trials overall."""
    rng = Rng(202)
    trial = 0
    while trial < 100:
        m = 2 + trial % 3
        k = 2 + (trial // 3) % 3
        n = 2 + (trial // 9) % 3
        a = nc.param(_rand(rng, m, k))
        b = nc.param(_rand(rng, k, n))
        c = nc.param(_rand(rng, m, k))
        row = nc.param(_rand(rng, 1, k))
        gain = nc.param(_rand(rng, 1, k) * 0.1 + 1.0)
        bias = nc.param(_rand(rng, 1, k) * 0.1)
        cases = {
            "matmul": (lambda: nc.sum_all(nc.silu(nc.matmul(a, b))), [a, b]),
            "add_broadcast": (lambda: nc.sum_all(nc.sigmoid(nc.add(a, row))), [a, row]),
            "mul": (lambda: nc.sum_all(nc.mul(a, c)), [a, c]),
            "softmax": (lambda: nc.sum_all(nc.mul(nc.softmax_rows(a), c)), [a]),
            "layer_norm": (lambda: nc.sum_all(nc.mul(nc.layer_norm(a, gain, bias), c)), [a, gain, bias]),
            "transpose": (lambda: nc.sum_all(nc.silu(nc.transpose(a))), [a]),
            "reshape": (lambda: nc.sum_all(nc.silu(nc.reshape(a, (k, m)))), [a]),
            "slices": (lambda: nc.sum_all(nc.concat_rows([nc.slice_rows(a, 0, 1), nc.slice_rows(a, 1, m)])), [a]),
            "slice_cols": (lambda: nc.sum_all(nc.silu(nc.slice_cols(a, 1, k))), [a]),
            "concat_cols": (lambda: nc.sum_all(nc.silu(nc.concat_cols([a, c]))), [a, c]),
            "gather": (lambda: nc.sum_all(nc.gather_rows(a, [0, -1, m - 1, 0])), [a]),
            "cross_entropy": (lambda: nc.cross_entropy(nc.slice_rows(a, 0, 1), trial % k), [a]),
        }
        name = list(cases)[trial % len(cases)]
        f, params = cases[name]
        err = nc.finite_diff_check(f, params)
        assert err < 1e-4, f"{name} trial {trial}: err {err}"
        trial += 1


def test_conv_unfold_finite_diff():
    rng = Rng(303)
    x = nc.param(_rand(rng, 2 * 4 * 4, 3))
    w = nc.param(_rand(rng, 9 * 3, 2) * 0.3)
    f = lambda: nc.sum_all(nc.silu(nc.matmul(nc.conv_unfold(x, 2, 4, 3, 2, 1), w)))
    assert nc.finite_diff_check(f, [x, w]) < 1e-4


def test_block_attention_finite_diff():
    rng = Rng(404)
    q = nc.param(_rand(rng, 2 * 3, 4) * 0.5)
    k = nc.param(_rand(rng, 2 * 3, 4) * 0.5)
    v = nc.param(_rand(rng, 2 * 3, 4) * 0.5)
    f = lambda: nc.sum_all(nc.silu(nc.block_self_attention(q, k, v, 3, 2)))
    assert nc.finite_diff_check(f, [q, k, v]) < 1e-4


def test_block_attention_matches_loop_of_plain_ops():
    rng = Rng(505)
    batch, seq, dim, heads = 3, 5, 8, 2
    q = nc.tensor(_rand(rng, batch * seq, dim))
    k = nc.tensor(_rand(rng, batch * seq, dim))
    v = nc.tensor(_rand(rng, batch * seq, dim))
    fused = nc.block_self_attention(q, k, v, seq, heads).data
    hd = dim // heads
    for b in range(batch):
        for h in range(heads):
            qs = q.data[b * seq:(b + 1) * seq, h * hd:(h + 1) * hd]
            ks = k.data[b * seq:(b + 1) * seq, h * hd:(h + 1) * hd]
            vs = v.data[b * seq:(b + 1) * seq, h * hd:(h + 1) * hd]
            attn = nc.softmax_rows(nc.tensor(qs @ ks.T / np.sqrt(hd))).data
            np.testing.assert_allclose(fused[b * seq:(b + 1) * seq, h * hd:(h + 1) * hd], attn @ vs, atol=1e-12)


def test_gather_rows_negative_index_gives_zero_row():
    a = nc.tensor(np.arange(6.0).reshape(3, 2))
    out = nc.gather_rows(a, [1, -1, 0])
    np.testing.assert_array_equal(out.data, [[2.0, 3.0], [0.0, 0.0], [0.0, 1.0]])


# -------------------------------------------------------------- graph mode


def test_inference_forward_matches_recorded_forward_bitwise():
    rng = Rng(606)
    x = nc.param(_rand(rng, 3, 4))
    w = nc.param(_rand(rng, 4, 2))

    def f():
        return nc.softmax_rows(nc.matmul(nc.silu(x), w))

    plain = f().data
    with nc.record():
        recorded = f().data
    assert (plain == recorded).all()


def test_backward_visits_each_node_once():
    # y = x + x doubles the gradient exactly once per consumer
    x = nc.param(np.array([[1.0, 2.0]]))
    backward_of(lambda: nc.sum_all(nc.add(x, x)), x)
    np.testing.assert_array_equal(x.grad, [[2.0, 2.0]])


def test_no_recording_outside_context():
    x = nc.param(np.array([[1.0]]))
    with nc.record() as g:
        nc.scale(x, 2.0)
    n_inside = len(g.nodes)
    nc.scale(x, 2.0)
    assert n_inside == 1 and len(g.nodes) == 1


def test_constant_branches_are_not_recorded():
    x = nc.tensor(np.ones((2, 2)))  # no grad wanted
    with nc.record() as g:
        nc.matmul(x, x)
    assert len(g.nodes) == 0
