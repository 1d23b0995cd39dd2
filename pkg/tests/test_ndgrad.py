"""Tensor core: forward values, gradients vs finite differences, SGD."""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import fd_grad, rel_err

from mpan import ndgrad as ng
from mpan.errors import ContractError, DimensionError, DomainError, LabelError
from mpan.ndgrad import SGD, Tensor


def t64(arr, requires_grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def check_grad(forward, arrays, tol=1e-6, h=1e-5):
    """Compare analytic gradients of sum-style scalar ``forward`` to the
    finite-difference oracle, for every input array."""
    tensors = [t64(a) for a in arrays]
    loss = forward(*tensors)
    ng.backward(loss)
    for i, t in enumerate(tensors):
        num = fd_grad(lambda *xs: float(forward(*[Tensor(x) for x in xs]).data), arrays, i, h=h)
        assert t.grad is not None, f"input {i} received no gradient"
        assert rel_err(t.grad, num) < tol, f"input {i}: rel err {rel_err(t.grad, num)}"


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    rng = np.random.default_rng(0)
    b = rng.normal(size=(3, 4))
    out = ng.matmul(Tensor(np.eye(3)), Tensor(b))
    np.testing.assert_array_equal(out.data, b)


def test_matmul_scalar_case():
    out = ng.matmul(Tensor([[2.0]]), Tensor([[3.0]]))
    assert out.data[0, 0] == 6.0


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(4, 5\).*\(3, 2\)"):
        ng.matmul(Tensor(np.zeros((4, 5))), Tensor(np.zeros((3, 2))))


def test_matmul_gradient():
    rng = np.random.default_rng(1)
    for _ in range(5):
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        check_grad(lambda x, y: ng.tsum(ng.matmul(x, y)), [a, b], tol=1e-6)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def test_conv2d_1x1_identity():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 1, 4, 4))
    k = np.ones((1, 1, 1, 1))
    out = ng.conv2d(Tensor(x), Tensor(k))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_all_ones_3x3():
    x = np.ones((1, 1, 3, 3))
    k = np.ones((1, 1, 3, 3))
    out = ng.conv2d(Tensor(x), Tensor(k))
    assert out.data.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 9.0


def test_conv2d_output_size_and_kernel_too_large():
    out = ng.conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((2, 1, 3, 3))),
                    stride=2, padding=1)
    assert out.data.shape == (1, 2, 3, 3)  # floor((5+2-3)/2)+1
    with pytest.raises(DimensionError, match="larger than padded input"):
        ng.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 4, 4))))


def test_conv2d_gradient():
    rng = np.random.default_rng(3)
    for stride, pad in [(1, 0), (1, 1), (2, 1)]:
        x = rng.normal(size=(2, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        check_grad(lambda a, b: ng.tsum(ng.conv2d(a, b, stride=stride, padding=pad)),
                   [x, k], tol=1e-6)


# ---------------------------------------------------------------------------
# softmax cross entropy
# ---------------------------------------------------------------------------


def test_sce_uniform_logits():
    loss = ng.softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2])
    assert abs(loss.item() - math.log(4)) < 1e-12


def test_sce_dominant_logit():
    logits = np.zeros((1, 5))
    logits[0, 2] = 1000.0
    loss = ng.softmax_cross_entropy(Tensor(logits), [2])
    assert loss.item() < 1e-6


def test_sce_label_out_of_range():
    with pytest.raises(LabelError):
        ng.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_sce_gradient_matches_fd_and_closed_form():
    rng = np.random.default_rng(4)
    labels = np.array([3, 0])
    for _ in range(5):
        logits = rng.normal(size=(2, 5))
        check_grad(lambda x: ng.softmax_cross_entropy(x, labels), [logits], tol=1e-6)
    logits = rng.normal(size=(2, 5))
    lt = t64(logits)
    ng.backward(ng.softmax_cross_entropy(lt, labels))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    p[np.arange(2), labels] -= 1
    assert rel_err(lt.grad, p / 2) < 1e-12


def test_nll_from_probs_gradient():
    rng = np.random.default_rng(5)
    raw = rng.uniform(0.05, 1.0, size=(3, 4))
    probs = raw / raw.sum(axis=1, keepdims=True)
    labels = np.array([0, 2, 3])
    check_grad(lambda p: ng.nll_from_probs(p, labels), [probs], tol=1e-6)


# ---------------------------------------------------------------------------
# cosine similarity
# ---------------------------------------------------------------------------


def test_cosine_self_is_one():
    v = np.array([0.3, -1.2, 2.0])
    assert abs(ng.cosine_similarity(Tensor(v), Tensor(v)).item() - 1.0) < 1e-12


def test_cosine_orthogonal_is_zero():
    e1 = np.array([1.0, 0.0])
    e2 = np.array([0.0, 1.0])
    assert ng.cosine_similarity(Tensor(e1), Tensor(e2)).item() == 0.0


def test_cosine_scale_invariance():
    rng = np.random.default_rng(6)
    u = rng.normal(size=5)
    v = rng.normal(size=5)
    base = ng.cosine_similarity(t64(u, False), t64(v, False)).item()
    for alpha in (0.5, 3.0, 100.0):
        scaled = ng.cosine_similarity(t64(alpha * u, False), t64(v, False)).item()
        assert abs(scaled - base) < 1e-9


def test_cosine_zero_vector_rule():
    ng.ANOMALIES.clear()
    u = t64(np.zeros(3))
    v = t64(np.array([1.0, 2.0, 3.0]))
    out = ng.cosine_similarity(u, v)
    assert out.item() == 0.0
    ng.backward(out)
    assert u.grad is None and v.grad is None
    assert ng.ANOMALIES["cosine_zero_vector"] == 1


def test_cosine_gradient():
    rng = np.random.default_rng(7)
    for _ in range(5):
        u = rng.normal(size=6)
        v = rng.normal(size=6)
        check_grad(lambda a, b: ng.cosine_similarity(a, b), [u, v], tol=1e-6)


def test_l2_normalize_rows_zero_row():
    x = np.array([[3.0, 4.0], [0.0, 0.0]])
    out = ng.l2_normalize_rows(Tensor(x))
    np.testing.assert_allclose(out.data[0], [0.6, 0.8], rtol=1e-7)
    np.testing.assert_array_equal(out.data[1], [0.0, 0.0])


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------


def test_sigmoid_at_zero():
    assert ng.sigmoid(Tensor(np.array(0.0))).item() == 0.5


def test_relu_values():
    out = ng.relu(Tensor(np.array([-3.0, 3.0])))
    np.testing.assert_array_equal(out.data, [0.0, 3.0])


def test_log_domain_error():
    with pytest.raises(DomainError):
        ng.log(Tensor(np.array([1.0, -0.5])))


def projected(op, probe):
    """Scalarize op output through a fixed random projection so the check
    is non-degenerate even when a plain mean would be constant (softmax)."""
    def forward(*xs):
        out = op(*xs)
        return ng.tsum(ng.mul(out, Tensor(probe)))
    return forward


def test_elementwise_gradients():
    rng = np.random.default_rng(8)
    unary = [
        (ng.relu, lambda: rng.normal(size=(3, 4)) + np.sign(rng.normal(size=(3, 4))) * 0.2),
        (ng.sigmoid, lambda: rng.normal(size=(3, 4))),
        (ng.log, lambda: rng.uniform(0.2, 3.0, size=(3, 4))),
        (ng.mean, lambda: rng.normal(size=(3, 4))),
        (ng.tsum, lambda: rng.normal(size=(3, 4))),
        (ng.l2_norm, lambda: rng.normal(size=(3, 4)) + 0.5),
        (ng.l2_normalize_rows, lambda: rng.normal(size=(3, 4)) + 0.3),
        (ng.softmax, lambda: rng.normal(size=(3, 4))),
        (ng.transpose, lambda: rng.normal(size=(3, 4))),
        (lambda t: ng.reshape(t, (4, 3)), lambda: rng.normal(size=(3, 4))),
        (ng.neg, lambda: rng.normal(size=(3, 4))),
        (ng.global_avg_pool, lambda: rng.normal(size=(2, 3, 4, 4))),
        (ng.max_pool2d, lambda: rng.normal(size=(2, 2, 5, 6))),
    ]
    for op, gen in unary:
        for _ in range(5):
            a = gen()
            probe = rng.normal(size=op(Tensor(a)).data.shape)
            check_grad(projected(op, probe), [a], tol=1e-5)
    binary = [
        (ng.add, (3, 4), (3, 4)),
        (ng.add, (3, 4), (1, 4)),     # bias-row broadcast
        (ng.mul, (3, 4), (3, 4)),
        (ng.mul, (3, 4), ()),         # scalar broadcast
    ]
    for op, sa, sb in binary:
        for _ in range(5):
            probe = rng.normal(size=(3, 4))
            check_grad(projected(op, probe),
                       [rng.normal(size=sa), rng.normal(size=sb)], tol=1e-5)
    for _ in range(5):
        probe = rng.normal(size=(3, 6))
        check_grad(projected(lambda a, b: ng.concat([a, b], axis=1), probe),
                   [rng.normal(size=(3, 2)), rng.normal(size=(3, 4))], tol=1e-5)
    idx = np.array([0, 2, 2, 1])
    for _ in range(5):
        probe = rng.normal(size=(4, 4))
        check_grad(projected(lambda a: ng.gather_rows(a, idx), probe),
                   [rng.normal(size=(3, 4))], tol=1e-5)


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------


def test_backward_identityish():
    x = t64(np.array(2.0))
    y = ng.add(x, 0.0)
    ng.backward(y)
    assert x.grad == 1.0


def test_backward_square():
    x = t64(np.array(3.0))
    y = ng.mul(x, x)
    ng.backward(y)
    assert x.grad == 6.0


def test_backward_diamond_graph():
    def forward(x):
        a = ng.sigmoid(x)
        b = ng.mul(x, x)
        return ng.mean(ng.add(a, b))

    rng = np.random.default_rng(9)
    for _ in range(5):
        check_grad(forward, [rng.normal(size=(2, 3))], tol=1e-6)


def test_backward_requires_scalar():
    x = t64(np.ones((2, 2)))
    with pytest.raises(ContractError):
        ng.backward(ng.add(x, x))


def test_fanout_accumulation_sums_branches():
    x = t64(np.array([1.0, 2.0]))
    branches = [ng.tsum(ng.mul(x, float(kk))) for kk in range(1, 5)]
    total = branches[0]
    for b in branches[1:]:
        total = ng.add(total, b)
    ng.backward(total)
    np.testing.assert_allclose(x.grad, [10.0, 10.0], rtol=1e-12)


def test_no_grad_blocks_graph():
    x = t64(np.ones((2, 2)))
    with ng.no_grad():
        y = ng.mul(x, x)
    assert not y.requires_grad
    assert y._backward is None


# ---------------------------------------------------------------------------
# SGD
# ---------------------------------------------------------------------------


def test_sgd_zero_grad_zero_wd_no_change():
    p = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
    p.grad = np.zeros(2, dtype=np.float32)
    SGD([p], lr=0.1, momentum=0.0, weight_decay=0.0).step()
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_sgd_hand_step():
    p = Tensor(np.array([1.0], dtype=np.float64), requires_grad=True)
    p.grad = np.array([1.0])
    SGD([p], lr=0.1, momentum=0.0, weight_decay=0.0).step()
    assert abs(p.data[0] - 0.9) < 1e-12
    assert p.grad is None


def test_sgd_two_momentum_steps():
    p = Tensor(np.array([1.0], dtype=np.float64), requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.0)
    p.grad = np.array([1.0])
    opt.step()
    p.grad = np.array([1.0])
    opt.step()
    assert abs(p.data[0] - 0.71) < 1e-12


def test_sgd_weight_decay_coupled():
    p = Tensor(np.array([2.0], dtype=np.float64), requires_grad=True)
    p.grad = np.array([0.0])
    SGD([p], lr=0.1, momentum=0.0, weight_decay=0.5).step()
    assert abs(p.data[0] - 1.9) < 1e-12  # g = 0 + 0.5*2 = 1


def test_sgd_missing_grad_skipped_and_counted():
    ng.ANOMALIES.clear()
    p = Tensor(np.array([1.0]), requires_grad=True)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        SGD([p], lr=0.1).step()
    assert ng.ANOMALIES["sgd_missing_grad"] == 1
    assert len(w) == 1
    np.testing.assert_array_equal(p.data, [1.0])


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------


def test_determinism_same_seed_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(2, 1, 6, 6)).astype(np.float32), requires_grad=True)
        k = Tensor(rng.normal(size=(2, 1, 3, 3)).astype(np.float32), requires_grad=True)
        loss = ng.mean(ng.relu(ng.conv2d(x, k, padding=1)))
        ng.backward(loss)
        return loss.item(), x.grad.copy(), k.grad.copy()

    l1, gx1, gk1 = run()
    l2, gx2, gk2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(gx1, gx2)
    np.testing.assert_array_equal(gk1, gk2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(min_value=-50, max_value=50, allow_nan=False), min_size=1, max_size=12),
       st.integers(min_value=1, max_value=4))
def test_forward_stays_finite(values, rows):
    arr = np.array(values * rows, dtype=np.float64).reshape(rows, len(values))
    for op in (ng.relu, ng.sigmoid, ng.mean, ng.tsum, ng.l2_norm,
               ng.l2_normalize_rows, ng.softmax, ng.neg):
        out = op(Tensor(arr))
        assert np.all(np.isfinite(out.data)), op


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=5), st.integers(min_value=1, max_value=5),
       st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_shape_data_consistency(rows, cols, seed):
    rng = np.random.default_rng(seed)
    t = Tensor(rng.normal(size=(rows, cols)))
    assert int(np.prod(t.shape)) == t.data.size
    out = ng.mul(t, t)
    assert out.data.shape == t.data.shape
