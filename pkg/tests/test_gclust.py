"""Adjacency, graph-conv clustering head, pseudo-labels, k-means baseline."""

import math

import numpy as np
import pytest

from helpers import fd_grad, rel_err

from mpan import gclust as gc
from mpan import ndgrad as ng
from mpan.errors import CapacityError, ContractError, StalenessError
from mpan.model import Backbone, LinearHead
from mpan.ndgrad import Tensor


def make_pool(x):
    return gc.FeaturePool(features=Tensor(np.asarray(x)), ids=np.arange(len(x)))


def two_blobs(n_per=20, d=8, scale=5.0, sigma=0.15, seed=0):
    """Two tight Gaussian clouds pointing along orthogonal directions."""
    rng = np.random.default_rng(seed)
    c1 = np.zeros(d); c1[0] = scale
    c2 = np.zeros(d); c2[1] = scale
    a = c1 + sigma * rng.normal(size=(n_per, d))
    b = c2 + sigma * rng.normal(size=(n_per, d))
    x = np.concatenate([a, b]).astype(np.float32)
    truth = np.repeat([0, 1], n_per)
    return x, truth


def separation_accuracy(labels, truth):
    """Max accuracy over the two label permutations (k=2)."""
    acc = (labels == truth).mean()
    return max(acc, 1.0 - acc)


# ---------------------------------------------------------------------------
# adjacency
# ---------------------------------------------------------------------------


def test_adjacency_singleton():
    a = gc.build_adjacency(make_pool(np.array([[1.0, 2.0]])))
    np.testing.assert_array_equal(a, [[1.0]])


def test_adjacency_orthogonal_pair():
    a = gc.build_adjacency(make_pool(np.array([[1.0, 0.0], [0.0, 2.0]])))
    np.testing.assert_allclose(a, np.eye(2), atol=1e-7)
    assert a[0, 0] == 1.0 and a[1, 1] == 1.0


def test_adjacency_matches_pairwise_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 7)).astype(np.float32)
    a = gc.build_adjacency(make_pool(x))
    for i in range(5):
        for j in range(5):
            expect = 1.0 if i == j else float(
                np.dot(x[i], x[j]) / (np.linalg.norm(x[i]) * np.linalg.norm(x[j])))
            assert abs(float(a[i, j]) - expect) < 1e-6
    np.testing.assert_array_equal(a, a.T)          # exactly symmetric
    assert a.min() >= -1.0 and a.max() <= 1.0


def test_adjacency_empty_pool_rejected():
    with pytest.raises(ContractError):
        gc.build_adjacency(make_pool(np.zeros((0, 4))))


# ---------------------------------------------------------------------------
# gc head forward
# ---------------------------------------------------------------------------


def test_gc_forward_identity_adjacency_reduces_to_xw():
    rng = np.random.default_rng(2)
    head = gc.GcHead(dim=4, k=3, fc_dims=(6, 5), rng=rng)
    x = rng.normal(size=(5, 4)).astype(np.float32)
    pool = make_pool(x)
    scores = gc.gc_forward(pool, np.eye(5, dtype=np.float32), head).data

    h = x @ head.gcw.data + head.gcb.data        # A = I drops out
    h = np.maximum(h @ head.fc1.weight.data + head.fc1.bias.data, 0)
    h = np.maximum(h @ head.fc2.weight.data + head.fc2.bias.data, 0)
    expect = h @ head.fc3.weight.data + head.fc3.bias.data
    np.testing.assert_allclose(scores, expect, atol=1e-5)


def test_gc_forward_zero_head_zero_scores():
    head = gc.GcHead(dim=3, k=4, fc_dims=(5, 4), rng=np.random.default_rng(3))
    for p in head.parameters():
        p.data[:] = 0
    pool = make_pool(np.random.default_rng(4).normal(size=(6, 3)).astype(np.float32))
    scores = gc.gc_forward(pool, gc.build_adjacency(pool), head).data
    np.testing.assert_array_equal(scores, np.zeros((6, 4)))


def test_gc_forward_output_width_is_k():
    for n in (1, 3, 10):
        pool = make_pool(np.random.default_rng(n).normal(size=(n, 6)).astype(np.float32))
        head = gc.GcHead(dim=6, k=7, fc_dims=(8, 8), rng=np.random.default_rng(0))
        assert gc.gc_forward(pool, gc.build_adjacency(pool), head).data.shape == (n, 7)


def test_gc_forward_gradient_wrt_w_and_x():
    rng = np.random.default_rng(5)
    head = gc.GcHead(dim=3, k=2, fc_dims=(4, 3), rng=rng)
    for p in head.parameters():
        p.data = p.data.astype(np.float64)
    x = rng.normal(size=(4, 3))
    adj = gc.build_adjacency(make_pool(x))

    def loss_with(warr, xarr):
        saved = head.gcw.data
        head.gcw.data = warr
        pool = gc.FeaturePool(features=Tensor(xarr, requires_grad=True), ids=np.arange(4))
        out = ng.mean(gc.gc_forward(pool, adj, head))
        head.gcw.data = saved
        return out, pool.features

    pool = gc.FeaturePool(features=Tensor(x, requires_grad=True), ids=np.arange(4))
    loss = ng.mean(gc.gc_forward(pool, adj, head))
    ng.backward(loss)

    num_w = fd_grad(lambda w: float(loss_with(w, x)[0].data), [head.gcw.data.copy()], 0)
    assert rel_err(head.gcw.grad, num_w) < 1e-5
    num_x = fd_grad(lambda xa: float(loss_with(head.gcw.data, xa)[0].data), [x], 0)
    assert rel_err(pool.features.grad, num_x) < 1e-5


# ---------------------------------------------------------------------------
# pseudo-labels
# ---------------------------------------------------------------------------


def test_assign_argmax_and_tie_rule():
    scores = Tensor(np.array([[0.0, 5.0, 1.0], [2.0, 2.0, 2.0]]))
    pl = gc.assign_pseudo_labels(scores, ids=[10, 11])
    assert pl.labels[0] == 1
    assert pl.labels[1] == 0  # tie -> lowest index


def test_assign_matches_row_scan_oracle():
    rng = np.random.default_rng(6)
    scores = rng.normal(size=(20, 10))
    pl = gc.assign_pseudo_labels(Tensor(scores), ids=np.arange(20))
    for i in range(20):
        best, best_v = 0, scores[i, 0]
        for c in range(1, 10):
            if scores[i, c] > best_v:
                best, best_v = c, scores[i, c]
        assert pl.labels[i] == best


def test_clustering_loss_uniform_head():
    rng = np.random.default_rng(7)
    imgs = rng.normal(size=(4, 1, 8, 8)).astype(np.float32)
    bb = Backbone(in_channels=1, widths=(4, 6), rng=np.random.default_rng(0), image_size=8)
    head = LinearHead(6, 10, rng=np.random.default_rng(1))
    head.weight.data[:] = 0
    head.bias.data[:] = 0
    pl = gc.PseudoLabels(labels=np.array([0, 3, 9, 5]), ids=np.arange(4))
    loss = gc.clustering_loss(imgs, np.arange(4), pl, bb, head)
    assert abs(loss.item() - math.log(10)) < 1e-6


def test_clustering_loss_oracle_head_near_zero():
    labels = np.array([2, 0, 1, 3])
    pl = gc.PseudoLabels(labels=labels, ids=np.arange(4))
    emb = np.zeros((4, 4), dtype=np.float32)
    emb[np.arange(4), labels] = 1000.0
    head = LinearHead(4, 4, rng=np.random.default_rng(0))
    head.weight.data = np.eye(4, dtype=np.float32)
    head.bias.data[:] = 0
    loss = gc.clustering_loss_from_embeddings(Tensor(emb), np.arange(4), pl, head)
    assert loss.item() < 1e-4


def test_clustering_loss_stale_id():
    pl = gc.PseudoLabels(labels=np.array([0, 1]), ids=np.array([5, 6]))
    head = LinearHead(3, 2, rng=np.random.default_rng(0))
    with pytest.raises(StalenessError, match="7"):
        gc.clustering_loss_from_embeddings(Tensor(np.zeros((1, 3), dtype=np.float32)), [7], pl, head)


def test_clustering_loss_gradient_vs_fd():
    rng = np.random.default_rng(8)
    imgs = rng.normal(size=(4, 1, 6, 6))
    bb = Backbone(in_channels=1, widths=(2, 3), rng=np.random.default_rng(1), image_size=6)
    head = LinearHead(3, 5, rng=np.random.default_rng(2))
    for p in bb.parameters() + head.parameters():
        p.data = p.data.astype(np.float64)
    pl = gc.PseudoLabels(labels=np.array([0, 4, 2, 2]), ids=np.arange(4))
    kernel = bb.kernels[0]

    def value(karr):
        saved = kernel.data
        kernel.data = karr
        with ng.no_grad():
            out = gc.clustering_loss(imgs, np.arange(4), pl, bb, head).item()
        kernel.data = saved
        return out

    ng.backward(gc.clustering_loss(imgs, np.arange(4), pl, bb, head))
    num = fd_grad(lambda k: value(k), [kernel.data.copy()], 0)
    assert rel_err(kernel.grad, num) < 1e-5


# ---------------------------------------------------------------------------
# gc_update
# ---------------------------------------------------------------------------


def run_gc_rounds(pool, head, total_steps, per_round=5, lambda_bal=2.0, lr=0.1):
    adjacency = gc.build_adjacency(pool)
    labels = None
    for _ in range(total_steps // per_round):
        labels = gc.gc_update(pool, adjacency, head, steps=per_round,
                              lr=lr, lambda_bal=lambda_bal, prev_labels=labels)
    return labels


def test_gc_update_separates_blobs_three_seeds():
    for seed in range(3):
        x, truth = two_blobs(seed=seed)
        pool = make_pool(x)
        head = gc.GcHead(dim=x.shape[1], k=2, fc_dims=(16, 8), rng=np.random.default_rng(seed + 100))
        labels = run_gc_rounds(pool, head, total_steps=50)
        assert separation_accuracy(labels.labels, truth) == 1.0, f"seed {seed}"


def test_gc_update_zero_steps_keeps_labels():
    x, _ = two_blobs(seed=5)
    pool = make_pool(x)
    head = gc.GcHead(dim=x.shape[1], k=2, rng=np.random.default_rng(0))
    prev = gc.PseudoLabels(labels=np.zeros(len(x), dtype=np.int64), ids=pool.ids)
    out = gc.gc_update(pool, gc.build_adjacency(pool), head, steps=0, prev_labels=prev)
    assert out is prev


def test_gc_update_balance_prevents_dominance():
    # random pool, lambda_bal on: no cluster may hold more than 80 percent
    for seed in range(3):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(60, 12)).astype(np.float32)
        pool = make_pool(x)
        head = gc.GcHead(dim=12, k=10, fc_dims=(32, 16), rng=np.random.default_rng(seed + 50))
        labels = run_gc_rounds(pool, head, total_steps=50, lambda_bal=2.0)
        counts = np.bincount(labels.labels, minlength=10)
        assert counts.max() <= 0.8 * 60, f"seed {seed}: {counts}"


def test_gc_update_large_balance_near_uniform():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(200, 10)).astype(np.float32)
    pool = make_pool(x)
    head = gc.GcHead(dim=10, k=4, fc_dims=(24, 12), rng=np.random.default_rng(1))
    labels = run_gc_rounds(pool, head, total_steps=100, per_round=10, lambda_bal=20.0)
    counts = np.bincount(labels.labels, minlength=4)
    assert counts.min() > 0
    assert counts.max() / counts.min() <= 2.0, counts


def test_gc_update_nonfinite_aborts_and_rolls_back():
    ng.ANOMALIES.clear()
    x, _ = two_blobs(seed=6)
    pool = make_pool(x)
    head = gc.GcHead(dim=x.shape[1], k=2, rng=np.random.default_rng(2))
    head.fc3.bias.data[:] = np.inf  # scores all inf -> cross entropy is NaN
    before = [p.data.copy() for p in head.parameters()]
    prev = gc.PseudoLabels(labels=np.ones(len(x), dtype=np.int64), ids=pool.ids)
    out = gc.gc_update(pool, gc.build_adjacency(pool), head, steps=5, prev_labels=prev)
    assert out is prev
    assert ng.ANOMALIES["gc_refresh_abort"] == 1
    for p, b in zip(head.parameters(), before):
        np.testing.assert_array_equal(p.data, b)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


def test_kmeans_k_equals_n_zero_inertia():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(6, 3))
    labels, _, history = gc.kmeans_lloyd(x, k=6, seed=0)
    assert sorted(labels) == list(range(6))
    assert history[-1] < 1e-12


def test_kmeans_separates_blobs_three_seeds():
    for seed in range(3):
        x, truth = two_blobs(seed=seed)
        pl = gc.kmeans_baseline(make_pool(x), k=2, seed=seed)
        assert separation_accuracy(pl.labels, truth) == 1.0, f"seed {seed}"


def test_kmeans_k1_centroid_is_mean():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(15, 4))
    _, centroids, _ = gc.kmeans_lloyd(x, k=1, seed=0)
    assert np.abs(centroids[0] - x.mean(axis=0)).max() < 1e-9


def test_kmeans_inertia_monotone():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(80, 5))
    _, _, history = gc.kmeans_lloyd(x, k=6, seed=3)
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_kmeans_empty_cluster_reassignment():
    x, _ = two_blobs(n_per=10, seed=13)
    # third centroid parked far away so its cluster starts empty
    init = np.stack([x[0], x[10], np.full(x.shape[1], 1e6)])
    labels, _, history = gc.kmeans_lloyd(x, k=3, init_centroids=init, seed=0)
    assert len(np.unique(labels)) == 3
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_kmeans_capacity_error():
    with pytest.raises(CapacityError):
        gc.kmeans_lloyd(np.zeros((3, 2)), k=5)
