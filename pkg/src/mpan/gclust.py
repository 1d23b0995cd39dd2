"""Graph-driven clustering pretext and the k-means baseline.

A cosine-similarity adjacency over a pool of embeddings feeds one graph
convolution (A X W + b) and three fully connected layers whose k-way argmax
becomes the pseudo-label for each pool sample. The adjacency is built once
per refresh and treated as a constant: no gradient flows through it.

The head's own parameters are trained by alternating self-training
(cross-entropy against its frozen current assignments) plus a balance
regularizer that pushes the mean soft assignment toward uniform. While the
regularizer is active, refresh assignments additionally respect a
per-cluster capacity cap of ceil(N/k), which is what keeps clusters from
emptying out or collapsing onto one label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as ng
from .errors import CapacityError, ContractError, StalenessError
from .model import Backbone, LinearHead, kaiming_uniform
from .ndgrad import SGD, Tensor


@dataclass
class FeaturePool:
    """Embeddings of the unlabeled pool, one row per sample id."""
    features: Tensor          # [N, d]
    ids: np.ndarray           # [N] sample ids

    def __post_init__(self):
        if self.features.data.shape[0] != len(self.ids):
            raise ContractError("feature rows and sample ids must correspond 1:1")


def pool_from_backbone(images: np.ndarray, ids, backbone: Backbone,
                       batch_size: int = 256) -> FeaturePool:
    """Embed a pool of images against a frozen backbone snapshot."""
    rows = []
    with ng.no_grad():
        for i in range(0, images.shape[0], batch_size):
            rows.append(backbone.extract_features(Tensor(images[i:i + batch_size])).data)
    feats = np.concatenate(rows, axis=0) if rows else np.zeros((0, backbone.embedding_dim))
    return FeaturePool(features=Tensor(feats), ids=np.asarray(ids, dtype=np.int64))


def build_adjacency(pool: FeaturePool) -> np.ndarray:
    """Pairwise cosine similarity matrix, exactly symmetric with unit diagonal.

    Returned as a plain array: the adjacency is a constant input to
    gc_forward, never differentiated through.
    """
    x = pool.features.data
    if x.shape[0] == 0:
        raise ContractError("cannot build adjacency over an empty pool")
    norms = np.sqrt((x.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
    nonzero = norms[:, 0] > 0
    if not np.all(nonzero):
        ng.ANOMALIES["cosine_zero_vector"] += int((~nonzero).sum())
    xn = np.where(norms > 0, x / np.where(norms > 0, norms, 1.0), 0.0)
    a = xn @ xn.T
    a = (a + a.T) / 2.0                    # exact bitwise symmetry
    np.clip(a, -1.0, 1.0, out=a)
    a[np.arange(len(a)), np.arange(len(a))] = np.where(nonzero, 1.0, 0.0)
    return a.astype(x.dtype)


class GcHead:
    """Graph conv weight W [d x d] + bias, then fc layers d -> 512 -> 256 -> k."""

    def __init__(self, dim: int, k: int = 10, fc_dims=(512, 256),
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.k = k
        self.gcw = Tensor(kaiming_uniform(rng, (dim, dim), fan_in=dim), requires_grad=True)
        self.gcb = Tensor(np.zeros((1, dim), dtype=np.float32), requires_grad=True)
        self.fc1 = LinearHead(dim, fc_dims[0], rng=rng)
        self.fc2 = LinearHead(fc_dims[0], fc_dims[1], rng=rng)
        self.fc3 = LinearHead(fc_dims[1], k, rng=rng)

    def parameters(self) -> list[Tensor]:
        return ([self.gcw, self.gcb] + self.fc1.parameters()
                + self.fc2.parameters() + self.fc3.parameters())

    def named_parameters(self, prefix: str = "gc_head") -> dict[str, Tensor]:
        out = {f"{prefix}.gcw": self.gcw, f"{prefix}.gcb": self.gcb}
        out.update(self.fc1.named_parameters(f"{prefix}.fc1"))
        out.update(self.fc2.named_parameters(f"{prefix}.fc2"))
        out.update(self.fc3.named_parameters(f"{prefix}.fc3"))
        return out


def gc_forward(pool: FeaturePool, adjacency: np.ndarray, head: GcHead) -> Tensor:
    """Assignment scores fc3(relu(fc2(relu(fc1(A X W + b))))), shape [N, k]."""
    x = pool.features
    graph = ng.add(ng.matmul(ng.matmul(Tensor(adjacency), x), head.gcw), head.gcb)
    h = ng.relu(head.fc1.forward(graph))
    h = ng.relu(head.fc2.forward(h))
    return head.fc3.forward(h)


@dataclass
class PseudoLabels:
    """Cluster assignment per pool sample, stamped with its refresh epoch."""
    labels: np.ndarray        # [N] ints in [0, k)
    ids: np.ndarray           # [N] sample ids
    epoch: int = 0
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {int(i): int(l) for i, l in zip(self.ids, self.labels)}

    def lookup(self, sample_ids) -> np.ndarray:
        out = np.empty(len(sample_ids), dtype=np.int64)
        for j, sid in enumerate(sample_ids):
            try:
                out[j] = self._index[int(sid)]
            except KeyError:
                raise StalenessError(
                    f"sample id {int(sid)} is not in the pool these pseudo-labels "
                    f"were built from (epoch {self.epoch})") from None
        return out


def assign_pseudo_labels(scores: Tensor, ids, epoch: int = 0) -> PseudoLabels:
    """Per-row argmax; ties resolve to the lowest cluster index."""
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    return PseudoLabels(labels=data.argmax(axis=1).astype(np.int64),
                        ids=np.asarray(ids, dtype=np.int64), epoch=epoch)


def capped_argmax(scores: np.ndarray, cap: int) -> np.ndarray:
    """Argmax assignment under a per-cluster capacity cap.

    Rows are visited most-confident first; each takes its best-scoring
    cluster that still has room (ties toward the lowest index). With
    cap = ceil(N/k) no cluster can dominate the assignment.
    """
    n, k = scores.shape
    order = np.argsort(-scores.max(axis=1), kind="stable")
    counts = np.zeros(k, dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    for i in order:
        for c in np.argsort(-scores[i], kind="stable"):
            if counts[c] < cap:
                labels[i] = int(c)
                counts[c] += 1
                break
    return labels


def clustering_loss(images: np.ndarray, image_ids, pseudo: PseudoLabels,
                    backbone: Backbone, head_clu: LinearHead) -> Tensor:
    """k-way cross-entropy against pseudo-labels; gradients reach the
    backbone and head_clu only (labels are constants)."""
    labels = pseudo.lookup(image_ids)
    emb = backbone.extract_features(Tensor(images) if not isinstance(images, Tensor) else images)
    return ng.softmax_cross_entropy(head_clu.forward(emb), labels)


def clustering_loss_from_embeddings(emb: Tensor, image_ids, pseudo: PseudoLabels,
                                    head_clu: LinearHead) -> Tensor:
    labels = pseudo.lookup(image_ids)
    return ng.softmax_cross_entropy(head_clu.forward(emb), labels)


def clip_gradients(params, max_norm: float) -> None:
    """Scale all gradients down so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    total = np.sqrt(total)
    if total > max_norm > 0:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale


def gc_update(pool: FeaturePool, adjacency: np.ndarray, head: GcHead, steps: int,
              lr: float = 0.05, lambda_bal: float = 1.0, momentum: float = 0.9,
              weight_decay: float = 5e-4, prev_labels: PseudoLabels | None = None,
              epoch: int = 0, clip_norm: float = 5.0) -> PseudoLabels:
    """Alternating self-training refresh of the clustering head.

    Freezes the current assignments, takes ``steps`` SGD steps on
    cross-entropy vs those labels plus ``lambda_bal`` times the
    KL(mean soft assignment || uniform) balance term, then re-assigns.
    With ``lambda_bal > 0`` both the frozen targets and the final labels
    come from the capacity-capped argmax (cap = ceil(N/k)), so no refresh
    can leave a dominant cluster; with ``lambda_bal == 0`` assignments are
    the plain argmax. Gradients are clipped to ``clip_norm`` because raw
    A X W rows grow with pool size. A non-finite loss aborts the refresh:
    parameters roll back and the previous labels are kept.
    """
    x = Tensor(pool.features.data)  # constants for this refresh
    frozen_pool = FeaturePool(features=x, ids=pool.ids)
    n = x.data.shape[0]
    cap = -(-n // head.k)  # ceil(N / k)

    def assign(score_data: np.ndarray) -> np.ndarray:
        if lambda_bal > 0:
            return capped_argmax(score_data, cap)
        return score_data.argmax(axis=1).astype(np.int64)

    if steps == 0:
        if prev_labels is not None:
            return prev_labels
        with ng.no_grad():
            scores = gc_forward(frozen_pool, adjacency, head).data
        return PseudoLabels(labels=assign(scores), ids=pool.ids, epoch=epoch)

    with ng.no_grad():
        frozen = assign(gc_forward(frozen_pool, adjacency, head).data)
    snapshot = [p.data.copy() for p in head.parameters()]
    opt = SGD(head.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    mean_row = Tensor(np.full((1, n), 1.0 / n, dtype=x.data.dtype))
    for _ in range(steps):
        scores = gc_forward(frozen_pool, adjacency, head)
        ce = ng.softmax_cross_entropy(scores, frozen)
        m = ng.matmul(mean_row, ng.softmax(scores))
        balance = ng.tsum(ng.mul(m, ng.log(ng.add(ng.mul(m, float(head.k)), 1e-12))))
        loss = ng.add(ce, ng.mul(balance, float(lambda_bal)))
        if not np.isfinite(loss.item()):
            for p, s in zip(head.parameters(), snapshot):
                p.data = s
            ng.ANOMALIES["gc_refresh_abort"] += 1
            if prev_labels is not None:
                return prev_labels
            with ng.no_grad():
                scores = gc_forward(frozen_pool, adjacency, head).data
            return PseudoLabels(labels=assign(scores), ids=pool.ids, epoch=epoch)
        ng.backward(loss)
        clip_gradients(head.parameters(), clip_norm)
        opt.step()
    with ng.no_grad():
        final = gc_forward(frozen_pool, adjacency, head).data
    return PseudoLabels(labels=assign(final), ids=pool.ids, epoch=epoch)


# ---------------------------------------------------------------------------
# k-means baseline
# ---------------------------------------------------------------------------


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[rng.integers(0, n)]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(0, n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[c] = x[idx]
        closest = np.minimum(closest, ((x - centroids[c]) ** 2).sum(axis=1))
    return centroids


def kmeans_lloyd(x: np.ndarray, k: int, max_iters: int = 100, seed: int = 0,
                 init_centroids: np.ndarray | None = None):
    """Lloyd iterations with k-means++ init and empty-cluster reassignment.

    Empty clusters grab the point currently farthest from its own centroid.
    Returns (labels, centroids, inertia_history); the history is recorded
    once per iteration and is non-increasing.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise CapacityError(f"k-means needs at least k={k} points, pool has {n}")
    rng = np.random.default_rng(seed)
    centroids = (np.array(init_centroids, dtype=np.float64) if init_centroids is not None
                 else _kmeans_pp_init(x, k, rng))
    labels = None
    inertia_history: list[float] = []
    for _ in range(max_iters):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        for c in range(k):
            if not np.any(new_labels == c):
                own = d2[np.arange(n), new_labels]
                far = int(own.argmax())
                new_labels[far] = c
                centroids[c] = x[far]
        for c in range(k):
            centroids[c] = x[new_labels == c].mean(axis=0)
        inertia_history.append(float(((x - centroids[new_labels]) ** 2).sum()))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
    return labels, centroids, inertia_history


def kmeans_baseline(pool: FeaturePool, k: int, max_iters: int = 100, seed: int = 0,
                    epoch: int = 0) -> PseudoLabels:
    labels, _, _ = kmeans_lloyd(pool.features.data, k, max_iters=max_iters, seed=seed)
    return PseudoLabels(labels=labels.astype(np.int64), ids=pool.ids, epoch=epoch)
