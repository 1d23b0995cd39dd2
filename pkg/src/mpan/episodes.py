"""Datasets, class splits, N-way K-shot episodes, and accuracy statistics.

The synthetic generator is the default data source: class identity controls
shape type, preferred orientation, and texture frequency, over a fixed
corner-to-corner ramp that gives every patch a position cue, so all four
pretext tasks and the few-shot task have genuine signal to learn. Images
are standardized per sample so raw first-order statistics carry no class
information.

On-disk format: ``manifest.json`` listing classes and files, one flat
little-endian float32 ``.ten`` file of shape [channels, H, W] per image.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as ng
from .errors import CapacityError, ConfigError, ContractError, IntegrityError
from .model import CosineClassifier
from .ndgrad import SGD, Tensor

Z_VALUES = {0.90: 1.645, 0.95: 1.96, 0.99: 2.576}

N_SHAPE_TYPES = 5


@dataclass
class Split:
    """Disjoint class-id partition."""
    base: np.ndarray
    val: np.ndarray
    novel: np.ndarray


@dataclass
class Dataset:
    images: np.ndarray            # [n, c, s, s] float32
    labels: np.ndarray            # [n] int64
    class_names: list[str]
    split: Split | None = None

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def indices_of_class(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)


@dataclass
class UnlabeledPool:
    """Base-split sample ids with the labels dropped."""
    ids: np.ndarray


def unlabeled_pool(dataset: Dataset) -> UnlabeledPool:
    if dataset.split is None:
        raise ContractError("dataset has no split; call split_classes first")
    mask = np.isin(dataset.labels, dataset.split.base)
    return UnlabeledPool(ids=np.flatnonzero(mask))


@dataclass
class Episode:
    support_images: np.ndarray    # [N*K, c, s, s]
    support_labels: np.ndarray    # [N*K] episode-local 0..N-1
    query_images: np.ndarray      # [N*T, c, s, s]
    query_labels: np.ndarray      # [N*T]
    class_ids: np.ndarray         # [N] novel class ids, index = local label
    support_ids: np.ndarray       # dataset indices, for disjointness checks
    query_ids: np.ndarray


@dataclass
class EvalReport:
    accuracies: list[float]
    mean_accuracy: float
    ci95_halfwidth: float
    episodes: int
    n_way: int = 0
    k_shot: int = 0
    t_query: int = 0
    config_hash: str = ""
    fine_tune_steps: int = 0
    fine_tune_lr: float = 0.0


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _shape_mask(shape_type: int, yy, xx, cy, cx, radius, angle):
    dy = yy - cy
    dx = xx - cx
    if shape_type == 0:          # disk
        return dy * dy + dx * dx < radius * radius
    if shape_type == 1:          # square ring
        m = np.maximum(np.abs(dy), np.abs(dx))
        return (m < radius) & (m > 0.55 * radius)
    if shape_type == 2:          # plus
        within = np.maximum(np.abs(dy), np.abs(dx)) < radius
        return within & ((np.abs(dy) < 0.35 * radius) | (np.abs(dx) < 0.35 * radius))
    if shape_type == 3:          # oriented bar
        u = dx * math.cos(angle) + dy * math.sin(angle)
        v = -dx * math.sin(angle) + dy * math.cos(angle)
        return (np.abs(u) < radius) & (np.abs(v) < 0.3 * radius)
    # checker dots inside a disk
    inside = dy * dy + dx * dx < radius * radius
    return inside & (np.sin(dy * 9.0 / radius) * np.sin(dx * 9.0 / radius) > 0)


def generate_synthetic(num_classes: int, per_class: int, image_size: int, seed: int,
                       channels: int = 1, noise: float = 0.1,
                       standardize: bool = True) -> Dataset:
    """Procedural dataset whose class identity is genuinely learnable."""
    if num_classes < 7:
        raise ConfigError(f"need at least 7 classes for a base/val/novel split, got {num_classes}")
    if per_class < 1 or image_size < 8 or channels < 1:
        raise ConfigError("per_class must be >= 1, image_size >= 8, channels >= 1")
    master = np.random.default_rng(seed)
    # class identity lives on an orientation x frequency grid, so some class
    # pairs differ only by texture orientation and others only by frequency;
    # shape type is a secondary cue. Orientation-sensitive features (the kind
    # rotation prediction trains) are therefore genuinely discriminative.
    shape_types = np.arange(num_classes) % N_SHAPE_TYPES
    # orientations stay inside [0, 90): a 90-degree rotation maps the class
    # orientations onto a disjoint set, so predicting rotation exercises the
    # same fine orientation discrimination that separates the classes
    orient_grid = math.pi / 8.0 * (np.arange(num_classes) % 4)
    freq_grid = np.array([2.2, 3.4, 4.8, 6.4])[(np.arange(num_classes) // 4) % 4]
    orientations = orient_grid + master.uniform(-0.08, 0.08, size=num_classes)
    frequencies = freq_grid * master.uniform(0.95, 1.05, size=num_classes) \
        + 0.8 * (np.arange(num_classes) // 16)
    phases_base = master.uniform(0, 2 * math.pi, size=num_classes)

    s = image_size
    grid = np.linspace(0.0, 1.0, s, dtype=np.float64)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    # fixed position cue shared by every class; kept weak so orientation
    # tasks must read image content, not just this one gradient
    ramp = 0.12 * (xx + yy) / 2.0

    images = np.empty((num_classes * per_class, channels, s, s), dtype=np.float32)
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    idx = 0
    for c in range(num_classes):
        for i in range(per_class):
            rng = np.random.default_rng([seed, c, i])
            cy = 0.5 + rng.uniform(-0.18, 0.18)
            cx = 0.5 + rng.uniform(-0.18, 0.18)
            radius = 0.22 * rng.uniform(0.8, 1.25)
            angle = orientations[c] + rng.uniform(-0.12, 0.12)
            phase = phases_base[c] + rng.uniform(-2.0, 2.0)
            # two offset harmonics make the grating asymmetric under 180
            # degree rotation, so the texture alone identifies all four
            # rotations and rotation features stay class-aligned
            u = 2 * math.pi * frequencies[c] * (xx * math.cos(angle) + yy * math.sin(angle))
            tex = 0.38 * np.sin(u + phase) + 0.24 * np.sin(2 * u + 1.7 * phase + 1.0)
            canvas = ramp + tex
            canvas = canvas + 0.5 * _shape_mask(shape_types[c], yy, xx, cy, cx, radius, angle)
            img = np.repeat(canvas[None, :, :], channels, axis=0)
            img = img + noise * rng.normal(size=img.shape)
            if standardize:
                std = img.std()
                img = (img - img.mean()) / (std if std > 1e-8 else 1.0)
            images[idx] = img.astype(np.float32)
            labels[idx] = c
            idx += 1
    names = [f"class_{c:02d}" for c in range(num_classes)]
    return Dataset(images=images, labels=labels, class_names=names)


# ---------------------------------------------------------------------------
# on-disk dataset format
# ---------------------------------------------------------------------------


def write_dataset(dataset: Dataset, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    classes = []
    for c, name in enumerate(dataset.class_names):
        os.makedirs(os.path.join(out_dir, name), exist_ok=True)
        files = []
        for j, i in enumerate(dataset.indices_of_class(c)):
            rel = f"{name}/img_{j:04d}.ten"
            dataset.images[i].astype("<f4").tofile(os.path.join(out_dir, rel))
            files.append(rel)
        classes.append({"name": name, "files": files})
    manifest = {"image_size": dataset.image_size, "channels": dataset.channels,
                "classes": classes}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def load_dataset(in_dir: str) -> Dataset:
    path = os.path.join(in_dir, "manifest.json")
    if not os.path.exists(path):
        raise ConfigError(f"no manifest.json in {in_dir}")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    s = int(manifest["image_size"])
    c = int(manifest["channels"])
    expected = c * s * s
    images, labels, names = [], [], []
    for class_id, entry in enumerate(manifest["classes"]):
        names.append(entry["name"])
        for rel in entry["files"]:
            arr = np.fromfile(os.path.join(in_dir, rel), dtype="<f4")
            if arr.size != expected:
                raise IntegrityError(
                    f"{rel}: expected {expected} float32 values, found {arr.size}")
            images.append(arr.reshape(c, s, s))
            labels.append(class_id)
    if not images:
        raise IntegrityError(f"manifest in {in_dir} lists no images")
    return Dataset(images=np.stack(images).astype(np.float32),
                   labels=np.array(labels, dtype=np.int64), class_names=names)


# ---------------------------------------------------------------------------
# splits and episodes
# ---------------------------------------------------------------------------


def split_classes(dataset: Dataset, base_frac: float, val_frac: float, seed: int) -> Dataset:
    """Seeded class-level partition into base / val / novel."""
    if base_frac + val_frac > 1.0 + 1e-9:
        raise ConfigError(f"split fractions sum to {base_frac + val_frac:.3f} > 1")
    n = dataset.num_classes
    n_base = round(n * base_frac)
    n_val = round(n * val_frac)
    n_novel = n - n_base - n_val
    if min(n_base, n_val, n_novel) < 1:
        raise ConfigError(
            f"every split needs at least one class, got base={n_base} val={n_val} novel={n_novel}")
    order = np.random.default_rng(seed).permutation(n)
    split = Split(base=np.sort(order[:n_base]),
                  val=np.sort(order[n_base:n_base + n_val]),
                  novel=np.sort(order[n_base + n_val:]))
    return Dataset(images=dataset.images, labels=dataset.labels,
                   class_names=dataset.class_names, split=split)


def sample_episode(dataset: Dataset, n_way: int, k_shot: int, t_query: int,
                   rng: np.random.Generator) -> Episode:
    """Uniform class and sample choice without replacement from the novel split."""
    if dataset.split is None:
        raise ContractError("dataset has no split; call split_classes first")
    novel = dataset.split.novel
    if len(novel) < n_way:
        raise CapacityError(f"{n_way}-way episode needs {n_way} novel classes, have {len(novel)}")
    class_ids = rng.choice(novel, size=n_way, replace=False)
    sup_img, sup_lab, sup_idx = [], [], []
    qry_img, qry_lab, qry_idx = [], [], []
    for local, cid in enumerate(class_ids):
        pool = dataset.indices_of_class(int(cid))
        if len(pool) < k_shot + t_query:
            raise CapacityError(
                f"class {dataset.class_names[int(cid)]} has {len(pool)} samples, "
                f"needs {k_shot + t_query}")
        picked = rng.choice(pool, size=k_shot + t_query, replace=False)
        sup_idx.extend(picked[:k_shot])
        qry_idx.extend(picked[k_shot:])
        sup_lab.extend([local] * k_shot)
        qry_lab.extend([local] * t_query)
    sup_idx = np.array(sup_idx, dtype=np.int64)
    qry_idx = np.array(qry_idx, dtype=np.int64)
    return Episode(support_images=dataset.images[sup_idx],
                   support_labels=np.array(sup_lab, dtype=np.int64),
                   query_images=dataset.images[qry_idx],
                   query_labels=np.array(qry_lab, dtype=np.int64),
                   class_ids=np.asarray(class_ids, dtype=np.int64),
                   support_ids=sup_idx, query_ids=qry_idx)


def fine_tune_and_score(episode: Episode, frozen_backbone, steps: int = 100,
                        lr: float = 0.01, rng: np.random.Generator | None = None,
                        momentum: float = 0.9, weight_decay: float = 5e-4) -> float:
    """Train a fresh N-way cosine classifier on the support embeddings and
    return query accuracy. The backbone is only ever called under no_grad,
    so its parameters cannot move."""
    rng = rng if rng is not None else np.random.default_rng(0)
    n_way = len(episode.class_ids)
    with ng.no_grad():
        both = np.concatenate([episode.support_images, episode.query_images], axis=0)
        emb = frozen_backbone.extract_features(Tensor(both)).data
    sup = Tensor(emb[:len(episode.support_images)])
    qry = emb[len(episode.support_images):]
    clf = CosineClassifier(n_way, emb.shape[1], rng=rng)
    opt = SGD(clf.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    for _ in range(steps):
        loss = ng.softmax_cross_entropy(clf.logits(sup), episode.support_labels)
        ng.backward(loss)
        opt.step()
    with ng.no_grad():
        pred = clf.logits(Tensor(qry)).data.argmax(axis=1)
    return float((pred == episode.query_labels).mean())


def aggregate(accuracies, confidence: float = 0.95) -> EvalReport:
    """Mean accuracy with a z-interval half-width z * s / sqrt(E)."""
    accs = [float(a) for a in accuracies]
    if len(accs) < 2:
        raise ContractError(f"need at least 2 episode accuracies, got {len(accs)}")
    if confidence not in Z_VALUES:
        raise ContractError(f"unsupported confidence {confidence}; choose from {sorted(Z_VALUES)}")
    arr = np.asarray(accs, dtype=np.float64)
    s = float(arr.std(ddof=1))
    half = Z_VALUES[confidence] * s / math.sqrt(len(accs))
    return EvalReport(accuracies=accs, mean_accuracy=float(arr.mean()),
                      ci95_halfwidth=half, episodes=len(accs))
