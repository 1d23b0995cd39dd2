"""Augmentation-based pretext tasks: rotation, relative patch location, jigsaw.

All transforms are pure functions of (input, rng state), so a task built
twice from the same seed is bit-identical. The 90-degree rotation convention
is counter-clockwise, fixed by the 2x2 unit test; any consistent convention
yields an equivalent task.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations as iter_permutations

import numpy as np

from . import ndgrad as ng
from .errors import CapacityError, GeometryError
from .model import Backbone, CosineClassifier, LinearHead, few_shot_loss
from .ndgrad import Tensor

ROTATION_DEGREES = (0, 90, 180, 270)

# 3x3 grid flat indices of the 8 neighbours, clockwise from the upper-left
# corner; the centre patch is flat index 4.
CENTER_INDEX = 4
NEIGHBOR_ORDER = (0, 1, 2, 5, 8, 7, 6, 3)


# ---------------------------------------------------------------------------
# rotation
# ---------------------------------------------------------------------------


def rotate(image: np.ndarray, r: int) -> np.ndarray:
    """Rotate a [c,h,w] image by r * 90 degrees counter-clockwise, losslessly."""
    if image.ndim != 3:
        raise GeometryError(f"rotate expects a [c,h,w] image, got shape {image.shape}")
    if image.shape[1] != image.shape[2]:
        raise GeometryError(f"rotate requires a square image, got {image.shape[1]}x{image.shape[2]}")
    r = int(r) % 4
    if r == 0:
        return image.copy()
    return np.ascontiguousarray(np.rot90(image, k=r, axes=(1, 2)))


@dataclass
class RotationTask:
    """Each source image replicated under all four rotations."""
    images: np.ndarray   # [4b, c, h, w], grouped by rotation index
    labels: np.ndarray   # [4b] ints in {0,1,2,3}


def build_rotation_task(images: np.ndarray) -> RotationTask:
    if images.shape[2] != images.shape[3]:
        raise GeometryError(f"rotation task requires square images, got {images.shape}")
    b = images.shape[0]
    stacks = [images.copy()] + [np.rot90(images, k=r, axes=(2, 3)) for r in range(1, 4)]
    labels = np.repeat(np.arange(4, dtype=np.int64), b)
    return RotationTask(images=np.ascontiguousarray(np.concatenate(stacks, axis=0)),
                        labels=labels)


def rotation_loss(task: RotationTask, backbone: Backbone, head_rot: LinearHead) -> Tensor:
    emb = backbone.extract_features(Tensor(task.images))
    return ng.softmax_cross_entropy(head_rot.forward(emb), task.labels)


# ---------------------------------------------------------------------------
# patch geometry
# ---------------------------------------------------------------------------


def resize_nearest(image: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of a [c,h,w] image to [c,size,size]."""
    c, h, w = image.shape
    rows = (np.arange(size) * h // size).astype(np.int64)
    cols = (np.arange(size) * w // size).astype(np.int64)
    return np.ascontiguousarray(image[:, rows][:, :, cols])


@dataclass
class PatchGrid:
    """Nine jittered crops from a 3x3 grid over the resized image."""
    patches: np.ndarray   # [9, c, crop, crop]
    offsets: np.ndarray   # [9, 2] (row, col) of each crop inside its cell
    resized: np.ndarray   # [c, resize_to, resize_to] the image the crops came from
    cell: int
    crop: int


def extract_patches(image: np.ndarray, resize_to: int, grid: int = 3, crop: int | None = None,
                    rng: np.random.Generator | None = None, jitter: bool = True,
                    color_strength: float = 0.0) -> PatchGrid:
    """Cut an image into grid x grid jittered crops.

    The image is resized to ``resize_to``, split into ``grid`` x ``grid``
    cells, and one ``crop`` x ``crop`` window is sampled uniformly inside
    each cell (deterministic given ``rng``). ``color_strength`` > 0 applies
    per-patch brightness/contrast jitter of that magnitude.
    """
    if resize_to % grid != 0:
        raise GeometryError(f"resize_to {resize_to} not divisible by grid {grid}")
    cell = resize_to // grid
    crop = cell if crop is None else int(crop)
    if crop > cell:
        raise GeometryError(f"crop {crop} exceeds cell {cell}")
    rng = rng if rng is not None else np.random.default_rng(0)
    resized = resize_nearest(image, resize_to)
    span = cell - crop
    patches = np.empty((grid * grid, image.shape[0], crop, crop), dtype=resized.dtype)
    offsets = np.zeros((grid * grid, 2), dtype=np.int64)
    for gy in range(grid):
        for gx in range(grid):
            i = gy * grid + gx
            if jitter and span > 0:
                offsets[i] = rng.integers(0, span + 1, size=2)
            oy, ox = offsets[i]
            y0 = gy * cell + oy
            x0 = gx * cell + ox
            patch = resized[:, y0:y0 + crop, x0:x0 + crop].copy()
            if color_strength > 0:
                contrast = rng.uniform(1.0 - color_strength, 1.0 + color_strength)
                brightness = rng.uniform(-color_strength, color_strength)
                m = patch.mean()
                patch = ((patch - m) * contrast + m + brightness).astype(patch.dtype)
            patches[i] = patch
    return PatchGrid(patches=patches, offsets=offsets, resized=resized, cell=cell, crop=crop)


def stack_patch_grids(grids: list[PatchGrid]) -> np.ndarray:
    """[b*9, c, crop, crop] with image i's patch j at row i*9 + j."""
    return np.concatenate([g.patches for g in grids], axis=0)


def embed_patches(grids: list[PatchGrid], backbone: Backbone) -> Tensor:
    return backbone.extract_features(Tensor(stack_patch_grids(grids)))


# ---------------------------------------------------------------------------
# relative patch location
# ---------------------------------------------------------------------------


def location_loss_from_embeddings(patch_emb: Tensor, num_images: int,
                                  head_loc: LinearHead) -> Tensor:
    """Mean cross-entropy over the 8 (centre, neighbour) pairs per image."""
    n = 9
    centers = np.repeat(np.arange(num_images) * n + CENTER_INDEX, 8)
    neighbors = (np.arange(num_images)[:, None] * n + np.asarray(NEIGHBOR_ORDER)).reshape(-1)
    labels = np.tile(np.arange(8, dtype=np.int64), num_images)
    pairs = ng.concat([ng.gather_rows(patch_emb, centers),
                       ng.gather_rows(patch_emb, neighbors)], axis=1)
    return ng.softmax_cross_entropy(head_loc.forward(pairs), labels)


def location_loss(grids: list[PatchGrid], backbone: Backbone, head_loc: LinearHead) -> Tensor:
    return location_loss_from_embeddings(embed_patches(grids, backbone), len(grids), head_loc)


# ---------------------------------------------------------------------------
# patch classification branch (averaged patches -> cosine classifier)
# ---------------------------------------------------------------------------


def merge_patch_embeddings(patch_emb: Tensor, num_images: int) -> Tensor:
    """Average each image's 9 patch embeddings into one feature row."""
    n = 9
    avg = np.zeros((num_images, num_images * n), dtype=patch_emb.data.dtype)
    for i in range(num_images):
        avg[i, i * n:(i + 1) * n] = 1.0 / n
    return ng.matmul(Tensor(avg), patch_emb)


def patch_branch_loss_from_embeddings(patch_emb: Tensor, num_images: int,
                                      cc_patch: CosineClassifier, labels) -> Tensor:
    merged = merge_patch_embeddings(patch_emb, num_images)
    return few_shot_loss(cc_patch.probabilities(merged), labels)


def patch_branch_loss(grids: list[PatchGrid], backbone: Backbone,
                      cc_patch: CosineClassifier, labels) -> Tensor:
    return patch_branch_loss_from_embeddings(embed_patches(grids, backbone),
                                             len(grids), cc_patch, labels)


# ---------------------------------------------------------------------------
# jigsaw permutations
# ---------------------------------------------------------------------------


def hamming(p, q) -> int:
    """Number of positions at which two orderings differ."""
    return int(np.sum(np.asarray(p) != np.asarray(q)))


@dataclass
class PermutationSet:
    """Orderings of patch indices selected by greedy max-average-Hamming."""
    perms: np.ndarray   # [count, n_patches]
    seed: int

    def __len__(self):
        return self.perms.shape[0]


_PERMSET_CACHE: dict[tuple, PermutationSet] = {}


def generate_permutation_set(n_patches: int = 9, count: int = 64, seed: int = 0,
                             initial=None) -> PermutationSet:
    """Greedy max-average-Hamming selection over all n_patches! orderings.

    The first permutation is drawn uniformly (or given via ``initial``);
    each later pick maximises mean Hamming distance to everything already
    selected, breaking ties toward the lexicographically smallest candidate.
    Results are memoized: the selection is deterministic per (n, count,
    seed, initial) and the 9! scan is worth doing once per process.
    """
    key = (n_patches, count, seed, tuple(initial) if initial is not None else None)
    if key in _PERMSET_CACHE:
        return _PERMSET_CACHE[key]
    total = math.factorial(n_patches)
    if count > total:
        raise CapacityError(f"cannot select {count} distinct permutations of {n_patches} items "
                            f"(only {total} exist)")
    # lexicographic order matters: argmax returns the first (smallest) of any tie
    universe = np.array(list(iter_permutations(range(n_patches))), dtype=np.int64)
    rng = np.random.default_rng(seed)
    if initial is not None:
        first = int(np.flatnonzero((universe == np.asarray(initial)).all(axis=1))[0])
    else:
        first = int(rng.integers(0, total))
    chosen = [first]
    dist_sum = np.zeros(total, dtype=np.int64)
    dist_sum += (universe != universe[first]).sum(axis=1)
    alive = np.ones(total, dtype=bool)
    alive[first] = False
    for _ in range(count - 1):
        scores = np.where(alive, dist_sum, -1)
        pick = int(scores.argmax())
        chosen.append(pick)
        alive[pick] = False
        dist_sum += (universe != universe[pick]).sum(axis=1)
    result = PermutationSet(perms=universe[chosen], seed=seed)
    _PERMSET_CACHE[key] = result
    return result


def apply_permutation(items: np.ndarray, perm) -> np.ndarray:
    """Reorder the leading axis: output slot s holds items[perm[s]]."""
    return items[np.asarray(perm, dtype=np.int64)]


def invert_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def save_permset(path, permset: PermutationSet) -> None:
    """One line per permutation, space-separated, after a metadata header."""
    n = permset.perms.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# n={n} count={len(permset)} seed={permset.seed}\n")
        for row in permset.perms:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# jigsaw loss
# ---------------------------------------------------------------------------


def sample_permutation_ids(rng: np.random.Generator, count: int, num_images: int) -> np.ndarray:
    """One uniformly sampled permutation index per image."""
    return rng.integers(0, count, size=num_images).astype(np.int64)


def jigsaw_loss_from_embeddings(patch_emb: Tensor, num_images: int, permset: PermutationSet,
                                head_jig: LinearHead, rng: np.random.Generator,
                                all_perms: bool = False) -> Tensor:
    """Reorder each image's patch embeddings by a sampled permutation and
    predict which permutation was used (all 64 per image in ``all_perms``
    mode, matching the literal sum)."""
    n = 9
    d = patch_emb.data.shape[1]
    count = len(permset)
    if all_perms:
        perm_ids = np.tile(np.arange(count, dtype=np.int64), num_images)
        image_ids = np.repeat(np.arange(num_images), count)
    else:
        perm_ids = sample_permutation_ids(rng, count, num_images)
        image_ids = np.arange(num_images)
    if perm_ids.size and (perm_ids.min() < 0 or perm_ids.max() >= count):
        raise IndexError(f"permutation index out of range [0, {count})")
    rows = (image_ids[:, None] * n + permset.perms[perm_ids]).reshape(-1)
    arranged = ng.reshape(ng.gather_rows(patch_emb, rows), (len(image_ids), n * d))
    return ng.softmax_cross_entropy(head_jig.forward(arranged), perm_ids)


def jigsaw_loss(grids: list[PatchGrid], permset: PermutationSet, backbone: Backbone,
                head_jig: LinearHead, rng: np.random.Generator,
                all_perms: bool = False) -> Tensor:
    return jigsaw_loss_from_embeddings(embed_patches(grids, backbone), len(grids),
                                       permset, head_jig, rng, all_perms=all_perms)
