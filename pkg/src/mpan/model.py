"""Shared feature extractor and the classifier heads that ride on it.

One backbone instance is shared (siamese-style) by the few-shot branch, the
patch branch, and every pretext classifier: all of them call
``extract_features`` on the same parameter set, so a gradient step taken
through any branch moves the embeddings seen by all of them.
"""

from __future__ import annotations

import numpy as np

from . import ndgrad as ng
from .errors import DimensionError
from .ndgrad import Tensor


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Fan-based uniform init U(-b, b) with b = sqrt(6 / fan_in) (relu gain)."""
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Backbone:
    """Small convnet: ``depth`` blocks of 3x3 conv -> relu -> 2x2 max pool,
    finished by global average pooling, so the embedding width equals the
    last conv width regardless of input size (full images and patches share
    the same weights).

    Pooling is skipped once a spatial side drops below 2, which lets small
    jittered patches flow through the same stack as full images.
    """

    def __init__(self, in_channels: int = 1, widths=(16, 32, 64, 64),
                 rng: np.random.Generator | None = None, image_size: int = 32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.image_size = image_size
        self.kernels: list[Tensor] = []
        self.biases: list[Tensor] = []
        cin = in_channels
        for cout in self.widths:
            k = kaiming_uniform(rng, (cout, cin, 3, 3), fan_in=cin * 9)
            self.kernels.append(Tensor(k, requires_grad=True))
            self.biases.append(Tensor(np.zeros((1, cout, 1, 1), dtype=np.float32), requires_grad=True))
            cin = cout

    @property
    def embedding_dim(self) -> int:
        return self.widths[-1]

    def extract_features(self, images: Tensor) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.data.ndim != 4:
            raise DimensionError(
                f"expected images of shape [batch, {self.in_channels}, s, s], got {x.data.shape}")
        b, c, h, w = x.data.shape
        if c != self.in_channels or h != w:
            raise DimensionError(
                f"expected square {self.in_channels}-channel images "
                f"(configured size {self.image_size}), got {x.data.shape}")
        for k, bias in zip(self.kernels, self.biases):
            x = ng.conv2d(x, k, stride=1, padding=1)
            x = ng.add(x, bias)
            x = ng.relu(x)
            if min(x.data.shape[2], x.data.shape[3]) >= 2:
                x = ng.max_pool2d(x, 2)
        return ng.global_avg_pool(x)

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.kernels, self.biases) for t in pair]

    def named_parameters(self, prefix: str = "backbone") -> dict[str, Tensor]:
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"{prefix}.block{i}.kernel"] = k
            out[f"{prefix}.block{i}.bias"] = b
        return out


class CosineClassifier:
    """Scores a feature against per-class weight vectors by cosine similarity,
    scaled by a learnable inverse temperature gamma before the softmax.
    """

    def __init__(self, num_classes: int, dim: int, rng: np.random.Generator | None = None,
                 gamma_init: float = 10.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_classes = num_classes
        self.dim = dim
        self.weight = Tensor(kaiming_uniform(rng, (num_classes, dim), fan_in=dim),
                             requires_grad=True)
        self.gamma = Tensor(np.asarray(gamma_init, dtype=np.float32), requires_grad=True)

    def logits(self, features: Tensor) -> Tensor:
        """gamma * cos(feature, w_c) for every class c; rows lie in [-gamma, gamma]."""
        f = features if isinstance(features, Tensor) else Tensor(features)
        if f.data.ndim != 2 or f.data.shape[1] != self.dim:
            raise DimensionError(
                f"expected features of shape [batch, {self.dim}], got {f.data.shape}")
        fn = ng.l2_normalize_rows(f)
        wn = ng.l2_normalize_rows(self.weight)
        return ng.mul(ng.matmul(fn, ng.transpose(wn)), self.gamma)

    def probabilities(self, features: Tensor) -> Tensor:
        return ng.softmax(self.logits(features))

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.gamma]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.gamma": self.gamma}


def cosine_scores(features: Tensor, classifier: CosineClassifier) -> Tensor:
    """Per-sample class probabilities: softmax over gamma-scaled cosine scores."""
    return classifier.probabilities(features)


def few_shot_loss(probabilities: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class."""
    return ng.nll_from_probs(probabilities, labels)


class LinearHead:
    """Single affine layer used by the pretext classifiers."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(kaiming_uniform(rng, (in_dim, out_dim), fan_in=in_dim),
                             requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_dim), dtype=np.float32), requires_grad=True)

    def forward(self, features: Tensor) -> Tensor:
        f = features if isinstance(features, Tensor) else Tensor(features)
        if f.data.ndim != 2 or f.data.shape[1] != self.in_dim:
            raise DimensionError(
                f"expected features of shape [batch, {self.in_dim}], got {f.data.shape}")
        return ng.add(ng.matmul(f, self.weight), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


def head_forward(features: Tensor, head: LinearHead) -> Tensor:
    return head.forward(features)
