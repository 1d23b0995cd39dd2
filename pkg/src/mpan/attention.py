"""Learnable combination of the six loss branches.

Each pretext loss carries a weight lambda = sigmoid(sigma) + 1, strictly
inside (1, 2) for finite sigma, with sigma a learnable scalar. The
supervised weights alpha and beta stay fixed at 1. The SUM ablation pins
every lambda to 1 and removes sigma from optimization; manual mode uses
fixed user-supplied weights.
"""

from __future__ import annotations

import numpy as np

from . import ndgrad as ng
from .errors import ConfigError, NonFiniteLossError
from .ndgrad import Tensor

PRETEXT_NAMES = ("rot", "loc", "jig", "clu")
MODES = ("attention", "sum", "manual")


def pretext_weight(sigma: Tensor) -> Tensor:
    """lambda = sigmoid(sigma) + 1, differentiable in sigma."""
    return ng.add(ng.sigmoid(sigma), 1.0)


class PretextWeights:
    """Four learnable sigmas (rot, loc, jig, clu) plus the fixed alpha/beta."""

    def __init__(self, mode: str = "attention", manual: dict[str, float] | None = None,
                 sigma_init: float = 0.0):
        if mode not in MODES:
            raise ConfigError(f"attention mode must be one of {MODES}, got {mode!r}")
        if mode == "manual" and (manual is None or set(manual) != set(PRETEXT_NAMES)):
            raise ConfigError(f"manual mode needs weights for all of {PRETEXT_NAMES}")
        self.mode = mode
        self.manual = dict(manual) if manual else None
        self.alpha = 1.0
        self.beta = 1.0
        self.sigma = {name: Tensor(np.asarray(sigma_init, dtype=np.float32), requires_grad=True)
                      for name in PRETEXT_NAMES}

    def weight_for(self, name: str):
        """The multiplier applied to one pretext loss: a graph tensor in
        attention mode, a plain float otherwise."""
        if self.mode == "attention":
            return pretext_weight(self.sigma[name])
        if self.mode == "sum":
            return 1.0
        return float(self.manual[name])

    def lambda_values(self) -> dict[str, float]:
        """Current effective weights, for the metrics stream."""
        out = {}
        for name in PRETEXT_NAMES:
            w = self.weight_for(name)
            out[name] = w.item() if isinstance(w, Tensor) else float(w)
        return out

    def parameters(self) -> list[Tensor]:
        if self.mode == "attention":
            return [self.sigma[name] for name in PRETEXT_NAMES]
        return []

    def sigma_vector(self) -> np.ndarray:
        return np.array([self.sigma[n].data for n in PRETEXT_NAMES], dtype=np.float32)

    def load_sigma_vector(self, values: np.ndarray) -> None:
        for name, v in zip(PRETEXT_NAMES, np.asarray(values).reshape(-1)):
            self.sigma[name].data = np.asarray(v, dtype=np.float32)


def disable_attention(weights: PretextWeights) -> PretextWeights:
    """The SUM ablation: lambdas pinned to 1, sigmas out of the optimizer."""
    out = PretextWeights(mode="sum")
    out.sigma = weights.sigma  # shared so a later re-enable sees the same state
    return out


def _check_finite(name: str, loss: Tensor) -> None:
    if not np.all(np.isfinite(loss.data)):
        ng.ANOMALIES["nonfinite_loss"] += 1
        raise NonFiniteLossError(f"loss component '{name}' is not finite")


def total_loss(l_few, l_pat, l_rot, l_loc, l_jig, l_clu,
               weights: PretextWeights) -> Tensor:
    """alpha*L_few + beta*L_pat + sum_i lambda_i * L_i.

    Components may be None (disabled branch contributes nothing). In
    attention mode the gradient flows both into each component loss and
    into its sigma.
    """
    total = None

    def acc(term):
        nonlocal total
        total = term if total is None else ng.add(total, term)

    if l_few is not None:
        _check_finite("few", l_few)
        acc(ng.mul(l_few, weights.alpha))
    if l_pat is not None:
        _check_finite("pat", l_pat)
        acc(ng.mul(l_pat, weights.beta))
    for name, loss in zip(PRETEXT_NAMES, (l_rot, l_loc, l_jig, l_clu)):
        if loss is None:
            continue
        _check_finite(name, loss)
        w = weights.weight_for(name)
        acc(ng.mul(loss, w) if isinstance(w, Tensor) else ng.mul(loss, float(w)))
    if total is None:
        raise ConfigError("total_loss needs at least one enabled component")
    return total
