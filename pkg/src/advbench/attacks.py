"""Gradient-sign evasion attacks under an l-infinity budget.

The fast gradient sign method takes one signed step of size epsilon;
projected gradient descent iterates smaller steps and projects back onto
the epsilon-ball around the clean input after each one. Perturbation
bookkeeping runs in float64 (model evaluations cast down to the model's
precision) so the certified bound max|adv - clean| <= eps + 1e-12 holds;
projection clamps to precomputed per-pixel bounds, which also makes it
exactly idempotent.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, backward
from .ops import softmax_cross_entropy

__all__ = ["AttackConfig", "AdversarialBatch", "input_gradient", "project_linf", "fgsm", "pgd"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    epsilon: float
    alpha: float = 0.01
    iterations: int = 0
    clip_min: float = 0.0
    clip_max: float = 1.0
    random_start: bool = False

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError(f"attack.kind must be 'fgsm' or 'pgd', got {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError(f"attack.epsilon must be non-negative, got {self.epsilon}")
        if self.clip_min >= self.clip_max:
            raise ValueError(
                f"attack clip range is empty: [{self.clip_min}, {self.clip_max}]"
            )
        if self.kind == "pgd":
            if self.alpha <= 0:
                raise ValueError(f"attack.alpha must be positive, got {self.alpha}")
            if self.iterations < 0:
                raise ValueError(f"attack.iterations must be non-negative, got {self.iterations}")
            if self.alpha > self.epsilon > 0:
                log.warning(
                    "pgd step size alpha=%g exceeds epsilon=%g; single steps leave the ball",
                    self.alpha, self.epsilon,
                )


@dataclass
class AdversarialBatch:
    """Clean inputs and their perturbed counterparts, bound-checked on
    construction."""

    originals: np.ndarray
    adversarials: np.ndarray
    true_labels: np.ndarray
    source_model_id: str
    config: AttackConfig

    def __post_init__(self):
        if self.originals.shape != self.adversarials.shape:
            raise ValueError(
                f"originals {self.originals.shape} and adversarials "
                f"{self.adversarials.shape} disagree"
            )
        gap = float(np.max(np.abs(self.adversarials.astype(np.float64)
                                  - self.originals.astype(np.float64)), initial=0.0))
        if gap > self.config.epsilon + 1e-12:
            raise ValueError(
                f"l-infinity bound violated: |delta| reaches {gap}, budget {self.config.epsilon}"
            )
        lo, hi = self.config.clip_min, self.config.clip_max
        if self.adversarials.size and (
            float(self.adversarials.min()) < lo or float(self.adversarials.max()) > hi
        ):
            raise ValueError(
                f"adversarials leave the value range [{lo}, {hi}]: "
                f"[{self.adversarials.min()}, {self.adversarials.max()}]"
            )

    def __len__(self) -> int:
        return self.originals.shape[0]


@contextlib.contextmanager
def _frozen(model):
    """Switch off parameter gradients so attack backward passes only pay
    for the input gradient."""
    params = list(model.parameters())
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag


def input_gradient(model, x, y) -> np.ndarray:
    """Gradient of the mean cross-entropy loss with respect to the input
    batch. The model must be in eval mode; its parameters and buffers are
    left untouched."""
    if getattr(model, "training", False):
        raise ValueError("input_gradient needs the model in eval mode; call model.eval() first")
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    probe = Tensor(data.copy(), requires_grad=True)
    with _frozen(model):
        with Tape() as tape:
            loss = softmax_cross_entropy(model(probe), y)
        backward(loss)
    grad = probe.grad
    tape.records.clear()
    return grad


def project_linf(candidate: np.ndarray, origin: np.ndarray, epsilon: float,
                 clip: tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    """Project onto the l-infinity ball of radius epsilon around origin,
    intersected with the value range."""
    candidate = np.asarray(candidate)
    origin = np.asarray(origin)
    if candidate.shape != origin.shape:
        raise ValueError(f"candidate {candidate.shape} and origin {origin.shape} disagree")
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    lo = np.maximum(origin - epsilon, clip[0])
    hi = np.minimum(origin + epsilon, clip[1])
    return np.minimum(np.maximum(candidate, lo), hi)


def _signed_step(model, current64: np.ndarray, origin64: np.ndarray, y,
                 step: float, epsilon: float, clip, model_dtype) -> np.ndarray:
    grad = input_gradient(model, current64.astype(model_dtype), y)
    return project_linf(current64 + step * np.sign(grad, dtype=np.float64),
                        origin64, epsilon, clip)


def fgsm(model, x, y, epsilon: float, clip: tuple[float, float] = (0.0, 1.0),
         source_model_id: str = "") -> AdversarialBatch:
    """x_adv = clamp(x + epsilon * sign(grad_x loss))."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    origin = data.astype(np.float64)
    if epsilon == 0:
        adv = origin.copy()
    else:
        adv = _signed_step(model, origin, origin, y, epsilon, epsilon, clip, data.dtype)
    cfg = AttackConfig(kind="fgsm", epsilon=epsilon, clip_min=clip[0], clip_max=clip[1])
    return AdversarialBatch(origin, adv, np.asarray(y), source_model_id, cfg)


def pgd(model, x, y, config: AttackConfig, source_model_id: str = "",
        rng: np.random.Generator | None = None) -> AdversarialBatch:
    """Iterated signed steps of size alpha, each projected back onto the
    epsilon-ball; zero iterations returns the input unchanged."""
    if config.kind != "pgd":
        raise ValueError(f"pgd needs an attack config of kind 'pgd', got {config.kind!r}")
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    origin = data.astype(np.float64)
    clip = (config.clip_min, config.clip_max)
    current = origin.copy()
    if config.random_start and config.epsilon > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        current = project_linf(
            current + rng.uniform(-config.epsilon, config.epsilon, current.shape),
            origin, config.epsilon, clip,
        )
    for _ in range(config.iterations):
        current = _signed_step(model, current, origin, y, config.alpha,
                               config.epsilon, clip, data.dtype)
    return AdversarialBatch(origin, current, np.asarray(y), source_model_id, config)
