"""Training objectives for both generators and both discriminators.

Discriminator outputs cross module boundaries as logits; probabilities are
only ever formed implicitly through ``softplus``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ArgumentError, DimensionError, NumericError

STAGES = ("H2L", "L2H")


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 1e-2
    alpha2: float = 1.0
    alpha3: float = 5e-3
    alpha4: float = 1e-2
    alpha5: float = 1.0
    alpha6: float = 5e-3

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not (v >= 0 and math.isfinite(v)):
                raise ArgumentError(f"{name} must be finite and >= 0, got {v}")

    def for_stage(self, stage: str) -> tuple[float, float, float]:
        """(pixel, feature, gan) weights."""
        if stage == "H2L":
            return self.alpha1, self.alpha2, self.alpha3
        if stage == "L2H":
            return self.alpha4, self.alpha5, self.alpha6
        raise ArgumentError(f"unknown stage {stage!r}")

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(**{n: v * k for n, v in asdict(self).items()})


@dataclass(frozen=True)
class LossReport:
    pixel: float
    feature: float
    adversarial: float
    total: float
    stage: str
    discriminator: float | None = None

    def check_finite(self, iteration: int | None = None):
        for name in ("pixel", "feature", "adversarial", "total", "discriminator"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise NumericError(f"non-finite {self.stage} {name} loss", iteration=iteration)
        return self

    def record(self, iteration: int, lr: float | None = None) -> dict:
        rec = {"iter": iteration, "stage": self.stage}
        if lr is not None:
            rec["lr"] = lr
        rec.update(pixel=self.pixel, feature=self.feature, gan=self.adversarial, total=self.total)
        if self.discriminator is not None:
            rec["d_loss"] = self.discriminator
        return rec

    def to_line(self, iteration: int, lr: float | None = None) -> str:
        return json.dumps(self.record(iteration, lr))


def _same_shape(pred: Tensor, target: Tensor):
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")


def pixel_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared difference over every element."""
    _same_shape(pred, target)
    return torch.mean((pred - target) ** 2)


def feature_loss(pred: Tensor, target: Tensor, fx) -> Tensor:
    """Mean absolute difference of fixed-network features."""
    _same_shape(pred, target)
    return torch.mean(torch.abs(fx(pred) - fx(target)))


def _check_batch(logits: Tensor, what: str):
    if logits.numel() == 0:
        raise ArgumentError(f"empty {what} batch")


def generator_gan_loss(d_logits: Tensor) -> Tensor:
    """mean(-log sigmoid(logit)), i.e. mean softplus(-logit)."""
    _check_batch(d_logits, "generator")
    return torch.mean(F.softplus(-d_logits))


def discriminator_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    # -log(1 - sigmoid(x)) = softplus(x)
    _check_batch(real_logits, "real")
    _check_batch(fake_logits, "fake")
    return torch.mean(F.softplus(-real_logits)) + torch.mean(F.softplus(fake_logits))


def combine(pixel, feature, adversarial, weights: LossWeights, stage: str,
            discriminator=None) -> LossReport:
    wp, wf, wg = weights.for_stage(stage)
    pixel, feature, adversarial = (float(torch.as_tensor(v).detach()) for v in (pixel, feature, adversarial))
    total = wp * pixel + wf * feature + wg * adversarial
    d = None if discriminator is None else float(torch.as_tensor(discriminator).detach())
    return LossReport(pixel, feature, adversarial, total, stage, d)


def weighted_total(pixel: Tensor, feature: Tensor, adversarial: Tensor,
                   weights: LossWeights, stage: str) -> Tensor:
    """Differentiable counterpart of :func:`combine`."""
    wp, wf, wg = weights.for_stage(stage)
    return wp * pixel + wf * feature + wg * adversarial
