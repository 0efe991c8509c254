"""
Step 3 along the pipeline.
The unsupervised objective, summed over stages:

    L = sum_s [ MSE(F_s, M(phi)_s) + lambda * (alpha * L_range(phi_s) + beta * L_smooth(phi_s)) ]
"""

from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence

import torch

from warp import check_field, spatial_gradient


@dataclass
class LossWeights:
    """lambda scales the regularizer; alpha and beta weight its range and smoothness terms."""

    lam: float = 1e3
    alpha: float = 10.0
    beta: float = 1e2

    def __post_init__(self):
        if min(self.lam, self.alpha, self.beta) < 0:
            raise ValueError(f"Loss weights must be >= 0, got {self}")


@dataclass
class StageLoss:
    similarity: float = 0.0
    range: float = 0.0
    smooth: float = 0.0
    active: bool = True

    def weighted(self, weights: LossWeights) -> float:
        return self.similarity + weights.lam * (weights.alpha * self.range + weights.beta * self.smooth)


@dataclass
class LossReport:
    """Per-stage decomposition plus the differentiable objective."""

    stages: List[StageLoss]
    weights: LossWeights
    objective: torch.Tensor
    total: float = field(init=False)

    def __post_init__(self):
        self.total = sum(stage.weighted(self.weights) for stage in self.stages)

    def as_record(self, step: Optional[int] = None) -> Dict[str, float]:
        record = {} if step is None else {"step": step}
        record["total"] = self.total
        for s, stage in enumerate(self.stages):
            record[f"s{s}.sim"] = stage.similarity
            record[f"s{s}.range"] = stage.range
            record[f"s{s}.smooth"] = stage.smooth
        return record

    def format_line(self, step: Optional[int] = None) -> str:
        return " ".join(
            f"{key}={value}" if key == "step" else f"{key}={value:.6g}"
            for key, value in self.as_record(step).items()
        )

    @classmethod
    def mean(cls, reports: Sequence["LossReport"]) -> "LossReport":
        """Average several reports with the same stage layout (gradient accumulation)."""
        n = len(reports)
        stages = []
        for parts in zip(*(r.stages for r in reports)):
            stages.append(StageLoss(
                similarity=sum(p.similarity for p in parts) / n,
                range=sum(p.range for p in parts) / n,
                smooth=sum(p.smooth for p in parts) / n,
                active=parts[0].active,
            ))
        objective = torch.stack([r.objective.detach() for r in reports]).mean()
        return cls(stages, reports[0].weights, objective)


def similarity_mse(fixed: torch.Tensor, warped: torch.Tensor) -> torch.Tensor:
    """Mean over all voxels of (M(phi) - F)^2."""
    if fixed.shape != warped.shape:
        raise ValueError(f"similarity_mse shapes differ: {tuple(fixed.shape)} vs {tuple(warped.shape)}")
    return torch.mean((warped - fixed) ** 2)


def range_loss(phi: torch.Tensor) -> torch.Tensor:
    """Mean absolute displacement over all voxels and channels."""
    check_field(phi)
    return torch.mean(torch.abs(phi))


def smooth_loss(phi: torch.Tensor, norm: Literal["l1", "l2"] = "l1") -> torch.Tensor:
    """
    Mean over all 9 forward-difference components of |grad phi| ("l1")
    or of its square ("l2").
    """
    grad = spatial_gradient(phi)
    if norm == "l1":
        return torch.mean(torch.abs(grad))
    if norm == "l2":
        return torch.mean(grad**2)
    raise ValueError(f"Unknown smoothness norm {norm!r}")


def total_loss(
    fixed_pyramid: Sequence[torch.Tensor],
    warped: Sequence[torch.Tensor],
    fields: Sequence[torch.Tensor],
    weights: LossWeights,
    active_stages: Optional[Sequence[int]] = None,
    smooth_norm: Literal["l1", "l2"] = "l1",
) -> LossReport:
    """
    Sum the stage losses.

    Args:
        fixed_pyramid: Fixed image per stage, at that stage's resolution
        warped: Stage-warped moving image per stage
        fields: Field per stage
        weights: lambda, alpha, beta
        active_stages: Indices of stages that contribute; None means all. Inactive stages
            report zeros and are not evaluated at all
        smooth_norm: "l1" or "l2"

    Returns:
        LossReport
    """
    if not (len(fixed_pyramid) == len(warped) == len(fields)):
        raise ValueError(
            f"Stage lists are misaligned: {len(fixed_pyramid)} fixed, {len(warped)} warped, {len(fields)} fields"
        )
    if not fields:
        raise ValueError("total_loss needs at least one stage")

    active = set(range(len(fields))) if active_stages is None else set(active_stages)
    stages = []
    objective = fields[0].new_zeros(())
    for s, (f, w, phi) in enumerate(zip(fixed_pyramid, warped, fields)):
        if s not in active:
            stages.append(StageLoss(active=False))
            continue

        sim = similarity_mse(f, w)
        rng = range_loss(phi)
        smooth = smooth_loss(phi, smooth_norm)
        objective = objective + sim + weights.lam * (weights.alpha * rng + weights.beta * smooth)
        stages.append(StageLoss(sim.item(), rng.item(), smooth.item()))

    return LossReport(stages, weights, objective)
