"""
Step 2 along the pipeline.
The coarse-to-fine registration network.

Paths:
1. Feature extraction: stride-2 conv units on the concatenated (F, M) pair
2. Pooling: average-pooled image pyramids of F and M
3. Rigid block: R and t from the coarsest features, applied to the coarse field
4. Refine path: one refine block per resolution, coarse to fine
5. Fusion: all stage fields and features upsampled and merged at full resolution
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from warp import RigidTransform, apply_rigid_to_field, grid_sample, upsample_field

logger = logging.getLogger(__name__)

NUM_LEVELS = 4


@dataclass
class NetworkConfig:
    """Architecture settings; `in_shape` fixes the length of the rigid-block flatten."""

    channels: Tuple[int, ...] = (8, 16, 32, 64)
    in_shape: Tuple[int, int, int] = (128, 128, 128)
    leaky_slope: float = 0.01
    norm_epsilon: float = 1e-5
    rigid_channels: Tuple[int, int] = (64, 16)
    fc_widths: Tuple[int, ...] = (256, 64)
    fusion_widths: Tuple[int, ...] = (64, 32, 8)
    zero_init_heads: bool = True
    use_refine_core: bool = True
    use_rigid: bool = True
    final_fusion: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.in_shape = tuple(int(n) for n in self.in_shape)
        self.rigid_channels = tuple(int(c) for c in self.rigid_channels)
        self.fc_widths = tuple(int(c) for c in self.fc_widths)
        self.fusion_widths = tuple(int(c) for c in self.fusion_widths)
        if len(self.channels) != NUM_LEVELS:
            raise ValueError(f"channels needs {NUM_LEVELS} entries, got {self.channels}")
        if len(self.in_shape) != 3 or any(n < 16 or n % 16 for n in self.in_shape):
            raise ValueError(f"in_shape dims must be divisible by 16, got {self.in_shape}")

    @property
    def flat_length(self) -> int:
        """Length of the rigid-block vector: (D * H * W) / 16^3."""
        return math.prod(self.in_shape) // 16**3

    def level_shape(self, level: int) -> Tuple[int, int, int]:
        return tuple(n // 2**level for n in self.in_shape)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class StageOutputs:
    """
    Everything produced along the refine path.

    `pooled_fixed[i]` / `pooled_moving[i]` hold the pyramid at in_shape / 2^i (level 0 is
    the input). `fields` runs coarse to fine: the four refine stages (1/16 .. 1/2) and
    then the final full-resolution field. `warped_per_stage[s]` is the pooled moving
    image of stage s warped by `fields[s]`.
    """

    features: List[torch.Tensor]
    pooled_fixed: List[torch.Tensor]
    pooled_moving: List[torch.Tensor]
    coarse_field: torch.Tensor
    rigid: RigidTransform
    fields: List[torch.Tensor]
    warped_per_stage: List[torch.Tensor]
    refine_features: List[torch.Tensor] = field(default_factory=list)

    @property
    def final_field(self) -> torch.Tensor:
        return self.fields[-1]

    @property
    def warped(self) -> torch.Tensor:
        return self.warped_per_stage[-1]

    @property
    def stage_fixed(self) -> List[torch.Tensor]:
        """Fixed images aligned with `fields`, coarse to fine."""
        return [self.pooled_fixed[level] for level in range(NUM_LEVELS, -1, -1)]


class BatchStatNorm3d(nn.Module):
    """
    Normalization with the statistics of the current batch, in training and eval alike.
    A single-voxel map normalizes to zero and returns the bias.
    """

    def __init__(self, num_features: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        var, mean = torch.var_mean(x, dim=(0, 2, 3, 4), correction=0, keepdim=True)
        x_hat = (x - mean) / torch.sqrt(var + self.eps)
        return x_hat * self.weight.view(1, -1, 1, 1, 1) + self.bias.view(1, -1, 1, 1, 1)


class ConvUnit(nn.Sequential):
    """3x3x3 convolution, Leaky ReLU, then normalization."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, slope: float = 0.01, eps: float = 1e-5):
        super().__init__(
            nn.Conv3d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1),
            nn.LeakyReLU(slope),
            BatchStatNorm3d(out_channels, eps),
        )


def field_head(in_channels: int, zero_init: bool) -> nn.Conv3d:
    conv = nn.Conv3d(in_channels, 3, kernel_size=3, padding=1)
    if zero_init:
        nn.init.zeros_(conv.weight)
        nn.init.zeros_(conv.bias)
    return conv


def fc_branch(in_features: int, widths: Sequence[int], out_features: int, slope: float) -> nn.Sequential:
    layers = []
    for width in widths:
        layers += [nn.Linear(in_features, width), nn.LeakyReLU(slope)]
        in_features = width
    layers.append(nn.Linear(in_features, out_features))
    return nn.Sequential(*layers)


class FeaturePath(nn.Module):
    """One stride-2 conv unit per halving: 1/2, 1/4, 1/8, 1/16."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        widths = (2,) + config.channels
        self.levels = nn.ModuleList(
            ConvUnit(widths[i], widths[i + 1], stride=2, slope=config.leaky_slope, eps=config.norm_epsilon)
            for i in range(NUM_LEVELS)
        )

    def forward(self, fixed: torch.Tensor, moving: torch.Tensor) -> List[torch.Tensor]:
        x = torch.cat((fixed, moving), dim=1)
        features = []
        for level in self.levels:
            x = level(x)
            features.append(x)
        return features


def pooling_path(v: torch.Tensor) -> List[torch.Tensor]:
    """Four successive 2x average poolings (1/2 .. 1/16)."""
    if any(n % 16 for n in v.shape[2:]):
        raise ValueError(f"pooling_path needs dims divisible by 16, got {tuple(v.shape[2:])}")
    pyramid = []
    for _ in range(NUM_LEVELS):
        v = F.avg_pool3d(v, kernel_size=2)
        pyramid.append(v)
    return pyramid


class RigidBlock(nn.Module):
    """
    Two conv units (64, 16 channels), a max over channels, a flatten of length
    (D*H*W)/16^3 and two fully connected branches for R (9 values) and t (3 values).
    The last layers start at R = I, t = 0.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        c_mid, c_out = config.rigid_channels
        self.in_channels = config.channels[-1]
        self.flat_length = config.flat_length
        self.convs = nn.Sequential(
            ConvUnit(self.in_channels, c_mid, slope=config.leaky_slope, eps=config.norm_epsilon),
            ConvUnit(c_mid, c_out, slope=config.leaky_slope, eps=config.norm_epsilon),
        )
        self.rotation = fc_branch(self.flat_length, config.fc_widths, 9, config.leaky_slope)
        self.translation = fc_branch(self.flat_length, config.fc_widths, 3, config.leaky_slope)

        with torch.no_grad():
            nn.init.zeros_(self.rotation[-1].weight)
            self.rotation[-1].bias.copy_(torch.eye(3).flatten())
            nn.init.zeros_(self.translation[-1].weight)
            nn.init.zeros_(self.translation[-1].bias)

    def flatten(self, feature: torch.Tensor) -> torch.Tensor:
        if feature.dim() != 5 or feature.shape[1] != self.in_channels:
            raise ValueError(
                f"Rigid block expects {self.in_channels} channels, got shape {tuple(feature.shape)}"
            )
        x = self.convs(feature).amax(dim=1)
        x = x.flatten(start_dim=1)
        if x.shape[1] != self.flat_length:
            raise ValueError(f"Rigid block flatten length {x.shape[1]} differs from {self.flat_length}")
        return x

    def forward(self, feature: torch.Tensor) -> RigidTransform:
        x = self.flatten(feature)
        R = self.rotation(x).view(-1, 3, 3)
        t = self.translation(x)
        return RigidTransform(R, t)


@dataclass
class RefineResult:
    field: torch.Tensor
    feature: torch.Tensor
    upsampled: torch.Tensor
    warped: torch.Tensor
    difference: Optional[torch.Tensor]


class RefineBlock(nn.Module):
    """
    Refine one resolution:
        phi~ = upsample(phi_prev); M(phi)_i = sample(M_i, phi~); D_i = M(phi)_i - F_i
        phi_i = phi~ + conv(cat(Feature_i, D_i, F_i, M(phi)_i, phi~))
    Without the refine core the conv sees Feature_i alone.
    """

    def __init__(self, feature_channels: int, config: NetworkConfig):
        super().__init__()
        self.feature_channels = feature_channels
        self.use_refine_core = config.use_refine_core
        in_channels = feature_channels + 1 + 1 + 1 + 3 if self.use_refine_core else feature_channels
        self.conv = ConvUnit(in_channels, feature_channels, slope=config.leaky_slope, eps=config.norm_epsilon)
        self.head = field_head(feature_channels, config.zero_init_heads)

    @property
    def in_channels(self) -> int:
        return self.conv[0].in_channels

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor, feature: torch.Tensor, phi_prev: torch.Tensor) -> RefineResult:
        shape = fixed.shape[2:]
        if moving.shape[2:] != shape or feature.shape[2:] != shape:
            raise ValueError(
                f"Refine inputs disagree: moving {tuple(moving.shape[2:])}, fixed {tuple(shape)}, "
                f"feature {tuple(feature.shape[2:])}"
            )
        if feature.shape[1] != self.feature_channels:
            raise ValueError(f"Refine block expects {self.feature_channels} feature channels, got {feature.shape[1]}")

        upsampled = upsample_field(phi_prev, shape)
        warped = grid_sample(moving, upsampled)
        difference = None
        if self.use_refine_core:
            difference = warped - fixed
            x = torch.cat((feature, difference, fixed, warped, upsampled), dim=1)
        else:
            x = feature

        hidden = self.conv(x)
        return RefineResult(upsampled + self.head(hidden), hidden, upsampled, warped, difference)


def upsample_features(x: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    if tuple(x.shape[2:]) == tuple(shape):
        return x
    return F.interpolate(x, size=tuple(shape), mode="trilinear", align_corners=True)


class FusionHead(nn.Module):
    """
    Multi-scale fusion at full resolution: every stage field and post-refine
    feature is upsampled, concatenated and passed through conv units 64/32/8 and a
    final 3-channel convolution, added onto the finest stage field.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.in_channels = sum(config.channels) + 3 * NUM_LEVELS
        widths = (self.in_channels,) + config.fusion_widths
        self.units = nn.Sequential(*(
            ConvUnit(widths[i], widths[i + 1], slope=config.leaky_slope, eps=config.norm_epsilon)
            for i in range(len(config.fusion_widths))
        ))
        self.head = field_head(widths[-1], config.zero_init_heads)

    def forward(self, fields: Sequence[torch.Tensor], features: Sequence[torch.Tensor], shape: Sequence[int]) -> torch.Tensor:
        up_fields = [upsample_field(phi, shape) for phi in fields]
        up_features = [upsample_features(f, shape) for f in features]
        x = torch.cat(up_fields + up_features, dim=1)
        return up_fields[-1] + self.head(self.units(x))


class RegistrationNet(nn.Module):
    """The full registration model: g(F, M) -> fields per stage and the final field."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.feature_path = FeaturePath(config)

        c3 = config.channels[-1]
        self.coarse_head = nn.Sequential(
            ConvUnit(c3, c3, slope=config.leaky_slope, eps=config.norm_epsilon),
            field_head(c3, config.zero_init_heads),
        )
        self.rigid = RigidBlock(config) if config.use_rigid else None

        # coarsest first: level 4 (1/16) .. level 1 (1/2)
        self.refine = nn.ModuleList(
            RefineBlock(config.channels[level - 1], config) for level in range(NUM_LEVELS, 0, -1)
        )
        self.fusion = FusionHead(config) if config.final_fusion else None

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        groups = {
            "feature_path": list(self.feature_path.parameters()),
            "coarse_head": list(self.coarse_head.parameters()),
        }
        if self.rigid is not None:
            groups["rigid"] = list(self.rigid.parameters())
        for k, block in enumerate(self.refine):
            groups[f"refine.{k}"] = list(block.parameters())
        if self.fusion is not None:
            groups["fusion"] = list(self.fusion.parameters())
        return groups

    def check_inputs(self, fixed: torch.Tensor, moving: torch.Tensor) -> None:
        if fixed.shape != moving.shape:
            raise ValueError(f"Fixed {tuple(fixed.shape)} and moving {tuple(moving.shape)} differ in shape")
        if fixed.dim() != 5 or fixed.shape[1] != 1:
            raise ValueError(f"Inputs need shape (B, 1, D, H, W), got {tuple(fixed.shape)}")
        if tuple(fixed.shape[2:]) != self.config.in_shape:
            raise ValueError(f"Input shape {tuple(fixed.shape[2:])} differs from in_shape {self.config.in_shape}")

    def forward(self, fixed: torch.Tensor, moving: torch.Tensor) -> StageOutputs:
        self.check_inputs(fixed, moving)
        features = self.feature_path(fixed, moving)
        pooled_fixed = [fixed] + pooling_path(fixed)
        pooled_moving = [moving] + pooling_path(moving)

        coarse = self.coarse_head(features[-1])
        if self.rigid is not None:
            rigid = self.rigid(features[-1])
            phi = apply_rigid_to_field(coarse, rigid)
        else:
            rigid = RigidTransform.identity(fixed.shape[0], dtype=coarse.dtype, device=coarse.device)
            phi = coarse

        fields, refine_features, warped_per_stage = [], [], []
        for block, level in zip(self.refine, range(NUM_LEVELS, 0, -1)):
            result = block(pooled_moving[level], pooled_fixed[level], features[level - 1], phi)
            phi = result.field
            fields.append(phi)
            refine_features.append(result.feature)
            warped_per_stage.append(grid_sample(pooled_moving[level], phi))

        shape = self.config.in_shape
        if self.fusion is not None:
            final = self.fusion(fields, refine_features, shape)
        else:
            final = upsample_field(fields[-1], shape)
        fields.append(final)
        warped_per_stage.append(grid_sample(moving, final))

        return StageOutputs(
            features=features,
            pooled_fixed=pooled_fixed,
            pooled_moving=pooled_moving,
            coarse_field=coarse,
            rigid=rigid,
            fields=fields,
            warped_per_stage=warped_per_stage,
            refine_features=refine_features,
        )


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
