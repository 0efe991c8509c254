"""
Grid sampling and field manipulation.

Every field in this project is a displacement in normalized coordinates that is
added to the identity grid before sampling. Coordinates are corner aligned: voxel k
of an n-voxel axis sits at -1 + 2k/(n-1). Fields are (B, 3, D, H, W) tensors with
channel 0 = x (along W), 1 = y (along H), 2 = z (along D).
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import torch
import torch.nn.functional as F

from helpers.io_functions import read_field_payload, write_field_payload


@dataclass
class DeformationField:
    """A single (3, D, H, W) displacement field in normalized coordinates."""

    data: torch.Tensor

    def __post_init__(self):
        self.validate()

    @property
    def shape(self):
        return tuple(self.data.shape[1:])

    @property
    def tensor(self) -> torch.Tensor:
        """The field with a leading batch axis, ready for the sampler."""
        return self.data.unsqueeze(0)

    def validate(self) -> None:
        if self.data.dim() != 4 or self.data.shape[0] != 3:
            raise ValueError(f"DeformationField needs shape (3, D, H, W), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("DeformationField holds NaN or Inf values")

    def save(self, path: Path) -> None:
        write_field_payload(path, self.data.detach().cpu().numpy())

    @classmethod
    def load(cls, path: Path) -> "DeformationField":
        return cls(torch.from_numpy(read_field_payload(path)))


@dataclass
class RigidTransform:
    """Batched linear part R (B, 3, 3) and translation t (B, 3), both in normalized coordinates."""

    R: torch.Tensor
    t: torch.Tensor

    @classmethod
    def identity(cls, batch: int = 1, dtype=torch.float32, device=None) -> "RigidTransform":
        R = torch.eye(3, dtype=dtype, device=device).expand(batch, 3, 3).clone()
        t = torch.zeros(batch, 3, dtype=dtype, device=device)
        return cls(R, t)


def check_field(phi: torch.Tensor) -> None:
    if phi.dim() != 5 or phi.shape[1] != 3:
        raise ValueError(f"Field needs shape (B, 3, D, H, W), got {tuple(phi.shape)}")


def identity_grid(shape: Sequence[int], dtype=torch.float32, device=None) -> torch.Tensor:
    """
    Normalized coordinates of every voxel.

    Args:
        shape: (D, H, W)

    Returns:
        (3, D, H, W) tensor, channels ordered x, y, z; corners sit exactly on ±1.
        A single-voxel axis sits at 0.
    """
    if len(shape) != 3 or any(n < 1 for n in shape):
        raise ValueError(f"identity_grid needs three dims >= 1, got {tuple(shape)}")

    def axis(n):
        if n == 1:
            return torch.zeros(1, dtype=dtype, device=device)
        return torch.linspace(-1, 1, n, dtype=dtype, device=device)

    D, H, W = shape
    zz, yy, xx = torch.meshgrid(axis(D), axis(H), axis(W), indexing="ij")
    return torch.stack((xx, yy, zz), dim=0)


def grid_sample(
    volume: torch.Tensor,
    phi: torch.Tensor,
    mode: Literal["linear", "nearest"] = "linear",
    padding: Literal["border", "zeros"] = "border",
) -> torch.Tensor:
    """
    Sample `volume` at identity_grid + phi.

    Args:
        volume: (B, C, D, H, W)
        phi: (B, 3, D, H, W) displacement, same spatial shape as volume
        mode: "linear" (trilinear, differentiable in both inputs) or "nearest"
        padding: "border" clamps out-of-range locations, "zeros" reads zero

    Returns:
        (B, C, D, H, W) warped volume
    """
    check_field(phi)
    if volume.dim() != 5 or volume.shape[2:] != phi.shape[2:]:
        raise ValueError(
            f"Volume {tuple(volume.shape)} and field {tuple(phi.shape)} do not share a spatial shape"
        )
    if volume.shape[0] != phi.shape[0]:
        raise ValueError(f"Batch mismatch: volume {volume.shape[0]}, field {phi.shape[0]}")

    grid = identity_grid(phi.shape[2:], dtype=phi.dtype, device=phi.device)
    locations = (grid.unsqueeze(0) + phi).permute(0, 2, 3, 4, 1)
    return F.grid_sample(
        volume.to(phi.dtype),
        locations,
        mode="bilinear" if mode == "linear" else "nearest",
        padding_mode=padding,
        align_corners=True,
    )


def upsample_field(phi: torch.Tensor, target_shape: Sequence[int]) -> torch.Tensor:
    """
    Trilinearly resample a field to a finer grid.

    Values are not rescaled: normalized displacements do not depend on resolution.
    """
    check_field(phi)
    target_shape = tuple(int(n) for n in target_shape)
    if any(t < s for t, s in zip(target_shape, phi.shape[2:])):
        raise ValueError(f"Cannot upsample field {tuple(phi.shape[2:])} down to {target_shape}")
    if target_shape == tuple(phi.shape[2:]):
        return phi
    return F.interpolate(phi, size=target_shape, mode="trilinear", align_corners=True)


def apply_rigid_to_field(phi: torch.Tensor, transform: RigidTransform) -> torch.Tensor:
    """
    Move the sampling coordinates of `phi` by a rigid transform, staying in displacement form.

    With g the identity grid the result is R(g + phi) + t - g, evaluated as
    R phi + (R - I) g + t so that (I, 0) returns phi exactly.
    """
    check_field(phi)
    R, t = transform.R.to(phi.dtype), transform.t.to(phi.dtype)
    if R.shape != (phi.shape[0], 3, 3) or t.shape != (phi.shape[0], 3):
        raise ValueError(f"RigidTransform shapes {tuple(R.shape)}, {tuple(t.shape)} do not fit batch {phi.shape[0]}")

    grid = identity_grid(phi.shape[2:], dtype=phi.dtype, device=phi.device)
    eye = torch.eye(3, dtype=phi.dtype, device=phi.device)
    rotated = torch.einsum("bij,bjdhw->bidhw", R, phi)
    shifted = torch.einsum("bij,jdhw->bidhw", R - eye, grid)
    return rotated + shifted + t[:, :, None, None, None]


def spatial_gradient(phi: torch.Tensor) -> torch.Tensor:
    """
    Forward differences of every channel along every axis.

    Args:
        phi: (B, 3, D, H, W)

    Returns:
        (B, 3, 3, D, H, W) indexed [batch, component, axis] with axes ordered x, y, z.
        The last slice along each axis has no forward neighbour and holds 0.
    """
    check_field(phi)
    # x runs along W (dim 4), y along H (dim 3), z along D (dim 2)
    grads = []
    for dim in (4, 3, 2):
        n = phi.shape[dim]
        forward = phi.narrow(dim, 1, n - 1) - phi.narrow(dim, 0, n - 1)
        grads.append(torch.cat((forward, torch.zeros_like(phi.narrow(dim, 0, 1))), dim=dim))
    return torch.stack(grads, dim=2)


def to_voxel_units(phi: torch.Tensor) -> torch.Tensor:
    """Scale a normalized field to voxel displacements, (n - 1) / 2 per axis."""
    check_field(phi)
    D, H, W = phi.shape[2:]
    scale = torch.tensor([(W - 1) / 2, (H - 1) / 2, (D - 1) / 2], dtype=phi.dtype, device=phi.device)
    return phi * scale.view(1, 3, 1, 1, 1)


def to_normalized_units(u: torch.Tensor) -> torch.Tensor:
    """Inverse of `to_voxel_units`."""
    check_field(u)
    D, H, W = u.shape[2:]
    scale = torch.tensor([2 / max(W - 1, 1), 2 / max(H - 1, 1), 2 / max(D - 1, 1)], dtype=u.dtype, device=u.device)
    return u * scale.view(1, 3, 1, 1, 1)


def jacobian_determinant(phi: torch.Tensor) -> torch.Tensor:
    """
    Determinant of I + du/dp per voxel, with u the displacement in voxel units.

    Returns:
        (B, D, H, W); values <= 0 mark folding
    """
    grad = spatial_gradient(to_voxel_units(phi))
    jac = grad.permute(0, 3, 4, 5, 1, 2) + torch.eye(3, dtype=phi.dtype, device=phi.device)
    return torch.linalg.det(jac)
