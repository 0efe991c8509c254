import math

import numpy as np
import pytest
import torch

from helpers.io_functions import VolumeFormatError
from warp import (
    DeformationField,
    RigidTransform,
    apply_rigid_to_field,
    grid_sample,
    identity_grid,
    jacobian_determinant,
    spatial_gradient,
    to_normalized_units,
    to_voxel_units,
    upsample_field,
)


def random_field(shape, scale=0.2, seed=0, dtype=torch.float64, batch=1):
    generator = torch.Generator().manual_seed(seed)
    return (torch.rand((batch, 3, *shape), generator=generator, dtype=dtype) * 2 - 1) * scale


def trilinear_oracle(volume: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Scalar-loop trilinear sampling with border clamping, corner-aligned coordinates."""
    D, H, W = volume.shape
    out = np.zeros_like(volume)

    def unnormalize(c, n):
        if n == 1:
            return 0.0
        return min(max((c + 1.0) / 2.0 * (n - 1), 0.0), n - 1.0)

    for d in range(D):
        for h in range(H):
            for w in range(W):
                x = (-1 + 2 * w / (W - 1)) + phi[0, d, h, w]
                y = (-1 + 2 * h / (H - 1)) + phi[1, d, h, w]
                z = (-1 + 2 * d / (D - 1)) + phi[2, d, h, w]
                px, py, pz = unnormalize(x, W), unnormalize(y, H), unnormalize(z, D)
                x0, y0, z0 = int(math.floor(px)), int(math.floor(py)), int(math.floor(pz))
                fx, fy, fz = px - x0, py - y0, pz - z0
                value = 0.0
                for dz, wz in ((0, 1 - fz), (1, fz)):
                    for dy, wy in ((0, 1 - fy), (1, fy)):
                        for dx, wx in ((0, 1 - fx), (1, fx)):
                            weight = wz * wy * wx
                            if weight == 0:
                                continue
                            value += weight * volume[min(z0 + dz, D - 1), min(y0 + dy, H - 1), min(x0 + dx, W - 1)]
                out[d, h, w] = value
    return out


class TestIdentityGrid:
    def test_corners_on_unit_cube(self):
        """Corner voxels sit exactly on -1 and +1."""
        grid = identity_grid((4, 5, 6))
        assert grid.shape == (3, 4, 5, 6)
        assert grid[0, 0, 0, 0] == -1 and grid[0, 0, 0, -1] == 1
        assert grid[1, 0, 0, 0] == -1 and grid[1, 0, -1, 0] == 1
        assert grid[2, 0, 0, 0] == -1 and grid[2, -1, 0, 0] == 1

    def test_channel_order_is_xyz(self):
        """Channel 0 varies along W, channel 2 along D."""
        grid = identity_grid((3, 4, 5))
        assert torch.all(grid[0, :, :, 1] > grid[0, :, :, 0])
        assert torch.all(grid[0, 1] == grid[0, 0])
        assert torch.all(grid[2, 1] > grid[2, 0])

    def test_single_voxel_axis(self):
        """A singleton axis sits at 0."""
        grid = identity_grid((1, 1, 1))
        assert torch.equal(grid, torch.zeros(3, 1, 1, 1))

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            identity_grid((4, 4))
        with pytest.raises(ValueError):
            identity_grid((0, 4, 4))


class TestGridSample:
    def test_matches_trilinear_oracle(self):
        """100 random volumes and fields up to 9^3 agree with the scalar-loop oracle."""
        rng = np.random.default_rng(0)
        for trial in range(100):
            shape = tuple(int(n) for n in rng.integers(2, 10, size=3))
            volume = rng.standard_normal(shape)
            phi = rng.uniform(-0.6, 0.6, size=(3, *shape))
            expected = trilinear_oracle(volume, phi)
            got = grid_sample(torch.from_numpy(volume)[None, None], torch.from_numpy(phi)[None])
            np.testing.assert_allclose(got[0, 0].numpy(), expected, atol=1e-6, err_msg=f"trial {trial}")

    def test_zero_field_is_identity(self):
        """Sampling at the identity grid returns the volume."""
        volume = torch.randn(2, 1, 5, 6, 7)
        warped = grid_sample(volume, torch.zeros(2, 3, 5, 6, 7))
        assert torch.allclose(warped, volume, atol=1e-5)

    def test_one_voxel_shift_along_x(self):
        """A displacement of one voxel along x reads the right neighbour, clamped at the border."""
        volume = torch.arange(5 * 4 * 6, dtype=torch.float64).reshape(1, 1, 5, 4, 6)
        phi = torch.zeros(1, 3, 5, 4, 6, dtype=torch.float64)
        phi[:, 0] = 2 / (6 - 1)
        warped = grid_sample(volume, phi)
        assert torch.allclose(warped[..., :-1], volume[..., 1:])
        assert torch.allclose(warped[..., -1], volume[..., -1])

    def test_zeros_padding_reads_zero_outside(self):
        volume = torch.ones(1, 1, 4, 4, 4, dtype=torch.float64)
        phi = torch.full((1, 3, 4, 4, 4), 5.0, dtype=torch.float64)
        assert torch.all(grid_sample(volume, phi, padding="zeros") == 0)
        assert torch.allclose(grid_sample(volume, phi, padding="border"), volume)

    def test_nearest_keeps_label_set(self):
        """Nearest sampling never produces values that were not in the input."""
        labels = torch.randint(0, 5, (1, 1, 6, 6, 6)).double()
        warped = grid_sample(labels, random_field((6, 6, 6), scale=0.5, seed=2), mode="nearest")
        assert set(warped.unique().tolist()) <= set(labels.unique().tolist())

    def test_gradients_match_finite_differences(self):
        """Analytic gradients w.r.t. volume and field agree with central differences at 4^3."""
        for seed in range(50):
            generator = torch.Generator().manual_seed(seed)
            volume = torch.randn(1, 1, 4, 4, 4, generator=generator, dtype=torch.float64, requires_grad=True)
            phi = random_field((4, 4, 4), scale=0.3, seed=seed + 100).requires_grad_(True)
            assert torch.autograd.gradcheck(grid_sample, (volume, phi), eps=1e-6, atol=1e-5, rtol=1e-3)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            grid_sample(torch.zeros(1, 1, 4, 4, 4), torch.zeros(1, 3, 4, 4, 5))
        with pytest.raises(ValueError):
            grid_sample(torch.zeros(2, 1, 4, 4, 4), torch.zeros(1, 3, 4, 4, 4))
        with pytest.raises(ValueError):
            grid_sample(torch.zeros(1, 1, 4, 4, 4), torch.zeros(1, 2, 4, 4, 4))


class TestUpsampleField:
    def test_constant_field_stays_constant(self):
        """Normalized displacements are not rescaled when the grid gets finer."""
        phi = torch.full((1, 3, 2, 3, 4), 0.25)
        phi[:, 1] = -0.5
        up = upsample_field(phi, (8, 6, 8))
        assert up.shape == (1, 3, 8, 6, 8)
        assert torch.allclose(up[:, 0], torch.full_like(up[:, 0], 0.25))
        assert torch.allclose(up[:, 1], torch.full_like(up[:, 1], -0.5))

    def test_from_single_voxel(self):
        phi = torch.tensor([0.1, 0.2, 0.3]).view(1, 3, 1, 1, 1)
        up = upsample_field(phi, (2, 2, 2))
        assert torch.allclose(up, phi.expand(1, 3, 2, 2, 2))

    def test_same_shape_is_noop(self):
        phi = torch.randn(1, 3, 4, 4, 4)
        assert upsample_field(phi, (4, 4, 4)) is phi

    def test_downsampling_raises(self):
        with pytest.raises(ValueError):
            upsample_field(torch.zeros(1, 3, 8, 8, 8), (4, 8, 8))


class TestApplyRigid:
    def test_identity_is_exact(self):
        """(I, 0) returns the field bit for bit."""
        phi = random_field((4, 5, 6), seed=1)
        out = apply_rigid_to_field(phi, RigidTransform.identity(1, dtype=phi.dtype))
        assert torch.equal(out, phi)

    def test_pure_translation(self):
        t = torch.tensor([[0.1, -0.2, 0.05]], dtype=torch.float64)
        transform = RigidTransform(torch.eye(3, dtype=torch.float64)[None], t)
        out = apply_rigid_to_field(torch.zeros(1, 3, 3, 4, 5, dtype=torch.float64), transform)
        assert torch.allclose(out, t.view(1, 3, 1, 1, 1).expand_as(out))

    def test_rotation_moves_grid_points(self):
        """With zero field the result is R g - g."""
        angle = math.radians(90)
        R = torch.tensor(
            [[math.cos(angle), -math.sin(angle), 0.0], [math.sin(angle), math.cos(angle), 0.0], [0.0, 0.0, 1.0]],
            dtype=torch.float64,
        )
        out = apply_rigid_to_field(torch.zeros(1, 3, 3, 3, 3, dtype=torch.float64), RigidTransform(R[None], torch.zeros(1, 3, dtype=torch.float64)))
        grid = identity_grid((3, 3, 3), dtype=torch.float64)
        # corner (x=1, y=-1) rotates to (x=1, y=1)
        moved = grid[:, 0, 0, 2] + out[0, :, 0, 0, 2]
        assert torch.allclose(moved, torch.tensor([1.0, 1.0, -1.0], dtype=torch.float64))

    def test_batch_mismatch_raises(self):
        with pytest.raises(ValueError):
            apply_rigid_to_field(torch.zeros(2, 3, 4, 4, 4), RigidTransform.identity(1))


class TestSpatialGradient:
    def test_linear_field(self):
        """A field growing by a per x step has forward difference a, and 0 on the last slice."""
        D, H, W = 3, 4, 5
        phi = torch.zeros(1, 3, D, H, W, dtype=torch.float64)
        phi[:, 1] = 0.3 * torch.arange(W, dtype=torch.float64)
        grad = spatial_gradient(phi)
        assert grad.shape == (1, 3, 3, D, H, W)
        assert torch.allclose(grad[0, 1, 0, :, :, :-1], torch.full((D, H, W - 1), 0.3, dtype=torch.float64))
        assert torch.all(grad[0, 1, 0, :, :, -1] == 0)
        assert torch.all(grad[0, 1, 1] == 0) and torch.all(grad[0, 1, 2] == 0)
        assert torch.all(grad[0, 0] == 0) and torch.all(grad[0, 2] == 0)

    def test_axis_order_matches_channels(self):
        """Axis index 2 differentiates along D."""
        phi = torch.zeros(1, 3, 4, 3, 3, dtype=torch.float64)
        phi[:, 0] = torch.arange(4, dtype=torch.float64).view(4, 1, 1)
        grad = spatial_gradient(phi)
        assert torch.allclose(grad[0, 0, 2, :-1], torch.ones(3, 3, 3, dtype=torch.float64))
        assert torch.all(grad[0, 0, :2] == 0)

    def test_single_voxel(self):
        assert torch.equal(spatial_gradient(torch.ones(1, 3, 1, 1, 1)), torch.zeros(1, 3, 3, 1, 1, 1))


class TestUnitsAndJacobian:
    def test_units_round_trip(self):
        phi = random_field((5, 6, 7), seed=4)
        assert torch.allclose(to_normalized_units(to_voxel_units(phi)), phi)

    def test_one_voxel_is_two_over_n_minus_one(self):
        u = torch.zeros(1, 3, 5, 9, 17, dtype=torch.float64)
        u[:, 0] = 1.0
        assert torch.allclose(to_normalized_units(u)[:, 0], torch.full((1, 5, 9, 17), 2 / 16, dtype=torch.float64))

    def test_zero_field_has_unit_determinant(self):
        det = jacobian_determinant(torch.zeros(1, 3, 4, 4, 4))
        assert det.shape == (1, 4, 4, 4)
        assert torch.allclose(det, torch.ones_like(det))

    def test_uniform_translation_has_unit_determinant(self):
        u = torch.zeros(1, 3, 5, 6, 7, dtype=torch.float64)
        u[:, 0], u[:, 1], u[:, 2] = 1.5, -2.0, 0.25
        det = jacobian_determinant(to_normalized_units(u))
        assert torch.allclose(det, torch.ones_like(det))

    def test_uniform_scaling(self):
        """u = s * p in voxels gives det = (1 + s)^3 away from the last slices."""
        n, s = 6, 0.1
        zz, yy, xx = torch.meshgrid(*(torch.arange(n, dtype=torch.float64),) * 3, indexing="ij")
        u = torch.stack((xx, yy, zz))[None] * s
        det = jacobian_determinant(to_normalized_units(u))
        assert torch.allclose(det[0, :-1, :-1, :-1], torch.full((n - 1,) * 3, (1 + s) ** 3, dtype=torch.float64))

    def test_folding_is_negative(self):
        """A field that reverses x order has negative determinant."""
        n = 5
        u = torch.zeros(1, 3, n, n, n, dtype=torch.float64)
        u[:, 0] = -2.0 * torch.arange(n, dtype=torch.float64)
        det = jacobian_determinant(to_normalized_units(u))
        assert torch.all(det[0, :, :, :-1] < 0)


class TestDeformationField:
    def test_save_load_round_trip(self, tmp_path):
        field = DeformationField(random_field((4, 5, 6), seed=5, dtype=torch.float32)[0])
        field.save(tmp_path / "f.field")
        loaded = DeformationField.load(tmp_path / "f.field")
        assert torch.equal(loaded.data, field.data)
        assert (tmp_path / "f.field.txt").exists()

    def test_invalid_fields_raise(self):
        with pytest.raises(ValueError):
            DeformationField(torch.zeros(2, 4, 4, 4))
        bad = torch.zeros(3, 4, 4, 4)
        bad[0, 0, 0, 0] = float("nan")
        with pytest.raises(ValueError):
            DeformationField(bad)

    def test_tensor_adds_batch_axis(self):
        assert DeformationField(torch.zeros(3, 2, 3, 4)).tensor.shape == (1, 3, 2, 3, 4)

    def test_unreadable_payload_names_field(self, tmp_path):
        path = tmp_path / "f.field"
        DeformationField(torch.zeros(3, 2, 2, 2)).save(path)
        path.unlink()
        path.mkdir()
        with pytest.raises(VolumeFormatError) as excinfo:
            DeformationField.load(path)
        assert excinfo.value.field == "payload"
