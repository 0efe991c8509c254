"""
Step 1 along the pipeline.
Load, preprocess, pair and synthesize volumes.

Steps:
1. Read volumes and masks (NIfTI-1 or raw + sidecar)
2. Window to the mediastinum range, scale to [-1, 1], resize
3. Pair fixed and moving volumes
4. Synthesize phantoms and ground-truth deformations for desk-scale checks
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter, zoom
from scipy.spatial.transform import Rotation

from helpers.io_functions import (
    FIELD_SUFFIX,
    RAW_SUFFIX,
    VolumeFormatError,
    is_nifti,
    read_nifti,
    read_raw,
    write_nifti,
    write_raw,
)
from warp import DeformationField, RigidTransform, apply_rigid_to_field, to_normalized_units, to_voxel_units

logger = logging.getLogger(__name__)

MEDIASTINUM_WINDOW = (-160.0, 240.0)
ORGAN_LABELS = {1: "heart", 2: "aorta", 3: "trachea", 4: "esophagus"}
VOLUME_SUFFIXES = (".nii.gz", ".nii", RAW_SUFFIX)


class DatasetError(ValueError):
    """A dataset directory is missing files; `missing` lists them."""

    def __init__(self, message: str, missing: Sequence[Path] = ()):
        super().__init__(message)
        self.missing = list(missing)


@dataclass
class Volume:
    """3D scalar grid (D, H, W) with spacing and origin in mm."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"Volume needs a 3D grid, got shape {self.data.shape}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def to_tensor(self, device=None) -> torch.Tensor:
        """(1, 1, D, H, W) float32 tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.data, dtype=np.float32))[None, None].to(device)


@dataclass
class LabelMask:
    """Integer organ labels aligned with a Volume; 0 is background."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data).astype(np.int16)
        self.validate()

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def validate(self, volume: Optional[Volume] = None) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"LabelMask needs a 3D grid, got shape {self.data.shape}")
        unknown = set(np.unique(self.data).tolist()) - {0, *ORGAN_LABELS}
        if unknown:
            raise ValueError(f"LabelMask holds undeclared labels {sorted(unknown)}")
        if volume is not None and volume.shape != self.shape:
            raise ValueError(f"LabelMask shape {self.shape} differs from volume shape {volume.shape}")

    def to_tensor(self, device=None) -> torch.Tensor:
        return torch.from_numpy(self.data.astype(np.int64))[None, None].to(device)


@dataclass
class SynthConfig:
    """Settings for phantoms and synthetic deformations. Lengths are in voxels, angles in degrees."""

    shape: Tuple[int, int, int] = (64, 64, 64)
    max_displacement: float = 10.0
    smoothness_sigma: float = 6.0
    rigid_angle_range: float = 3.0
    rigid_shift_range: float = 3.0
    seed: int = 0

    def validate(self) -> None:
        if len(self.shape) != 3 or min(self.shape) < 2:
            raise ValueError(f"SynthConfig.shape needs three dims >= 2, got {self.shape}")
        if self.max_displacement < 0 or self.smoothness_sigma <= 0:
            raise ValueError("SynthConfig needs max_displacement >= 0 and smoothness_sigma > 0")
        if self.max_displacement >= min(self.shape) / 4:
            raise ValueError(
                f"max_displacement {self.max_displacement} must stay below min(shape)/4 = {min(self.shape) / 4}"
            )
        if self.rigid_angle_range < 0 or self.rigid_shift_range < 0:
            raise ValueError("Rigid ranges must be >= 0")


def load_volume(path: Path) -> Volume:
    """
    Load a volume without touching its intensities.

    Args:
        path: .nii / .nii.gz / .raw file

    Returns:
        Volume with spacing and origin from the file header
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Volume not found: {path}")
    if is_nifti(path):
        data, spacing, origin = read_nifti(path)
    elif path.suffix == RAW_SUFFIX:
        data, spacing, origin = read_raw(path)
    else:
        raise VolumeFormatError(f"Unsupported volume format: {path.name}", field="suffix")

    if data.ndim != 3:
        raise VolumeFormatError(f"{path} holds a {data.ndim}D payload, expected 3D", field="dim")
    return Volume(np.asarray(data, dtype=np.float32), spacing, origin)


def save_volume(volume: Volume, path: Path) -> None:
    path = Path(path)
    if is_nifti(path):
        write_nifti(path, volume.data.astype(np.float32), volume.spacing, volume.origin)
    elif path.suffix == RAW_SUFFIX:
        write_raw(path, volume.data, volume.spacing, volume.origin, "float32")
    else:
        raise VolumeFormatError(f"Unsupported volume format: {path.name}", field="suffix")


def load_mask(path: Path) -> LabelMask:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Mask not found: {path}")
    if is_nifti(path):
        data, spacing, origin = read_nifti(path, integer=True)
    elif path.suffix == RAW_SUFFIX:
        data, spacing, origin = read_raw(path)
    else:
        raise VolumeFormatError(f"Unsupported mask format: {path.name}", field="suffix")
    return LabelMask(np.rint(data).astype(np.int16), spacing, origin)


def save_mask(mask: LabelMask, path: Path) -> None:
    path = Path(path)
    if is_nifti(path):
        write_nifti(path, mask.data.astype(np.int16), mask.spacing, mask.origin)
    elif path.suffix == RAW_SUFFIX:
        write_raw(path, mask.data, mask.spacing, mask.origin, "int16")
    else:
        raise VolumeFormatError(f"Unsupported mask format: {path.name}", field="suffix")


def check_target_shape(target_shape: Sequence[int]) -> Tuple[int, int, int]:
    target_shape = tuple(int(n) for n in target_shape)
    if len(target_shape) != 3 or any(n < 16 or n % 16 for n in target_shape):
        raise ValueError(f"target_shape dims must be divisible by 16, got {target_shape}")
    return target_shape


def resized_spacing(spacing, old_shape, new_shape) -> Tuple[float, float, float]:
    """Spacing that keeps the corner-to-corner extent when the grid is resized."""
    return tuple(
        float(s) * (o - 1) / (n - 1) if n > 1 else float(s)
        for s, o, n in zip(spacing, old_shape, new_shape)
    )


def preprocess(
    v: Volume,
    window_low: float = MEDIASTINUM_WINDOW[0],
    window_high: float = MEDIASTINUM_WINDOW[1],
    target_shape: Sequence[int] = (128, 128, 128),
) -> Volume:
    """
    Clip to [window_low, window_high], map affinely to [-1, 1], then resize trilinearly.

    Clipping happens before resizing, so the resized values stay inside [-1, 1].
    """
    if window_low >= window_high:
        raise ValueError(f"Degenerate window [{window_low}, {window_high}]")
    target_shape = check_target_shape(target_shape)

    data = np.clip(v.data.astype(np.float64), window_low, window_high)
    data = 2.0 * (data - window_low) / (window_high - window_low) - 1.0

    if v.shape != target_shape:
        factors = [t / s for t, s in zip(target_shape, v.shape)]
        data = zoom(data, factors, order=1, mode="nearest", grid_mode=False)
    data = np.clip(data, -1.0, 1.0)
    return Volume(data.astype(np.float32), resized_spacing(v.spacing, v.shape, target_shape), v.origin)


def preprocess_mask(mask: LabelMask, target_shape: Sequence[int]) -> LabelMask:
    """Nearest-neighbour resize so labels never blend."""
    target_shape = check_target_shape(target_shape)
    if mask.shape == target_shape:
        return mask
    factors = [t / s for t, s in zip(target_shape, mask.shape)]
    data = zoom(mask.data, factors, order=0, mode="nearest", grid_mode=False)
    return LabelMask(data, resized_spacing(mask.spacing, mask.shape, target_shape), mask.origin)


def prepare_volume(
    v: Volume,
    target_shape: Sequence[int],
    window: Tuple[float, float] = MEDIASTINUM_WINDOW,
    mode: Literal["auto", "always", "never"] = "auto",
) -> Volume:
    """
    Bring a loaded volume to network input form.

    "auto" windows only volumes that leave [-1, 1] (raw CT) and resizes everything;
    "always" windows unconditionally; "never" only checks the shape.
    """
    target_shape = check_target_shape(target_shape)
    if mode == "never":
        if v.shape != target_shape:
            raise ValueError(f"Volume shape {v.shape} differs from network input {target_shape}")
        return v
    if mode == "always" or v.data.min() < -1.0 or v.data.max() > 1.0:
        return preprocess(v, window[0], window[1], target_shape)
    # already normalized, only resize (identity window keeps values)
    return preprocess(v, -1.0, 1.0, target_shape)


def crop_to_labels(volume: Volume, mask: LabelMask, margin: int = 8) -> Tuple[Volume, LabelMask]:
    """
    Crop a volume and its mask to the box around all organ labels.

    Args:
        volume: Volume to crop
        mask: Aligned mask
        margin: Voxels kept around the labeled box, clamped to the volume

    Returns:
        Cropped (volume, mask); origin moves with the crop
    """
    mask.validate(volume)
    foreground = np.argwhere(mask.data > 0)
    if foreground.size == 0:
        raise ValueError("Mask has no labeled voxels to crop around")

    low = np.maximum(foreground.min(axis=0) - margin, 0)
    high = np.minimum(foreground.max(axis=0) + margin + 1, volume.shape)
    region = tuple(slice(int(a), int(b)) for a, b in zip(low, high))
    origin = tuple(o + s * int(a) for o, s, a in zip(volume.origin, volume.spacing, low))
    return (
        Volume(volume.data[region].copy(), volume.spacing, origin),
        LabelMask(mask.data[region].copy(), mask.spacing, origin),
    )


def pair_order(count: int, seed: int) -> List[Tuple[int, int]]:
    """
    The documented pairing: ordered (i, j) with i != j in row-major order,
    permuted by numpy.random.default_rng(seed).permutation.
    """
    pairs = [(i, j) for i in range(count) for j in range(count) if i != j]
    order = np.random.default_rng(seed).permutation(len(pairs))
    return [pairs[k] for k in order]


def make_pairs(volumes: Sequence[Volume], seed: int) -> List[Tuple[Volume, Volume]]:
    """
    Pair volumes as (fixed, moving), never pairing a volume with itself.
    """
    if len(volumes) < 2:
        raise ValueError(f"make_pairs needs at least 2 volumes, got {len(volumes)}")
    return [(volumes[i], volumes[j]) for i, j in pair_order(len(volumes), seed)]


@dataclass(frozen=True)
class Ellipsoid:
    label: int
    center: Tuple[float, float, float]  # (z, y, x) normalized
    radii: Tuple[float, float, float]
    intensity: float

    def contains(self, z, y, x) -> np.ndarray:
        cz, cy, cx = self.center
        rz, ry, rx = self.radii
        return ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0


@dataclass(frozen=True)
class Tube:
    """Cylinder running along z."""

    label: int
    center: Tuple[float, float]  # (y, x) normalized
    radius: float
    z_extent: Tuple[float, float]
    intensity: float

    def contains(self, z, y, x) -> np.ndarray:
        cy, cx = self.center
        inside = (y - cy) ** 2 + (x - cx) ** 2 <= self.radius**2
        return inside & (z >= self.z_extent[0]) & (z <= self.z_extent[1])


BODY = Ellipsoid(0, (0.0, 0.0, 0.0), (0.95, 0.85, 0.9), -0.2)
BASE_STRUCTURES = (
    Ellipsoid(1, (0.0, 0.15, 0.1), (0.45, 0.3, 0.32), 0.35),
    Tube(2, (-0.25, -0.28), 0.13, (-0.75, 0.75), 0.6),
    Tube(3, (-0.55, 0.0), 0.11, (-0.75, 0.75), -0.85),
    Tube(4, (-0.5, 0.3), 0.1, (-0.75, 0.75), 0.05),
)
JITTER = 0.03


def phantom_structures(cfg: SynthConfig) -> List:
    """The organ structures of the phantom for `cfg`, centers jittered by the seed."""
    rng = np.random.default_rng([cfg.seed, 0])
    structures = []
    for base in BASE_STRUCTURES:
        offset = rng.uniform(-JITTER, JITTER, size=len(base.center))
        center = tuple(float(c + o) for c, o in zip(base.center, offset))
        if isinstance(base, Ellipsoid):
            structures.append(Ellipsoid(base.label, center, base.radii, base.intensity))
        else:
            structures.append(Tube(base.label, center, base.radius, base.z_extent, base.intensity))
    return structures


def normalized_coordinates(shape: Sequence[int]):
    """(z, y, x) corner-aligned coordinate arrays, matching warp.identity_grid."""
    return np.meshgrid(*(np.linspace(-1.0, 1.0, n) for n in shape), indexing="ij")


def generate_phantom(cfg: SynthConfig) -> Tuple[Volume, LabelMask]:
    """
    Build a chest-like phantom: a body ellipsoid holding a heart ellipsoid and
    aorta, trachea and esophagus tubes, each carrying its organ label.

    Returns:
        (Volume in [-1, 1], LabelMask with labels 0..4)
    """
    cfg.validate()
    if min(cfg.shape) < 16:
        raise ValueError(f"Phantom needs every dim >= 16 to fit the organs, got {cfg.shape}")

    z, y, x = normalized_coordinates(cfg.shape)
    data = np.full(cfg.shape, -1.0)
    data[BODY.contains(z, y, x)] = BODY.intensity

    labels = np.zeros(cfg.shape, dtype=np.int16)
    for structure in phantom_structures(cfg):
        region = structure.contains(z, y, x) & (labels == 0)
        labels[region] = structure.label
        data[region] = structure.intensity

    missing = [name for label, name in ORGAN_LABELS.items() if not (labels == label).any()]
    if missing:
        raise ValueError(f"Shape {cfg.shape} is too small to fit {', '.join(missing)}")

    rng = np.random.default_rng([cfg.seed, 1])
    texture = gaussian_filter(rng.standard_normal(cfg.shape), sigma=1.5)
    data = np.clip(data + 0.3 * texture, -1.0, 1.0)
    return Volume(data.astype(np.float32)), LabelMask(labels)


def scale_to_max_norm(u: np.ndarray, max_norm: float) -> np.ndarray:
    """Scale a (3, ...) vector field so its largest per-voxel Euclidean norm is max_norm."""
    peak = np.sqrt((u**2).sum(axis=0)).max()
    if max_norm == 0 or peak == 0:
        return np.zeros_like(u)
    return u * (max_norm / peak)


def random_rigid(cfg: SynthConfig, rng: np.random.Generator) -> RigidTransform:
    """Rotation about x, y, z within ±rigid_angle_range and a shift within ±rigid_shift_range voxels."""
    angles = rng.uniform(-cfg.rigid_angle_range, cfg.rigid_angle_range, size=3)
    shift = rng.uniform(-cfg.rigid_shift_range, cfg.rigid_shift_range, size=3)
    D, H, W = cfg.shape
    R = Rotation.from_euler("xyz", angles, degrees=True).as_matrix()
    t = shift * np.array([2 / (W - 1), 2 / (H - 1), 2 / (D - 1)])
    return RigidTransform(torch.from_numpy(R)[None], torch.from_numpy(t)[None])


def peak_voxel_norm(phi: torch.Tensor) -> float:
    return torch.linalg.vector_norm(to_voxel_units(phi), dim=1).max().item()


def synth_deformation(cfg: SynthConfig) -> DeformationField:
    """
    Smooth random displacement composed with a small rigid motion.

    The non-rigid part is Gaussian-smoothed white noise, filtered with periodic
    boundaries so its amplitude is the same everywhere in the volume. It is
    scaled to the displacement left after the rigid motion's peak, and the
    composed field never moves a voxel further than cfg.max_displacement.
    The result is in normalized units.
    """
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 2])

    noise = rng.standard_normal((3, *cfg.shape))
    smooth = np.stack([gaussian_filter(c, sigma=cfg.smoothness_sigma, mode="wrap") for c in noise])
    rigid = random_rigid(cfg, rng)

    rigid_peak = peak_voxel_norm(apply_rigid_to_field(torch.zeros(1, 3, *cfg.shape, dtype=torch.float64), rigid))
    budget = max(cfg.max_displacement - rigid_peak, 0.5 * cfg.max_displacement)
    u = scale_to_max_norm(smooth, budget)

    phi = apply_rigid_to_field(to_normalized_units(torch.from_numpy(u)[None]), rigid)
    peak = peak_voxel_norm(phi)
    if peak > cfg.max_displacement:
        phi = phi * (cfg.max_displacement / peak)
    return DeformationField(phi[0].float())


@dataclass
class PairRecord:
    """One registration pair as read from a dataset directory."""

    fixed_id: str
    moving_id: str
    fixed: Volume
    moving: Volume
    mask_fixed: Optional[LabelMask] = None
    mask_moving: Optional[LabelMask] = None
    field_true: Optional[DeformationField] = None


def find_volume_file(directory: Path, stem: str) -> Optional[Path]:
    for suffix in VOLUME_SUFFIXES:
        candidate = directory / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    return None


def volume_stem(path: Path) -> str:
    name = path.name
    for suffix in VOLUME_SUFFIXES:
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def discover_dataset(directory: Path, seed: int = 0, require_masks: bool = True) -> List[PairRecord]:
    """
    Read every registration pair in a dataset directory.

    Synthetic layout (written by `main.py synth`): phantom_<k>, phantom_<k>_mask,
    deformed_<k>, field_<k>.field -> fixed = deformed_<k>, moving = phantom_<k>.
    Generic layout: <id> volumes with <id>_mask companions, paired by make_pairs.

    Args:
        directory: Dataset directory
        seed: Pairing seed for the generic layout
        require_masks: Fail when a mask companion is missing

    Returns:
        List of PairRecord
    """
    from evaluate import warp_mask

    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"Dataset directory not found: {directory}", [directory])

    field_files = sorted(directory.glob(f"field_*{FIELD_SUFFIX}"))
    records = []
    missing = []

    if field_files:
        for field_file in field_files:
            key = field_file.name[len("field_"):-len(FIELD_SUFFIX)]
            phantom = find_volume_file(directory, f"phantom_{key}")
            phantom_mask = find_volume_file(directory, f"phantom_{key}_mask")
            deformed = find_volume_file(directory, f"deformed_{key}")
            absent = [
                directory / f"{stem}.*"
                for stem, found in ((f"phantom_{key}", phantom), (f"phantom_{key}_mask", phantom_mask), (f"deformed_{key}", deformed))
                if found is None
            ]
            if absent:
                missing.extend(absent)
                continue

            truth = DeformationField.load(field_file)
            mask_moving = load_mask(phantom_mask)
            mask_fixed = warp_mask(mask_moving, truth)
            records.append(PairRecord(
                fixed_id=f"deformed_{key}",
                moving_id=f"phantom_{key}",
                fixed=load_volume(deformed),
                moving=load_volume(phantom),
                mask_fixed=mask_fixed,
                mask_moving=mask_moving,
                field_true=truth,
            ))
    else:
        volume_files = sorted(
            p for p in directory.iterdir()
            if p.name.endswith(VOLUME_SUFFIXES) and not volume_stem(p).endswith("_mask")
        )
        ids, volumes, masks = [], [], []
        for path in volume_files:
            stem = volume_stem(path)
            mask_path = find_volume_file(directory, f"{stem}_mask")
            if mask_path is None and require_masks:
                missing.append(directory / f"{stem}_mask.*")
                continue
            ids.append(stem)
            volumes.append(load_volume(path))
            masks.append(load_mask(mask_path) if mask_path else None)

        if not missing:
            if len(volumes) < 2:
                raise DatasetError(f"{directory} holds {len(volumes)} usable volumes, need at least 2")
            for i, j in pair_order(len(volumes), seed):
                records.append(PairRecord(ids[i], ids[j], volumes[i], volumes[j], masks[i], masks[j]))

    if missing:
        listed = ", ".join(str(p) for p in missing)
        raise DatasetError(f"Missing files in {directory}: {listed}", missing)
    if not records:
        raise DatasetError(f"No registration pairs found in {directory}")

    logger.info("Read %d pairs from %s", len(records), directory)
    return records


def prepare_record(
    record: PairRecord,
    target_shape: Sequence[int],
    window: Tuple[float, float] = MEDIASTINUM_WINDOW,
    mode: Literal["auto", "always", "never"] = "auto",
    crop_margin: int = -1,
) -> PairRecord:
    """
    Bring a discovered pair to network input form. Masks and a known field follow
    their volumes; cropping (crop_margin >= 0) applies to pairs without a known field.
    """
    target_shape = check_target_shape(target_shape)
    fixed, moving = record.fixed, record.moving
    mask_fixed, mask_moving = record.mask_fixed, record.mask_moving
    if crop_margin >= 0 and record.field_true is None:
        if mask_fixed is not None:
            fixed, mask_fixed = crop_to_labels(fixed, mask_fixed, crop_margin)
        if mask_moving is not None:
            moving, mask_moving = crop_to_labels(moving, mask_moving, crop_margin)

    field_true = record.field_true
    if field_true is not None and field_true.shape != target_shape:
        resized = F.interpolate(field_true.tensor, size=target_shape, mode="trilinear", align_corners=True)
        field_true = DeformationField(resized[0])

    return PairRecord(
        fixed_id=record.fixed_id,
        moving_id=record.moving_id,
        fixed=prepare_volume(fixed, target_shape, window, mode),
        moving=prepare_volume(moving, target_shape, window, mode),
        mask_fixed=preprocess_mask(mask_fixed, target_shape) if mask_fixed is not None else None,
        mask_moving=preprocess_mask(mask_moving, target_shape) if mask_moving is not None else None,
        field_true=field_true,
    )
