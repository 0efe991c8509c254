"""
Step 5 along the pipeline.
Score registrations: Dice per organ, endpoint error against known fields,
folding, timing, the (alpha, beta) grid search and PNG overlays.
"""

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import binary_erosion

from data import ORGAN_LABELS, LabelMask, PairRecord, Volume
from network import RegistrationNet, StageOutputs, upsample_features
from train import TrainConfig, TrainingDiverged, train
from warp import DeformationField, grid_sample, jacobian_determinant, to_voxel_units

logger = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "fixed_id", "moving_id",
    "dice_heart", "dice_aorta", "dice_trachea", "dice_esophagus", "dice_mean",
    "epe_voxels", "time_sec", "fold_fraction",
)
GRID_COLUMNS = ("alpha", "beta", "dice_mean", "status")
DEFAULT_ALPHAS = (1.0, 10.0, 100.0)
DEFAULT_BETAS = (10.0, 100.0, 1000.0)

# heart green, aorta yellow, trachea blue, esophagus red
ORGAN_COLORS = {
    1: (0, 200, 0),
    2: (255, 220, 0),
    3: (0, 90, 255),
    4: (230, 0, 0),
}
FOUR_NEIGHBOURS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class MetricsReport:
    dice: Dict[str, float]
    epe_voxels: float = math.nan
    time_sec: float = math.nan
    fold_fraction: float = math.nan

    @property
    def dice_mean(self) -> float:
        return math.fsum(self.dice[name] for name in ORGAN_LABELS.values()) / len(ORGAN_LABELS)

    def as_row(self, fixed_id: str, moving_id: str) -> Dict[str, Union[str, float]]:
        row = {"fixed_id": fixed_id, "moving_id": moving_id}
        for name in ORGAN_LABELS.values():
            row[f"dice_{name}"] = self.dice[name]
        row["dice_mean"] = self.dice_mean
        row["epe_voxels"] = self.epe_voxels
        row["time_sec"] = self.time_sec
        row["fold_fraction"] = self.fold_fraction
        return row


@dataclass
class GridCell:
    alpha: float
    beta: float
    dice_mean: float
    status: str = "ok"


@dataclass
class RuntimeReport:
    shape: Tuple[int, int, int]
    repeats: int
    mean_sec: float
    min_sec: float
    timings: List[float] = field(default_factory=list)


def mask_array(mask: Union[LabelMask, np.ndarray]) -> np.ndarray:
    return mask.data if isinstance(mask, LabelMask) else np.asarray(mask)


def dice(a: Union[LabelMask, np.ndarray], b: Union[LabelMask, np.ndarray], label: int) -> float:
    """
    2|A ∩ B| / (|A| + |B|) for the voxels carrying `label`; 1.0 when both are empty.
    """
    a, b = mask_array(a), mask_array(b)
    if a.shape != b.shape:
        raise ValueError(f"dice needs equal shapes, got {a.shape} and {b.shape}")
    in_a, in_b = a == label, b == label
    size = int(in_a.sum()) + int(in_b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(in_a, in_b).sum()) / size


def field_tensor(phi: Union[DeformationField, torch.Tensor]) -> torch.Tensor:
    if isinstance(phi, DeformationField):
        return phi.tensor
    return phi.unsqueeze(0) if phi.dim() == 4 else phi


def warp_mask(mask: LabelMask, phi: Union[DeformationField, torch.Tensor]) -> LabelMask:
    """Nearest-neighbour warp of integer labels; labels never blend."""
    phi = field_tensor(phi).detach()
    if phi.shape[0] != 1 or tuple(phi.shape[2:]) != mask.shape:
        raise ValueError(f"Mask shape {mask.shape} does not fit field shape {tuple(phi.shape)}")

    labels = torch.from_numpy(mask.data.astype(np.float32))[None, None].to(device=phi.device, dtype=phi.dtype)
    warped = grid_sample(labels, phi, mode="nearest", padding="border")
    return LabelMask(np.rint(warped[0, 0].cpu().numpy()).astype(np.int16), mask.spacing, mask.origin)


def endpoint_error(phi_pred: Union[DeformationField, torch.Tensor], phi_true: Union[DeformationField, torch.Tensor]) -> float:
    """Mean per-voxel Euclidean distance between two fields, in voxels."""
    pred, true = field_tensor(phi_pred), field_tensor(phi_true)
    if pred.shape != true.shape:
        raise ValueError(f"endpoint_error needs equal shapes, got {tuple(pred.shape)} and {tuple(true.shape)}")
    difference = to_voxel_units(pred.detach().double() - true.detach().to(pred.device).double())
    return float(torch.linalg.vector_norm(difference, dim=1).mean())


def fold_fraction(phi: torch.Tensor) -> float:
    """Share of voxels whose Jacobian determinant is <= 0."""
    return float((jacobian_determinant(phi.detach()) <= 0).double().mean())


def synchronize(device: torch.device) -> None:
    if device.type == "cuda":
        torch.cuda.synchronize(device)


def as_batch(x: Union[Volume, torch.Tensor], device) -> torch.Tensor:
    if isinstance(x, Volume):
        return x.to_tensor(device)
    return (x[None, None] if x.dim() == 3 else x).float().to(device)


def evaluate_pair(
    model: RegistrationNet,
    fixed: Union[Volume, torch.Tensor],
    moving: Union[Volume, torch.Tensor],
    mask_fixed: LabelMask,
    mask_moving: LabelMask,
    field_true: Optional[DeformationField] = None,
    timing: bool = True,
) -> MetricsReport:
    """
    Register one pair and score it.

    Args:
        model: Trained model
        fixed, moving: Preprocessed volumes at the model input shape
        mask_fixed, mask_moving: Organ masks at the same shape
        field_true: Known field (synthetic pairs) for the endpoint error
        timing: Measure forward + mask warp wall time; nan otherwise

    Returns:
        MetricsReport
    """
    device = next(model.parameters()).device
    f, m = as_batch(fixed, device), as_batch(moving, device)
    model.eval()

    with torch.no_grad():
        synchronize(device)
        start = time.perf_counter()
        outputs = model(f, m)
        warped_mask = warp_mask(mask_moving, outputs.final_field)
        synchronize(device)
        elapsed = time.perf_counter() - start

    scores = {name: dice(warped_mask, mask_fixed, label) for label, name in ORGAN_LABELS.items()}
    return MetricsReport(
        dice=scores,
        epe_voxels=endpoint_error(outputs.final_field, field_true) if field_true is not None else math.nan,
        time_sec=elapsed if timing else math.nan,
        fold_fraction=fold_fraction(outputs.final_field),
    )


def evaluate_record(model: RegistrationNet, record: PairRecord, timing: bool = True) -> MetricsReport:
    if record.mask_fixed is None or record.mask_moving is None:
        raise ValueError(f"Pair {record.fixed_id}/{record.moving_id} has no masks to score")
    return evaluate_pair(
        model, record.fixed, record.moving, record.mask_fixed, record.mask_moving, record.field_true, timing
    )


def unregistered_report(record: PairRecord) -> MetricsReport:
    """Dice of the masks as they are, before any registration."""
    scores = {name: dice(record.mask_moving, record.mask_fixed, label) for label, name in ORGAN_LABELS.items()}
    return MetricsReport(dice=scores)


def summarize_metrics(reports: Sequence[MetricsReport]) -> Dict[str, float]:
    """
    Test-set means: one value per organ, "mean" over organs, and "epe_voxels"
    over the reports that carry one. Exact summation keeps the result order independent.
    """
    if not reports:
        raise ValueError("summarize_metrics needs at least one report")
    summary = {
        name: math.fsum(r.dice[name] for r in reports) / len(reports)
        for name in ORGAN_LABELS.values()
    }
    summary["mean"] = math.fsum(summary[name] for name in ORGAN_LABELS.values()) / len(ORGAN_LABELS)
    errors = [r.epe_voxels for r in reports if math.isfinite(r.epe_voxels)]
    summary["epe_voxels"] = math.fsum(errors) / len(errors) if errors else math.nan
    return summary


def write_metrics_csv(rows: Sequence[Dict[str, Union[str, float]]], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def grid_search(
    alpha_values: Sequence[float],
    beta_values: Sequence[float],
    train_pairs: Sequence[Tuple[Volume, Volume]],
    eval_records: Sequence[PairRecord],
    base_config: TrainConfig,
) -> List[GridCell]:
    """
    Train a fresh model per (alpha, beta) cell and record its mean Dice.
    A diverging cell is recorded as nan and the search moves on.
    """
    if not alpha_values or not beta_values:
        raise ValueError("grid_search needs non-empty alpha and beta grids")
    if not eval_records:
        raise ValueError("grid_search needs at least one evaluation pair")

    cells = []
    for alpha in alpha_values:
        for beta in beta_values:
            weights = replace(base_config.weights, alpha=float(alpha), beta=float(beta))
            config = replace(base_config, weights=weights)
            logger.info("Grid cell alpha=%g beta=%g", alpha, beta)
            try:
                result = train(config, train_pairs)
            except TrainingDiverged as e:
                logger.warning("Grid cell alpha=%g beta=%g diverged at step %d", alpha, beta, e.step)
                cells.append(GridCell(float(alpha), float(beta), math.nan, "diverged"))
                continue

            reports = [evaluate_record(result.model, record, timing=False) for record in eval_records]
            score = summarize_metrics(reports)["mean"]
            status = "ok" if math.isfinite(score) else "diverged"
            cells.append(GridCell(float(alpha), float(beta), score, status))
    return cells


def best_cell(cells: Sequence[GridCell]) -> Optional[GridCell]:
    scored = [c for c in cells if math.isfinite(c.dice_mean)]
    return max(scored, key=lambda c: c.dice_mean) if scored else None


def write_grid_csv(cells: Sequence[GridCell], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=GRID_COLUMNS)
        writer.writeheader()
        for cell in cells:
            writer.writerow({"alpha": cell.alpha, "beta": cell.beta, "dice_mean": cell.dice_mean, "status": cell.status})


def volume_array(v: Union[Volume, np.ndarray, torch.Tensor]) -> np.ndarray:
    if isinstance(v, Volume):
        return v.data
    if isinstance(v, torch.Tensor):
        v = v.detach().cpu()
        while v.dim() > 3:
            v = v[0]
        return v.numpy()
    return np.asarray(v)


def take_slice(array: np.ndarray, axis: int, slice_index: int) -> np.ndarray:
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    if not 0 <= slice_index < array.shape[axis]:
        raise ValueError(f"Slice {slice_index} is outside 0..{array.shape[axis] - 1} along axis {axis}")
    return np.take(array, slice_index, axis=axis)


def to_gray(values: np.ndarray) -> np.ndarray:
    """[-1, 1] -> uint8 [0, 255]."""
    return np.clip(np.rint((values.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def label_contour(region: np.ndarray) -> np.ndarray:
    return region & ~binary_erosion(region, structure=FOUR_NEIGHBOURS, border_value=0)


def export_overlay(
    fixed: Union[Volume, np.ndarray, torch.Tensor],
    moving_warped: Union[Volume, np.ndarray, torch.Tensor],
    masks: Union[LabelMask, Sequence[LabelMask]],
    axis: int,
    slice_index: int,
    path: Path,
) -> Path:
    """
    Write one PNG slice: the 50/50 gray blend of fixed and warped moving with the
    organ contours of every mask drawn in their colors.
    """
    f, w = volume_array(fixed), volume_array(moving_warped)
    if f.shape != w.shape:
        raise ValueError(f"Fixed {f.shape} and warped {w.shape} differ in shape")
    if isinstance(masks, LabelMask):
        masks = [masks]

    gray = to_gray(0.5 * (take_slice(f, axis, slice_index) + take_slice(w, axis, slice_index)))
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    for mask in masks:
        if mask.shape != f.shape:
            raise ValueError(f"Mask shape {mask.shape} differs from volume shape {f.shape}")
        labels = take_slice(mask.data, axis, slice_index)
        for label, color in ORGAN_COLORS.items():
            region = labels == label
            if region.any():
                rgb[label_contour(region)] = color

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path, format="PNG")
    return path


def export_stage_overlays(outputs: StageOutputs, axis: int, path: Path, slice_index: Optional[int] = None) -> Path:
    """
    Strip of the per-stage warped moving images, coarse to fine, each upsampled to
    full resolution, followed by the fixed image.
    """
    shape = tuple(outputs.pooled_fixed[0].shape[2:])
    if slice_index is None:
        slice_index = shape[axis] // 2

    panels = []
    for warped in outputs.warped_per_stage:
        full = upsample_features(warped[:1].detach().float(), shape)
        panels.append(to_gray(take_slice(full[0, 0].cpu().numpy(), axis, slice_index)))
    panels.append(to_gray(take_slice(outputs.pooled_fixed[0][0, 0].detach().cpu().numpy(), axis, slice_index)))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.hstack(panels)).save(path, format="PNG")
    return path


def benchmark_runtime(
    model: RegistrationNet,
    shape: Optional[Sequence[int]] = None,
    repeats: int = 10,
    warmup: int = 2,
    seed: int = 0,
) -> RuntimeReport:
    """Inference time of forward passes on random inputs; model construction is not timed."""
    if repeats < 1 or warmup < 0:
        raise ValueError(f"Need repeats >= 1 and warmup >= 0, got {repeats}, {warmup}")
    shape = tuple(shape) if shape is not None else model.config.in_shape
    device = next(model.parameters()).device

    generator = torch.Generator().manual_seed(seed)
    fixed = (torch.rand((1, 1, *shape), generator=generator) * 2 - 1).to(device)
    moving = (torch.rand((1, 1, *shape), generator=generator) * 2 - 1).to(device)

    model.eval()
    timings = []
    with torch.no_grad():
        for k in range(warmup + repeats):
            synchronize(device)
            start = time.perf_counter()
            model(fixed, moving)
            synchronize(device)
            if k >= warmup:
                timings.append(time.perf_counter() - start)

    return RuntimeReport(shape, repeats, sum(timings) / len(timings), min(timings), timings)
