"""
Step 4 along the pipeline.
Stage-wise coarse-to-fine training with Adam, checkpoints and deterministic replay.

Steps:
1. Build the model and optimizer (or restore them from a checkpoint)
2. For every step, enable the loss terms of the stages the schedule has reached
3. Update, record the LossReport, checkpoint periodically
4. Write the final checkpoint and the loss history
"""

import csv
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from data import Volume
from helpers.runtime import resolve_device, seed_everything
from losses import LossReport, LossWeights, total_loss
from network import NUM_LEVELS, NetworkConfig, RegistrationNet

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "refinereg-checkpoint"
CHECKPOINT_VERSION = 1
NUM_STAGES = NUM_LEVELS + 1

Schedule = List[Tuple[Tuple[int, ...], int]]


class CheckpointError(ValueError):
    """A checkpoint cannot be read or does not fit; `key` names the culprit."""

    def __init__(self, message: str, key: str = ""):
        super().__init__(message)
        self.key = key


class TrainingDiverged(RuntimeError):
    """The loss went non-finite; the parameters from before the step are retained."""

    def __init__(self, step: int, checkpoint: "Checkpoint", path: Optional[Path] = None):
        where = f", last good checkpoint at {path}" if path else ""
        super().__init__(f"Loss diverged at step {step}{where}")
        self.step = step
        self.checkpoint = checkpoint
        self.path = path


def stage_schedule_default(num_stages: int, block_steps: int = 100, final_steps: int = 0) -> Schedule:
    """
    Coarsest stage alone for one block, then add one finer stage per block.

    Args:
        num_stages: Number of loss stages
        block_steps: Steps per block
        final_steps: Extra steps appended to the last block (all stages active)

    Returns:
        List of (active stage indices, steps)
    """
    if num_stages < 1:
        raise ValueError(f"num_stages must be >= 1, got {num_stages}")
    if block_steps < 1:
        raise ValueError(f"block_steps must be >= 1, got {block_steps}")
    schedule = [(tuple(range(k)), block_steps) for k in range(1, num_stages + 1)]
    if final_steps:
        active, steps = schedule[-1]
        schedule[-1] = (active, steps + final_steps)
    return schedule


def validate_schedule(schedule: Schedule, num_stages: int = NUM_STAGES) -> None:
    """Every block activates a coarse-to-fine prefix of stages, never shrinking it."""
    if not schedule:
        raise ValueError("Stage schedule is empty")
    previous = 0
    for active, steps in schedule:
        active = tuple(active)
        if steps < 1:
            raise ValueError(f"Schedule block {active} has {steps} steps")
        if not active or active != tuple(range(len(active))):
            raise ValueError(f"Schedule block {active} must activate stages 0..k coarse to fine")
        if len(active) < previous:
            raise ValueError(f"Schedule deactivates stages at block {active}")
        if len(active) > num_stages:
            raise ValueError(f"Schedule block {active} names more than {num_stages} stages")
        previous = len(active)


def schedule_length(schedule: Schedule) -> int:
    return sum(steps for _, steps in schedule)


def active_stages_at(schedule: Schedule, step: int) -> Tuple[int, ...]:
    """Active stages at `step`; past the end the last block stays active."""
    boundary = 0
    for active, steps in schedule:
        boundary += steps
        if step < boundary:
            return tuple(active)
    return tuple(schedule[-1][0])


@dataclass
class TrainConfig:
    """Optimization settings. The ablation switches live in `network` and `weights`."""

    learning_rate: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    stage_schedule: Optional[Schedule] = None
    steps_per_stage: int = 100
    final_steps: int = 0
    batch_size: int = 1
    accumulation_steps: int = 1
    seed: int = 0
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    smooth_norm: str = "l1"
    checkpoint_every: int = 0
    log_every: int = 10
    device: str = "cpu"
    progress: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.accumulation_steps < 1:
            raise ValueError("batch_size and accumulation_steps must be >= 1")
        if self.smooth_norm not in ("l1", "l2"):
            raise ValueError(f"smooth_norm must be 'l1' or 'l2', got {self.smooth_norm!r}")
        self.adam_betas = tuple(self.adam_betas)
        if self.stage_schedule is None:
            self.stage_schedule = stage_schedule_default(NUM_STAGES, self.steps_per_stage, self.final_steps)
        self.stage_schedule = [(tuple(int(s) for s in active), int(steps)) for active, steps in self.stage_schedule]
        validate_schedule(self.stage_schedule)

    @property
    def total_steps(self) -> int:
        return schedule_length(self.stage_schedule)

    def config_hash(self) -> str:
        """SHA-256 of the settings that influence the trained parameters."""
        settings = asdict(self)
        for runtime_only in ("device", "progress", "log_every", "checkpoint_every"):
            settings.pop(runtime_only)
        canonical = json.dumps(settings, sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class Checkpoint:
    network: NetworkConfig
    model_state: Dict[str, torch.Tensor]
    optimizer_state: Dict
    step: int
    config_hash: str
    history: List[Dict[str, float]] = field(default_factory=list)


@dataclass
class TrainResult:
    model: RegistrationNet
    checkpoint: Checkpoint
    history: List[Dict[str, float]]


def to_cpu(obj):
    """Detached cpu copies of every tensor inside nested dicts/lists."""
    if isinstance(obj, torch.Tensor):
        return obj.detach().cpu().clone()
    if isinstance(obj, dict):
        return {k: to_cpu(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(to_cpu(v) for v in obj)
    return obj


def canonical_payload(obj):
    """
    Fresh containers with interned strings. Pickle memoizes by object identity,
    so equal payloads only serialize to equal bytes once sharing follows the values.
    """
    if type(obj) is str:
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {canonical_payload(k): canonical_payload(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(canonical_payload(v) for v in obj)
    return obj


def make_checkpoint(model: RegistrationNet, optimizer: torch.optim.Optimizer, step: int, config_hash: str, history) -> Checkpoint:
    return Checkpoint(
        network=model.config,
        model_state=to_cpu(model.state_dict()),
        optimizer_state=to_cpu(optimizer.state_dict()),
        step=step,
        config_hash=config_hash,
        history=[dict(record) for record in history],
    )


def save_checkpoint(ckpt: Checkpoint, path: Path) -> Path:
    """
    Serialize a checkpoint. Content is written through a memory buffer so the
    bytes depend only on the checkpoint, not on the file name.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "network": ckpt.network.to_dict(),
        "model": dict(ckpt.model_state),
        "optimizer": ckpt.optimizer_state,
        "step": int(ckpt.step),
        "config_hash": ckpt.config_hash,
        "history": ckpt.history,
    }
    buffer = io.BytesIO()
    torch.save(canonical_payload(payload), buffer)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buffer.getvalue())
    return path


def check_model_state(expected: Dict[str, torch.Tensor], found: Dict[str, torch.Tensor]) -> None:
    for key in expected:
        if key not in found:
            raise CheckpointError(f"Checkpoint is missing parameter '{key}'", key=key)
    for key in found:
        if key not in expected:
            raise CheckpointError(f"Checkpoint holds unexpected parameter '{key}'", key=key)
        if tuple(found[key].shape) != tuple(expected[key].shape):
            raise CheckpointError(
                f"Parameter '{key}' has shape {tuple(found[key].shape)}, model needs {tuple(expected[key].shape)}",
                key=key,
            )


def load_checkpoint(path: Path) -> Checkpoint:
    """
    Read and validate a checkpoint against the architecture it declares.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    try:
        payload = torch.load(io.BytesIO(raw), map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"{path} is not a readable checkpoint: {e}")

    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file", key="format")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has version {payload.get('version')}, expected {CHECKPOINT_VERSION}", key="version"
        )
    for key in ("network", "model", "optimizer", "step", "config_hash", "history"):
        if key not in payload:
            raise CheckpointError(f"{path} is missing '{key}'", key=key)

    try:
        network = NetworkConfig(**payload["network"])
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{path} holds an invalid network config: {e}", key="network")

    check_model_state(RegistrationNet(network).state_dict(), payload["model"])
    return Checkpoint(
        network=network,
        model_state=payload["model"],
        optimizer_state=payload["optimizer"],
        step=int(payload["step"]),
        config_hash=payload["config_hash"],
        history=list(payload["history"]),
    )


def checkpoint_model(ckpt: Checkpoint, device=None) -> RegistrationNet:
    """Rebuild the model stored in a checkpoint, in eval mode."""
    model = RegistrationNet(ckpt.network)
    model.load_state_dict(ckpt.model_state)
    if device is not None:
        model.to(device)
    return model.eval()


def as_input(x: Union[Volume, torch.Tensor]) -> torch.Tensor:
    """(1, 1, D, H, W) float32 tensor from a Volume or tensor."""
    if isinstance(x, Volume):
        return x.to_tensor()
    if x.dim() == 3:
        x = x[None, None]
    if x.dim() != 5 or x.shape[0] != 1 or x.shape[1] != 1:
        raise ValueError(f"Training inputs need shape (1, 1, D, H, W), got {tuple(x.shape)}")
    return x.float()


@lru_cache(maxsize=64)
def epoch_permutation(seed: int, count: int, epoch: int) -> Tuple[int, ...]:
    return tuple(np.random.default_rng([seed, epoch]).permutation(count).tolist())


def sample_indices(seed: int, count: int, start: int, size: int) -> List[int]:
    """
    Pair indices for sample positions start .. start + size - 1. Each epoch is a
    seeded permutation, so the stream depends only on (seed, position).
    """
    indices = []
    for position in range(start, start + size):
        epoch, offset = divmod(position, count)
        indices.append(epoch_permutation(seed, count, epoch)[offset])
    return indices


def write_history_csv(history: Sequence[Dict[str, float]], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnames = list(history[0].keys()) if history else ["step", "total"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(history)


def train(
    config: TrainConfig,
    pairs: Sequence[Tuple[Union[Volume, torch.Tensor], Union[Volume, torch.Tensor]]],
    out_dir: Optional[Path] = None,
    resume_from: Optional[Union[Path, Checkpoint]] = None,
    stop_at: Optional[int] = None,
) -> TrainResult:
    """
    Train a fresh (or resumed) model on (fixed, moving) pairs.

    Args:
        config: Training settings
        pairs: Non-empty sequence of (fixed, moving) volumes at network input shape
        out_dir: Where checkpoint.pt and loss_history.csv go; nothing is written when None
        resume_from: Checkpoint (or its path) to continue from
        stop_at: Stop after this many completed steps instead of the end of the schedule

    Returns:
        TrainResult with the model, final checkpoint and per-step loss history
    """
    if not pairs:
        raise ValueError("train needs at least one pair")

    device = resolve_device(config.device)
    seed_everything(config.seed)
    fixed_all = [as_input(f) for f, _ in pairs]
    moving_all = [as_input(m) for _, m in pairs]

    model = RegistrationNet(config.network).to(device)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=config.adam_betas, eps=config.adam_eps
    )
    config_hash = config.config_hash()
    history: List[Dict[str, float]] = []
    start = 0

    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
        if ckpt.network != config.network:
            raise CheckpointError("Checkpoint network differs from the training config", key="network")
        if ckpt.config_hash != config_hash:
            logger.warning("Resuming with settings that differ from the checkpoint's")
        model.load_state_dict(ckpt.model_state)
        optimizer.load_state_dict(ckpt.optimizer_state)
        start = ckpt.step
        history = list(ckpt.history)
        logger.info("Resumed at step %d", start)

    out_dir = Path(out_dir) if out_dir is not None else None
    end = config.total_steps if stop_at is None else min(stop_at, config.total_steps)
    steps = range(start, end)
    if config.progress:
        steps = tqdm(steps, desc="train", initial=start, total=end)

    model.train()
    previous_active = None
    for step in steps:
        active = active_stages_at(config.stage_schedule, step)
        if active != previous_active:
            logger.info("Step %d: stages %s active", step, active)
            previous_active = active

        optimizer.zero_grad(set_to_none=True)
        reports = []
        for micro in range(config.accumulation_steps):
            position = (step * config.accumulation_steps + micro) * config.batch_size
            indices = sample_indices(config.seed, len(pairs), position, config.batch_size)
            fixed = torch.cat([fixed_all[i] for i in indices]).to(device)
            moving = torch.cat([moving_all[i] for i in indices]).to(device)

            outputs = model(fixed, moving)
            report = total_loss(
                outputs.stage_fixed, outputs.warped_per_stage, outputs.fields,
                config.weights, active, config.smooth_norm,
            )
            if not math.isfinite(report.total):
                last_good = make_checkpoint(model, optimizer, step, config_hash, history)
                path = save_checkpoint(last_good, out_dir / "last_good.pt") if out_dir else None
                logger.error("Non-finite loss at step %d: %s", step, report.format_line(step))
                raise TrainingDiverged(step, last_good, path)

            (report.objective / config.accumulation_steps).backward()
            reports.append(report)

        optimizer.step()
        report = reports[0] if len(reports) == 1 else LossReport.mean(reports)
        history.append(report.as_record(step))
        if config.log_every and step % config.log_every == 0:
            logger.info(report.format_line(step))

        if out_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(make_checkpoint(model, optimizer, step + 1, config_hash, history), out_dir / "checkpoint.pt")
            logger.info("Checkpoint written at step %d", step + 1)

    checkpoint = make_checkpoint(model, optimizer, max(end, start), config_hash, history)
    if out_dir:
        save_checkpoint(checkpoint, out_dir / "checkpoint.pt")
        write_history_csv(history, out_dir / "loss_history.csv")
        logger.info("Wrote %s and %s", out_dir / "checkpoint.pt", out_dir / "loss_history.csv")

    model.eval()
    return TrainResult(model, checkpoint, history)
