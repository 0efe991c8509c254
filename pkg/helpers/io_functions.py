"""
Core file functions for volumes, masks and fields.

Two volume formats are understood:
- NIfTI-1 single files (.nii / .nii.gz), read and written through nibabel
- a raw fallback: little-endian payload (.raw) plus a text sidecar (.raw.txt)
  listing shape, spacing, origin and dtype

Fields use the same raw layout with a .field payload and a .field.txt sidecar.
"""

from pathlib import Path
from typing import Dict, Tuple

import nibabel as nib
import numpy as np

RAW_SUFFIX = ".raw"
FIELD_SUFFIX = ".field"
FIELD_CONVENTION = "normalized-displacement"
RAW_DTYPES = {"float32": "<f4", "int16": "<i2"}


class VolumeFormatError(ValueError):
    """Raised when a volume file cannot be decoded; `field` names the culprit."""

    def __init__(self, message: str, field: str = ""):
        super().__init__(message)
        self.field = field


def sidecar_path(path: Path) -> Path:
    """Sidecar header next to a raw payload, e.g. ct.raw -> ct.raw.txt."""
    path = Path(path)
    return path.with_name(path.name + ".txt")


def is_nifti(path: Path) -> bool:
    name = Path(path).name.lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def format_triplet(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def write_header(path: Path, entries: Dict[str, str]) -> None:
    """
    Write a sidecar header as `key = value` lines.

    Args:
        path: Path of the payload the header belongs to
        entries: Ordered header entries
    """
    lines = [f"{key} = {value}" for key, value in entries.items()]
    sidecar_path(path).write_text("\n".join(lines) + "\n")


def read_header(path: Path) -> Dict[str, str]:
    """Parse the sidecar header of a raw payload into a dict of strings."""
    header_file = sidecar_path(path)
    if not header_file.exists():
        raise VolumeFormatError(f"Missing header {header_file}", field="header")

    entries = {}
    for number, line in enumerate(header_file.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{header_file}:{number}: expected 'key = value'", field="header")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def parse_numbers(entries: Dict[str, str], key: str, cast=float, count: int = 3) -> Tuple:
    if key not in entries:
        raise VolumeFormatError(f"Header is missing '{key}'", field=key)
    try:
        values = tuple(cast(v) for v in entries[key].replace(",", " ").split())
    except ValueError:
        raise VolumeFormatError(f"Header field '{key}' is not numeric: {entries[key]!r}", field=key)
    if len(values) != count:
        raise VolumeFormatError(
            f"Header field '{key}' needs {count} values, got {len(values)}", field=key
        )
    return values


def read_raw(path: Path) -> Tuple[np.ndarray, Tuple[float, ...], Tuple[float, ...]]:
    """
    Read a raw payload and its sidecar header.

    Args:
        path: Path to the .raw payload

    Returns:
        (data, spacing, origin) with data in the dtype named by the header
    """
    path = Path(path)
    entries = read_header(path)
    shape = parse_numbers(entries, "shape", cast=int)
    spacing = parse_numbers(entries, "spacing")
    origin = parse_numbers(entries, "origin")

    dtype_name = entries.get("dtype", "float32")
    if dtype_name not in RAW_DTYPES:
        raise VolumeFormatError(f"Unsupported dtype {dtype_name!r}", field="dtype")
    if entries.get("byteorder", "little") != "little":
        raise VolumeFormatError("Only little-endian payloads are supported", field="byteorder")

    try:
        payload = path.read_bytes()
    except OSError as e:
        raise VolumeFormatError(f"Cannot read {path}: {e}", field="payload")

    dtype = np.dtype(RAW_DTYPES[dtype_name])
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path} holds {len(payload)} bytes, header shape {shape} needs {expected}",
            field="payload",
        )

    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return data.astype(dtype.newbyteorder("="), copy=True), spacing, origin


def write_raw(path: Path, data: np.ndarray, spacing, origin, dtype_name: str = "float32") -> None:
    """
    Write a raw payload plus sidecar. The payload bytes are exactly the little-endian array.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.ascontiguousarray(data, dtype=RAW_DTYPES[dtype_name])
    path.write_bytes(array.tobytes())
    write_header(path, {
        "shape": " ".join(str(n) for n in array.shape),
        "spacing": format_triplet(spacing),
        "origin": format_triplet(origin),
        "dtype": dtype_name,
        "byteorder": "little",
    })


def read_nifti(path: Path, integer: bool = False):
    """
    Read a NIfTI-1 file.

    Args:
        path: Path to the .nii/.nii.gz file
        integer: Return the stored integers (masks) instead of scaled floats

    Returns:
        (data, spacing, origin)
    """
    try:
        image = nib.load(str(path))
    except Exception as e:
        raise VolumeFormatError(f"Cannot read {path}: {e}", field="payload")

    if len(image.shape) != 3:
        raise VolumeFormatError(
            f"{path} holds a {len(image.shape)}D payload, expected 3D", field="dim"
        )

    if integer:
        data = np.asanyarray(image.dataobj)
    else:
        data = image.get_fdata(dtype=np.float32)
    spacing = tuple(float(z) for z in image.header.get_zooms()[:3])
    origin = tuple(float(o) for o in image.affine[:3, 3])
    return data, spacing, origin


def write_nifti(path: Path, data: np.ndarray, spacing, origin) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    affine = np.diag(list(spacing) + [1.0])
    affine[:3, 3] = origin
    image = nib.Nifti1Image(np.asarray(data), affine)
    image.header.set_zooms(tuple(spacing))
    nib.save(image, str(path))


def read_field_payload(path: Path) -> np.ndarray:
    """Read a (3, D, H, W) float32 field written by `write_field_payload`."""
    path = Path(path)
    entries = read_header(path)
    if entries.get("convention") != FIELD_CONVENTION:
        raise VolumeFormatError(
            f"{path} is not a {FIELD_CONVENTION} field", field="convention"
        )
    shape = parse_numbers(entries, "shape", cast=int, count=4)
    if shape[0] != 3:
        raise VolumeFormatError(f"Field needs 3 channels, header says {shape[0]}", field="shape")

    try:
        payload = path.read_bytes()
    except OSError as e:
        raise VolumeFormatError(f"Cannot read {path}: {e}", field="payload")
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path} holds {len(payload)} bytes, header shape {shape} needs {expected}",
            field="payload",
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def write_field_payload(path: Path, data: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.ascontiguousarray(data, dtype="<f4")
    path.write_bytes(array.tobytes())
    write_header(path, {
        "shape": " ".join(str(n) for n in array.shape),
        "convention": FIELD_CONVENTION,
        "dtype": "float32",
        "byteorder": "little",
    })
