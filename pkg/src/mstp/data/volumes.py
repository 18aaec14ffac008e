"""In-memory volume types and their on-disk raw+header format.

A volume on disk is a pair of files sharing a base path: `<base>.raw`
(C-order little-endian voxels) and `<base>.hdr` (a short text header):

    MSTPVOL1
    extents=48 48 48
    spacing_mm=1.5 1.5 1.5
    dtype=f32

Label maps use dtype=u8 and may carry one extra `legend=` line mapping label
values to meanings (`0:background 1:organ.liver 11:tumor.1`).
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from ..errors import ContractError, FileFormatError

MAGIC = "MSTPVOL1"

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclasses.dataclass
class Volume:
    """A scalar intensity grid with isotropic-or-not voxel spacing in mm."""

    grid: np.ndarray                     # (D, H, W) float32
    spacing_mm: Tuple[float, float, float]

    def __post_init__(self):
        if self.grid.ndim != 3:
            raise ContractError(f"volume grid must be 3-D, got shape {self.grid.shape}")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ContractError(f"spacing must be three positive numbers, got {self.spacing_mm}")
        self.grid = np.ascontiguousarray(self.grid, dtype=np.float32)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)


@dataclasses.dataclass
class LabelMap:
    """Integer label grid plus a legend describing each label value."""

    grid: np.ndarray                     # (D, H, W) uint8
    legend: Dict[int, str]
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.grid.ndim != 3:
            raise ContractError(f"label grid must be 3-D, got shape {self.grid.shape}")
        self.grid = np.ascontiguousarray(self.grid, dtype=np.uint8)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)

    def tumor_mask(self) -> np.ndarray:
        return self.grid >= TUMOR_LABEL_BASE

    def tumor_class(self) -> int:
        """The tumor class present in this map, or 0 if none."""
        vals = np.unique(self.grid[self.grid >= TUMOR_LABEL_BASE])
        return int(vals[0]) - TUMOR_LABEL_BASE if vals.size else 0


TUMOR_LABEL_BASE = 10  # tumor voxels are labelled TUMOR_LABEL_BASE + class_id


def tumor_label(class_id: int) -> int:
    return TUMOR_LABEL_BASE + int(class_id)


def _fmt_floats(values) -> str:
    return " ".join(format(float(v), ".6g") for v in values)


def _write_pair(base: Path, grid: np.ndarray, spacing, dtype_tag: str, legend=None) -> None:
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        MAGIC,
        "extents=" + " ".join(str(n) for n in grid.shape),
        "spacing_mm=" + _fmt_floats(spacing),
        "dtype=" + dtype_tag,
    ]
    if legend:
        pairs = " ".join(f"{k}:{legend[k]}" for k in sorted(legend))
        lines.append("legend=" + pairs)
    base.with_suffix(".hdr").write_text("\n".join(lines) + "\n")
    np.ascontiguousarray(grid, dtype=_DTYPES[dtype_tag]).tofile(base.with_suffix(".raw"))


def write_volume(base, volume: Volume) -> None:
    _write_pair(Path(base), volume.grid, volume.spacing_mm, "f32")


def write_labels(base, labels: LabelMap) -> None:
    _write_pair(Path(base), labels.grid, labels.spacing_mm, "u8", legend=labels.legend)


def _read_header(path: Path):
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise FileFormatError(f"missing header file {path}") from None
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != MAGIC:
        raise FileFormatError(f"{path}: bad magic, expected {MAGIC!r}")
    fields = {}
    for ln in lines[1:]:
        if "=" not in ln:
            raise FileFormatError(f"{path}: malformed header line {ln!r}")
        key, value = ln.split("=", 1)
        if key not in ("extents", "spacing_mm", "dtype", "legend"):
            raise FileFormatError(f"{path}: unknown header field {key!r}")
        fields[key] = value
    for required in ("extents", "spacing_mm", "dtype"):
        if required not in fields:
            raise FileFormatError(f"{path}: missing header field {required!r}")
    extents = tuple(int(v) for v in fields["extents"].split())
    spacing = tuple(float(v) for v in fields["spacing_mm"].split())
    if len(extents) != 3 or len(spacing) != 3:
        raise FileFormatError(f"{path}: extents and spacing must have three entries")
    if fields["dtype"] not in _DTYPES:
        raise FileFormatError(f"{path}: unsupported dtype {fields['dtype']!r}")
    legend = {}
    if "legend" in fields:
        for pair in fields["legend"].split():
            label, _, meaning = pair.partition(":")
            legend[int(label)] = meaning
    return extents, spacing, fields["dtype"], legend


def _read_grid(base: Path, expect_tag=None):
    base = Path(base)
    extents, spacing, tag, legend = _read_header(base.with_suffix(".hdr"))
    if expect_tag and tag != expect_tag:
        raise FileFormatError(f"{base}: expected dtype {expect_tag}, header says {tag}")
    raw = np.fromfile(base.with_suffix(".raw"), dtype=_DTYPES[tag])
    expected = int(np.prod(extents))
    if raw.size != expected:
        raise FileFormatError(
            f"{base}: raw payload has {raw.size} voxels, header extents imply {expected}"
        )
    return raw.reshape(extents), spacing, legend


def read_volume(base) -> Volume:
    grid, spacing, _ = _read_grid(base, expect_tag="f32")
    return Volume(grid.astype(np.float32), spacing)


def read_labels(base) -> LabelMap:
    grid, spacing, legend = _read_grid(base, expect_tag="u8")
    return LabelMap(grid, legend or {0: "background"}, spacing)
