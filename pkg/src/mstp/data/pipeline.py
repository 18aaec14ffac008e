"""Volume preprocessing: resampling, patch extraction, augmentation."""

from __future__ import annotations

import logging
from typing import Optional, Tuple

import numpy as np

from ..errors import ContractError
from .volumes import LabelMap, Volume

log = logging.getLogger(__name__)


def _target_extents(extents, spacing, target_mm):
    return tuple(max(1, int(round(n * s / target_mm))) for n, s in zip(extents, spacing))


def _source_coords(out_extents, in_extents, spacing, target_mm):
    """Voxel-centre aligned continuous source indices for each output axis."""
    coords = []
    for n_out, n_in, s in zip(out_extents, in_extents, spacing):
        x = (np.arange(n_out) + 0.5) * (target_mm / s) - 0.5
        coords.append(np.clip(x, 0.0, n_in - 1.0))
    return coords


def resample_isotropic(volume: Volume, target_mm: float) -> Volume:
    """Trilinear resample onto an isotropic grid of `target_mm` spacing."""
    if target_mm <= 0:
        raise ContractError(f"target spacing must be positive, got {target_mm}")
    if all(abs(s - target_mm) < 1e-12 for s in volume.spacing_mm):
        return Volume(volume.grid.copy(), (target_mm,) * 3)
    grid = volume.grid.astype(np.float64)
    out_ext = _target_extents(grid.shape, volume.spacing_mm, target_mm)
    cz, cy, cx = _source_coords(out_ext, grid.shape, volume.spacing_mm, target_mm)

    z0 = np.floor(cz).astype(int)
    y0 = np.floor(cy).astype(int)
    x0 = np.floor(cx).astype(int)
    z1 = np.minimum(z0 + 1, grid.shape[0] - 1)
    y1 = np.minimum(y0 + 1, grid.shape[1] - 1)
    x1 = np.minimum(x0 + 1, grid.shape[2] - 1)
    fz = (cz - z0)[:, None, None]
    fy = (cy - y0)[None, :, None]
    fx = (cx - x0)[None, None, :]

    def gather(zi, yi, xi):
        return grid[np.ix_(zi, yi, xi)]

    out = (
        gather(z0, y0, x0) * (1 - fz) * (1 - fy) * (1 - fx)
        + gather(z1, y0, x0) * fz * (1 - fy) * (1 - fx)
        + gather(z0, y1, x0) * (1 - fz) * fy * (1 - fx)
        + gather(z0, y0, x1) * (1 - fz) * (1 - fy) * fx
        + gather(z1, y1, x0) * fz * fy * (1 - fx)
        + gather(z1, y0, x1) * fz * (1 - fy) * fx
        + gather(z0, y1, x1) * (1 - fz) * fy * fx
        + gather(z1, y1, x1) * fz * fy * fx
    )
    return Volume(out.astype(np.float32), (target_mm,) * 3)


def resample_labels(labels: LabelMap, target_mm: float) -> LabelMap:
    """Nearest-neighbour resample; label values are ids, never interpolated."""
    if target_mm <= 0:
        raise ContractError(f"target spacing must be positive, got {target_mm}")
    if all(abs(s - target_mm) < 1e-12 for s in labels.spacing_mm):
        return LabelMap(labels.grid.copy(), dict(labels.legend), (target_mm,) * 3)
    out_ext = _target_extents(labels.grid.shape, labels.spacing_mm, target_mm)
    coords = _source_coords(out_ext, labels.grid.shape, labels.spacing_mm, target_mm)
    idx = [np.rint(c).astype(int) for c in coords]
    out = labels.grid[np.ix_(*idx)]
    return LabelMap(out, dict(labels.legend), (target_mm,) * 3)


def extract_patch(
    volume: Volume,
    labels: LabelMap,
    extent: int,
    rng: np.random.Generator,
    tumor_prob: float = 0.5,
) -> Tuple[Volume, LabelMap]:
    """Cut a cubic patch, centred on a random tumor voxel with probability
    `tumor_prob` (uniform placement otherwise, or when no tumor exists)."""
    shape = volume.grid.shape
    if labels.grid.shape != shape:
        raise ContractError(f"volume {shape} and labels {labels.grid.shape} disagree")
    if not (0 < extent <= min(shape)):
        raise ContractError(f"patch extent {extent} does not fit volume extents {shape}")

    origin: Optional[np.ndarray] = None
    if rng.random() < tumor_prob:
        coords = np.argwhere(labels.tumor_mask())
        if coords.size:
            center = coords[int(rng.integers(len(coords)))]
            origin = np.clip(center - extent // 2, 0, np.array(shape) - extent)
        else:
            log.debug("tumor-centred patch requested but case has no tumor; sampling uniformly")
    if origin is None:
        origin = np.array([int(rng.integers(0, n - extent + 1)) for n in shape])

    sl = tuple(slice(int(o), int(o) + extent) for o in origin)
    vol = Volume(volume.grid[sl].copy(), volume.spacing_mm)
    lbl = LabelMap(labels.grid[sl].copy(), dict(labels.legend), labels.spacing_mm)
    return vol, lbl


_ROT_PAIRS = ((0, 1), (0, 2), (1, 2))


def augment(volume: Volume, labels: LabelMap, rng: np.random.Generator):
    """Random 90-degree rotation (shared by image and labels) plus a global
    intensity shift drawn from U[-0.1, 0.1] (image only), re-clamped to [-1, 1].
    """
    shape = volume.grid.shape
    if len(set(shape)) != 1:
        raise ContractError(f"rotation augmentation needs a cubic patch, got {shape}")
    pair = _ROT_PAIRS[int(rng.integers(3))]
    k = int(rng.integers(4))
    shift = rng.uniform(-0.1, 0.1)

    img = np.rot90(volume.grid, k, axes=pair)
    lbl = np.rot90(labels.grid, k, axes=pair)
    img = np.clip(img + np.float32(shift), -1.0, 1.0).astype(np.float32)
    return (
        Volume(np.ascontiguousarray(img), volume.spacing_mm),
        LabelMap(np.ascontiguousarray(lbl), dict(labels.legend), labels.spacing_mm),
    )


def tumor_centered_patch(volume: Volume, labels: LabelMap, extent: int):
    """Deterministic patch centred on the tumor centroid (used at evaluation)."""
    shape = volume.grid.shape
    if not (0 < extent <= min(shape)):
        raise ContractError(f"patch extent {extent} does not fit volume extents {shape}")
    mask = labels.tumor_mask()
    if mask.any():
        center = np.argwhere(mask).mean(axis=0)
    else:
        center = (np.array(shape) - 1) / 2.0
    origin = np.clip(np.round(center).astype(int) - extent // 2, 0, np.array(shape) - extent)
    sl = tuple(slice(int(o), int(o) + extent) for o in origin)
    vol = Volume(volume.grid[sl].copy(), volume.spacing_mm)
    lbl = LabelMap(labels.grid[sl].copy(), dict(labels.legend), labels.spacing_mm)
    return vol, lbl
