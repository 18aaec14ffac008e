"""Procedural pan-tumor phantom generation.

Each case is a CT-like volume containing 1-3 organ ellipsoids at fixed
characteristic intensities plus one tumor drawn from a per-class recipe: a
sphere whose radius is modulated by a smooth random field (the modulation
amplitude and frequency encode the recipe's shape style), stretched
per-axis, intensity-offset against its host organ, blurred, and drenched in
Gaussian noise. Labels stay crisp: they are painted before the blur and
never touched by it.

Determinism: everything about case i of a dataset comes from the single
counter-based stream keyed by (dataset_seed, i); see mstp.rng. The draw
order (class, organ presence, organ geometry in ascending organ id, tumor
geometry, global noise) is part of the format, so regenerating a case from
the same pair is byte-identical.

The default class recipes are built to make the conditioning pathways
matter without starving any class of signal: class 1 (liver) and class 2
(kidney) tumors land in the same absolute intensity range, so appearance
alone cannot tell them apart and host context or prompts must; class 3 is
rare and small but owns a brighter band over its own host (lung). Hosts are
distinct per class - organ layout is class-discriminative, the same
alignment of lesion categories with anatomical sites that the conditioning
mechanisms assume - while the 1-vs-2 intensity collision keeps the
benchmark from being solvable by intensity thresholds.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Dict, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .. import rng as rng_mod
from ..errors import ContractError, GenerationError
from .volumes import LabelMap, Volume, tumor_label

log = logging.getLogger(__name__)

ORGAN_IDS = (1, 2, 3)
ORGAN_NAMES = {1: "liver", 2: "kidney", 3: "lung"}
ORGAN_INTENSITY = {1: 0.4, 2: 0.1, 3: -0.2}
BACKGROUND_INTENSITY = -0.6
NOISE_SIGMA = 0.05
BLUR_SIGMA = 1.0

# anchor position of each organ centre, as a fraction of the volume extents
_ORGAN_ANCHOR = {1: (0.32, 0.34, 0.36), 2: (0.68, 0.62, 0.40), 3: (0.42, 0.66, 0.68)}
_ORGAN_AXIS_RANGE = (0.125, 0.185)  # semi-axes as a fraction of the smallest extent
_ANCHOR_JITTER_VOX = 2.0
_EXTRA_ORGAN_PROB = 0.5

# radius-modulation (amplitude, control-grid resolution) per shape style
SHAPE_STYLES: Dict[str, Tuple[float, int]] = {
    "spheroid": (0.06, 4),
    "lobulated": (0.28, 4),
    "infiltrative": (0.50, 8),
}
EDGE_STYLES = ("smooth", "irregular")
_EDGE_AMP = 0.12
_EDGE_GRID = 10


@dataclasses.dataclass(frozen=True)
class TumorRecipe:
    """Everything needed to synthesise (and describe) one tumor class."""

    class_id: int
    name: str
    host_organ: int
    size_range: Tuple[float, float]          # base radius bounds, voxels
    shape: str
    edge: str
    intensity_offset: Tuple[float, float]    # added to the host organ intensity
    frequency: float                         # sampling weight within a dataset

    def __post_init__(self):
        if self.class_id < 1:
            raise ContractError(f"class_id must be >= 1, got {self.class_id}")
        if self.host_organ not in ORGAN_IDS:
            raise ContractError(f"unknown host organ {self.host_organ}")
        if self.shape not in SHAPE_STYLES:
            raise ContractError(f"unknown shape style {self.shape!r}")
        if self.edge not in EDGE_STYLES:
            raise ContractError(f"unknown edge style {self.edge!r}")
        lo, hi = self.size_range
        if not (2.0 <= lo <= hi):
            raise ContractError(f"size_range must satisfy 2 <= lo <= hi, got {self.size_range}")
        if not (0.0 < self.frequency <= 1.0):
            raise ContractError(f"frequency must lie in (0, 1], got {self.frequency}")


def default_recipes() -> Tuple[TumorRecipe, ...]:
    return (
        TumorRecipe(1, "liver tumor", 1, (3.0, 6.5), "spheroid", "smooth", (0.15, 0.30), 0.5),
        TumorRecipe(2, "kidney tumor", 2, (3.0, 6.5), "lobulated", "irregular", (0.45, 0.60), 0.3),
        TumorRecipe(3, "lung lesion", 3, (2.5, 5.5), "infiltrative", "smooth", (0.95, 1.15), 0.2),
    )


def validate_recipes(recipes: Sequence[TumorRecipe]) -> None:
    if not recipes:
        raise ContractError("at least one tumor recipe is required")
    ids = [r.class_id for r in recipes]
    if len(set(ids)) != len(ids):
        raise ContractError(f"duplicate class ids in recipes: {sorted(ids)}")
    total = sum(r.frequency for r in recipes)
    if abs(total - 1.0) > 1e-6:
        raise ContractError(f"recipe frequencies must sum to 1, got {total}")


_BLUR_KERNEL = None


def _blur_kernel() -> np.ndarray:
    global _BLUR_KERNEL
    if _BLUR_KERNEL is None:
        offsets = np.arange(-3, 4, dtype=np.float64)
        k = np.exp(-0.5 * (offsets / BLUR_SIGMA) ** 2)
        _BLUR_KERNEL = (k / k.sum()).astype(np.float32)
    return _BLUR_KERNEL


def _gaussian_blur(grid: np.ndarray) -> np.ndarray:
    out = grid
    for axis in range(3):
        out = ndimage.convolve1d(out, _blur_kernel(), axis=axis, mode="nearest")
    return out


def _ellipsoid_mask(extents, center, semi_axes) -> np.ndarray:
    zz, yy, xx = np.ogrid[: extents[0], : extents[1], : extents[2]]
    d2 = (
        ((zz - center[0]) / semi_axes[0]) ** 2
        + ((yy - center[1]) / semi_axes[1]) ** 2
        + ((xx - center[2]) / semi_axes[2]) ** 2
    )
    return d2 <= 1.0


def _smooth_field(rng, grid_n: int, shape) -> np.ndarray:
    """Standard-normal control grid, trilinearly stretched over `shape`."""
    control = rng.standard_normal((grid_n,) * 3)
    coords = [
        np.linspace(0.0, grid_n - 1.0, n) if n > 1 else np.zeros(1) for n in shape
    ]
    mesh = np.meshgrid(*coords, indexing="ij")
    return ndimage.map_coordinates(control, mesh, order=1, mode="nearest")


_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def generate_case(
    dataset_seed: int,
    case_index: int,
    recipes: Sequence[TumorRecipe],
    extents: Tuple[int, int, int] = (48, 48, 48),
    spacing_mm: Tuple[float, float, float] = (1.5, 1.5, 1.5),
):
    """Synthesise one case; returns (Volume, LabelMap, class_id)."""
    validate_recipes(recipes)
    extents = tuple(int(n) for n in extents)
    if min(extents) < 32:
        raise ContractError(f"extents must be at least 32 voxels per axis, got {extents}")

    stream = rng_mod.case_stream(dataset_seed, case_index)
    min_ext = min(extents)

    # 1. tumor class
    u = stream.random()
    acc = 0.0
    recipe = recipes[-1]
    for r in recipes:
        acc += r.frequency
        if u < acc:
            recipe = r
            break

    # 2. which organs exist (host always, others by coin flip)
    present = []
    for oid in ORGAN_IDS:
        if oid == recipe.host_organ:
            present.append(oid)
        elif stream.random() < _EXTRA_ORGAN_PROB:
            present.append(oid)
    present.sort()

    # 3. organ geometry, ascending id so later organs overwrite earlier ones
    # in the rare case their jittered ellipsoids touch
    canvas = np.full(extents, BACKGROUND_INTENSITY, dtype=np.float32)
    labels = np.zeros(extents, dtype=np.uint8)
    organ_geometry = {}
    for oid in present:
        anchor = np.array(_ORGAN_ANCHOR[oid]) * np.array(extents)
        center = anchor + stream.uniform(-_ANCHOR_JITTER_VOX, _ANCHOR_JITTER_VOX, 3)
        axes = stream.uniform(_ORGAN_AXIS_RANGE[0], _ORGAN_AXIS_RANGE[1], 3) * min_ext
        organ_geometry[oid] = (center, axes)
        mask = _ellipsoid_mask(extents, center, axes)
        canvas[mask] = ORGAN_INTENSITY[oid]
        labels[mask] = oid

    # 4. tumor geometry
    host_center, host_axes = organ_geometry[recipe.host_organ]
    if recipe.size_range[0] >= host_axes.min():
        raise GenerationError(
            f"class {recipe.class_id}: minimum tumor radius {recipe.size_range[0]} does not fit "
            f"inside host organ {ORGAN_NAMES[recipe.host_organ]} (smallest semi-axis {host_axes.min():.2f})"
        )
    center = host_center + stream.uniform(-0.45, 0.45, 3) * host_axes
    stretch = (
        stream.uniform(0.80, 1.25, 3)
        if recipe.shape == "spheroid"
        else stream.uniform(0.90, 1.10, 3)
    )
    radius = stream.uniform(*recipe.size_range)

    margin = recipe.size_range[1] * float(stretch.max()) + 3.0
    lo = np.maximum(np.floor(center - margin).astype(int), 0)
    hi = np.minimum(np.ceil(center + margin).astype(int) + 1, extents)
    box = tuple(slice(a, b) for a, b in zip(lo, hi))
    box_shape = tuple(int(b - a) for a, b in zip(lo, hi))

    amp, grid_n = SHAPE_STYLES[recipe.shape]
    field = amp * _smooth_field(stream, grid_n, box_shape)
    if recipe.edge == "irregular":
        field = field + _EDGE_AMP * _smooth_field(stream, _EDGE_GRID, box_shape)
    rho = np.clip(radius * (1.0 + field), recipe.size_range[0], recipe.size_range[1])

    zz, yy, xx = np.ogrid[box[0], box[1], box[2]]
    dist = np.sqrt(
        ((zz - center[0]) / stretch[0]) ** 2
        + ((yy - center[1]) / stretch[1]) ** 2
        + ((xx - center[2]) / stretch[2]) ** 2
    )
    inside = dist <= rho

    # keep only the 6-connected component that contains the tumor centre
    comp, n_comp = ndimage.label(inside, structure=_SIX_CONNECTED)
    center_vox = tuple(int(round(c)) - int(o) for c, o in zip(center, lo))
    if not inside[center_vox]:
        raise GenerationError(f"case {case_index}: tumor centre fell outside its own mask")
    if n_comp > 1:
        inside = comp == comp[center_vox]

    offset = stream.uniform(*recipe.intensity_offset)
    tumor_value = ORGAN_INTENSITY[recipe.host_organ] + offset
    canvas_box = canvas[box]
    canvas_box[inside] = tumor_value
    labels_box = labels[box]
    labels_box[inside] = tumor_label(recipe.class_id)

    # 5. partial-volume blur and acquisition noise; labels stay crisp
    blurred = _gaussian_blur(canvas)
    noisy = blurred + stream.normal(0.0, NOISE_SIGMA, extents).astype(np.float32)
    final = np.clip(noisy, -1.0, 1.0).astype(np.float32)

    legend = {0: "background"}
    for oid in present:
        legend[oid] = f"organ.{ORGAN_NAMES[oid]}"
    legend[tumor_label(recipe.class_id)] = f"tumor.{recipe.class_id}"

    vol = Volume(final, spacing_mm)
    lbl = LabelMap(labels, legend, spacing_mm)
    return vol, lbl, recipe.class_id
