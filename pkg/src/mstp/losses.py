"""Training objective: soft Dice over tumor channels plus proposal CE.

The segmentation target has one channel per tumor class and a background
channel; organ voxels count as background (organs are context, not targets).
The epsilon in the Dice ratio makes absent-class channels contribute zero
loss when the network correctly predicts no mass there.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .data.volumes import TUMOR_LABEL_BASE
from .errors import ContractError, RegistryError

DICE_EPS = 1e-5


def one_hot_target(label_grid: np.ndarray, n_classes: int) -> np.ndarray:
    """(D, H, W) uint8 labels -> (n_classes, D, H, W) float32 target.

    Channel c >= 1 marks voxels of tumor class c; channel 0 is everything
    else (true background and organ interiors alike).
    """
    if label_grid.ndim != 3:
        raise ContractError(f"label grid must be 3-D, got {label_grid.shape}")
    out = np.zeros((n_classes,) + label_grid.shape, dtype=np.float32)
    fg = np.zeros(label_grid.shape, dtype=bool)
    for c in range(1, n_classes):
        mask = label_grid == TUMOR_LABEL_BASE + c
        out[c] = mask
        fg |= mask
    out[0] = ~fg
    return out


def batch_targets(label_grids: Sequence[np.ndarray], n_classes: int) -> np.ndarray:
    return np.stack([one_hot_target(g, n_classes) for g in label_grids])


def dice_loss(logits: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - mean soft Dice over the foreground channels of a batch.

    `logits` is (B, C, D, H, W); `target` a matching one-hot array. Statistics
    pool over the batch, so a class absent from every sample contributes
    (eps / eps) = 1 to the mean, i.e. zero loss.
    """
    if logits.shape != target.shape:
        raise ContractError(f"logits {logits.shape} vs target {target.shape}")
    n_classes = logits.shape[1]
    if n_classes < 2:
        raise ContractError("need at least one foreground channel")
    reduce_axes = (0, 2, 3, 4)
    dt = logits.data.dtype  # constants must follow the input precision
    probs = ops.softmax(logits, axis=1)
    t = Tensor(target.astype(dt, copy=False))
    inter = ops.sum(probs * t, axis=reduce_axes)          # (C,)
    psum = ops.sum(probs, axis=reduce_axes)
    tsum = target.sum(axis=reduce_axes, dtype=np.float64).astype(dt)
    dice = ops.div(inter * 2.0 + Tensor(float(eps), dtype=dt),
                   ops.add(psum, Tensor(tsum + np.asarray(eps, dt))))
    fg = ops.slice_rows(dice.reshape(-1, 1), 1, n_classes)
    return ops.add(Tensor(1.0, dtype=dt), ops.neg(ops.mean(fg)))


def proposal_ce(thetas: Sequence[Tensor], class_ids: Sequence[int]) -> Tensor:
    """Mean cross-entropy of per-sample proposal logits against class ids."""
    if len(thetas) != len(class_ids):
        raise ContractError("one proposal logit vector per sample is required")
    n = thetas[0].shape[0]
    total = None
    for theta, cid in zip(thetas, class_ids):
        c = int(cid)
        if not 0 <= c < n:
            raise RegistryError(f"class id {c} has no proposal channel (n={n})")
        term = ops.cross_entropy_logits(theta, c)
        total = term if total is None else ops.add(total, term)
    return ops.mul(total, Tensor(1.0 / len(thetas), dtype=total.data.dtype))


def ce_targets(label_grids: Sequence[np.ndarray], class_ids: Sequence[int]) -> List[int]:
    """Proposal targets: the sample's class when its patch holds tumor voxels,
    else background (0) — random patches regularly miss the lesion."""
    out = []
    for grid, cid in zip(label_grids, class_ids):
        has_tumor = bool((grid == TUMOR_LABEL_BASE + int(cid)).any())
        out.append(int(cid) if has_tumor else 0)
    return out


def total_loss(logits: Tensor, target: np.ndarray,
               thetas: Optional[Sequence[Tensor]],
               proposal_targets: Optional[Sequence[int]],
               lambda_ce: float = 1.0):
    """Returns (total, dice_component, ce_component_or_None)."""
    d = dice_loss(logits, target)
    if not thetas:
        return d, d, None
    ce = proposal_ce(thetas, proposal_targets)
    scale = Tensor(float(lambda_ce), dtype=d.data.dtype)
    return ops.add(d, ops.mul(ce, scale)), d, ce
