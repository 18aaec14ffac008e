"""Two-stage training: full pretraining, then parameter-efficient tuning.

Stage one trains the backbone, prompt encoders, fusion and proposal head
while the expert mixtures stay frozen at their identity initialisation.
Stage two freezes all of that and tunes only the experts, routers, fusion
and proposal parameters. Every random choice (epoch order, patch placement,
augmentation) comes from a named counter-based stream, so a rerun with the
same seed reproduces the checkpoint bit for bit.
"""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import rng
from ..autodiff import Tensor, no_grad
from ..config import RunConfig, write_config
from ..data.generator import TumorRecipe, default_recipes
from ..data.manifest import DatasetManifest, load_case, read_manifest
from ..data.pipeline import augment, extract_patch, tumor_centered_patch
from ..data.volumes import LabelMap, TUMOR_LABEL_BASE, Volume
from ..errors import CheckpointError, ConfigError, ContractError
from ..losses import batch_targets, ce_targets, total_loss
from ..metrics import MetricsWriter, dsc, mean_class_dsc
from ..model import SegModel
from ..prompts import one_hot_organs
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import AdamW
from .registry import ParamRegistry

log = logging.getLogger(__name__)

PRETRAIN_CKPT = "pretrain.ckpt"
FINAL_CKPT = "model.ckpt"
METRICS_CSV = "metrics.csv"
CONFIG_ECHO = "config.txt"
SUMMARY_TXT = "summary.txt"

def peft_trainable(name: str, group: str) -> bool:
    """Stage-two predicate: experts, routers, fusion and proposal tune."""
    return group.startswith("dmoe") or group in ("fusion", "proposal")


def pretrain_trainable(name: str, group: str) -> bool:
    return not group.startswith("dmoe")


@dataclasses.dataclass
class LoadedCase:
    index: int
    class_id: int
    volume: Volume
    labels: LabelMap


def load_split(root, manifest: DatasetManifest, split: str) -> List[LoadedCase]:
    cases = []
    for e in manifest.split_entries(split):
        vol, lbl = load_case(root, e)
        cases.append(LoadedCase(e.index, e.class_id, vol, lbl))
    if not cases:
        raise ContractError(f"dataset has no cases in split {split!r}")
    return cases


def build_model(cfg: RunConfig, recipes: Optional[Sequence[TumorRecipe]] = None,
                ) -> Tuple[SegModel, ParamRegistry]:
    model = SegModel(cfg, cfg.seed, recipes=recipes)
    registry = ParamRegistry(model.param_entries())
    return model, registry


def _check_classes(cfg: RunConfig, manifest: DatasetManifest) -> None:
    have = {e.class_id for e in manifest.entries}
    known = set(range(1, cfg.n_classes))
    extra = have - known
    if extra:
        raise ConfigError(
            f"dataset contains class ids {sorted(extra)} outside the configured "
            f"range 1..{cfg.n_classes - 1}")


def _assemble_batch(cases: Sequence[LoadedCase], picks: Sequence[int],
                    cfg: RunConfig, stage: str, epoch: int, step: int,
                    tumor_host: Optional[Dict[int, int]]):
    """Sample, augment and tensorise one batch; returns inputs + targets."""
    vols, grids, cids = [], [], []
    onehots = [] if tumor_host is not None else None
    for slot, ci in enumerate(picks):
        case = cases[ci]
        st = rng.stream("patch", cfg.seed, stage, epoch, step, slot)
        pv, pl = extract_patch(case.volume, case.labels, cfg.patch_extent, st,
                               tumor_prob=cfg.tumor_patch_prob)
        pv, pl = augment(pv, pl, st)
        vols.append(pv.grid[None])
        grids.append(pl.grid)
        cids.append(case.class_id)
        if onehots is not None:
            onehots.append(one_hot_organs(pl, tumor_host))
    x = Tensor(np.stack(vols))
    onehot_t = Tensor(np.stack(onehots)) if onehots is not None else None
    target = batch_targets(grids, cfg.n_classes)
    prop_targets = ce_targets(grids, cids)
    return x, onehot_t, cids, grids, target, prop_targets


def _patch_dsc(logits: np.ndarray, grids: Sequence[np.ndarray],
               cids: Sequence[int]) -> Dict[int, List[float]]:
    """Per-sample Dice of each sample's own class from argmax predictions."""
    pred = np.argmax(logits, axis=1)
    out: Dict[int, List[float]] = {}
    for i, cid in enumerate(cids):
        true = grids[i] == TUMOR_LABEL_BASE + cid
        score = dsc(pred[i] == cid, true)
        out.setdefault(int(cid), []).append(score)
    return out


def train_stage(model: SegModel, registry: ParamRegistry, cases: List[LoadedCase],
                cfg: RunConfig, stage: str, epochs: range,
                writer: Optional[MetricsWriter] = None) -> List[dict]:
    """Runs the given epoch range; returns one summary dict per epoch."""
    trainables = registry.trainable_items()
    if not trainables:
        raise ContractError(f"stage {stage!r} has no trainable parameters")
    opt = AdamW(trainables, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                weight_decay=cfg.weight_decay)
    tumor_host = None
    if cfg.use_ap and model.prompts is not None and model.prompts.anatomy is not None:
        tumor_host = model.prompts.anatomy.tumor_host
    frac = registry.trainable_fraction()
    history = []
    for epoch in epochs:
        order = rng.stream("order", cfg.seed, stage, epoch).permutation(len(cases))
        dice_vals, ce_vals = [], []
        class_scores: Dict[int, List[float]] = {}
        for step in range(0, len(order), cfg.batch_size):
            picks = order[step:step + cfg.batch_size]
            x, onehot, cids, grids, target, prop_targets = _assemble_batch(
                cases, picks, cfg, stage, epoch, step, tumor_host)
            result = model.forward(x, cids, organ_onehot=onehot)
            loss, dice_part, ce_part = total_loss(
                result.logits, target, result.thetas, prop_targets,
                lambda_ce=cfg.lambda_ce)
            loss.backward()
            opt.step()
            registry.zero_grads()
            dice_vals.append(float(dice_part.data))
            if ce_part is not None:
                ce_vals.append(float(ce_part.data))
            for cid, scores in _patch_dsc(result.logits.data, grids, cids).items():
                class_scores.setdefault(cid, []).extend(scores)
        epoch_dice = float(np.mean(dice_vals))
        epoch_ce = float(np.mean(ce_vals)) if ce_vals else None
        per_class = {cid: float(np.mean(v)) for cid, v in sorted(class_scores.items())}
        if writer is not None:
            writer.write_epoch(epoch, "train", per_class, epoch_dice, epoch_ce, frac)
        history.append({"epoch": epoch, "dice_loss": epoch_dice, "ce_loss": epoch_ce,
                        "per_class_dsc": per_class})
        log.debug("%s epoch %d: dice %.4f ce %s", stage, epoch, epoch_dice, epoch_ce)
    return history


def evaluate_cases(model: SegModel, cases: Sequence[LoadedCase], cfg: RunConfig) -> dict:
    """Deterministic tumor-centred evaluation of every case.

    Each case is scored on its own tumor class; scores aggregate per class
    and the headline number is the unweighted mean over classes present.
    """
    tumor_host = None
    if cfg.use_ap and model.prompts is not None and model.prompts.anatomy is not None:
        tumor_host = model.prompts.anatomy.tumor_host
    class_scores: Dict[int, List[float]] = {}
    proposal_hits = 0
    proposal_total = 0
    with no_grad():
        for case in cases:
            pv, pl = tumor_centered_patch(case.volume, case.labels, cfg.patch_extent)
            x = Tensor(pv.grid[None, None])
            onehot = None
            if tumor_host is not None:
                onehot = Tensor(one_hot_organs(pl, tumor_host)[None])
            result = model.forward(x, [case.class_id], organ_onehot=onehot)
            pred = np.argmax(result.logits.data[0], axis=0)
            true = pl.grid == TUMOR_LABEL_BASE + case.class_id
            score = dsc(pred == case.class_id, true)
            class_scores.setdefault(case.class_id, []).append(score)
            if result.thetas:
                proposal_total += 1
                if int(np.argmax(result.thetas[0].data)) == case.class_id:
                    proposal_hits += 1
    per_class = {cid: float(np.mean(v)) for cid, v in sorted(class_scores.items())}
    summary = {
        "per_class_dsc": per_class,
        "mean_dsc": mean_class_dsc(per_class),
        "n_cases": len(cases),
    }
    if proposal_total:
        summary["proposal_accuracy"] = proposal_hits / proposal_total
    return summary


def _write_summary(run_dir: Path, stage: str, cfg: RunConfig, registry: ParamRegistry,
                   eval_summary: dict) -> None:
    lines = [f"stage={stage}"]
    lines.append(f"trainable_fraction={registry.trainable_fraction():.6f}")
    lines.append(f"mean_test_dsc={eval_summary['mean_dsc']:.6f}")
    for cid, score in eval_summary["per_class_dsc"].items():
        lines.append(f"test_dsc_class_{cid}={score:.6f}")
    if "proposal_accuracy" in eval_summary:
        lines.append(f"proposal_accuracy={eval_summary['proposal_accuracy']:.6f}")
    lines.append(f"n_test_cases={eval_summary['n_cases']}")
    (run_dir / SUMMARY_TXT).write_text("\n".join(lines) + "\n")


def _eval_and_record(model, registry, cases, cfg, writer, epoch, stage, run_dir):
    summary = evaluate_cases(model, cases, cfg)
    writer.write_epoch(epoch, "test", summary["per_class_dsc"],
                       0.0, None, registry.trainable_fraction())
    _write_summary(Path(run_dir), stage, cfg, registry, summary)
    return summary


def pretrain(cfg: RunConfig, dataset_root, run_dir,
             recipes: Optional[Sequence[TumorRecipe]] = None) -> dict:
    """Stage one. Trains everything but the expert mixtures; writes
    pretrain.ckpt, metrics rows and a summary into `run_dir`."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(dataset_root)
    _check_classes(cfg, manifest)
    recipes = list(recipes) if recipes is not None else default_recipes()
    train_cases = load_split(dataset_root, manifest, "train")
    test_cases = load_split(dataset_root, manifest, "test")

    model, registry = build_model(cfg, recipes)
    registry.set_trainable(pretrain_trainable)
    write_config(run_dir / CONFIG_ECHO, cfg)
    writer = MetricsWriter(run_dir / METRICS_CSV)

    train_stage(model, registry, train_cases, cfg, "pretrain",
                range(1, cfg.pretrain_epochs + 1), writer)
    save_checkpoint(run_dir / PRETRAIN_CKPT, registry)
    summary = _eval_and_record(model, registry, test_cases, cfg, writer,
                               cfg.pretrain_epochs, "pretrain", run_dir)
    return summary


def finetune(cfg: RunConfig, dataset_root, run_dir,
             recipes: Optional[Sequence[TumorRecipe]] = None) -> dict:
    """Stage two. Loads pretrain.ckpt, freezes the backbone and prompt
    encoders, tunes experts + fusion + proposal, writes model.ckpt.

    With every optional component disabled the tunable set is empty; the
    stage then degrades to evaluation of the pretrained weights.
    """
    run_dir = Path(run_dir)
    ckpt_path = run_dir / PRETRAIN_CKPT
    if not ckpt_path.exists():
        raise CheckpointError(f"missing checkpoint {ckpt_path}")
    manifest = read_manifest(dataset_root)
    _check_classes(cfg, manifest)
    recipes = list(recipes) if recipes is not None else default_recipes()
    train_cases = load_split(dataset_root, manifest, "train")
    test_cases = load_split(dataset_root, manifest, "test")

    model, registry = build_model(cfg, recipes)
    load_checkpoint(ckpt_path, registry)
    registry.set_trainable(peft_trainable)
    write_config(run_dir / CONFIG_ECHO, cfg)
    writer = MetricsWriter(run_dir / METRICS_CSV)
    final_epoch = cfg.pretrain_epochs + cfg.finetune_epochs

    frozen = [n for n in registry.names() if n not in registry.trainable_names()]
    before = registry.buffer_hashes(frozen)

    if registry.trainable_names():
        train_stage(model, registry, train_cases, cfg, "finetune",
                    range(cfg.pretrain_epochs + 1, final_epoch + 1), writer)
    else:
        log.info("no tunable components enabled; stage two is evaluation only")

    after = registry.buffer_hashes(frozen)
    changed = [n for n in frozen if before[n] != after[n]]
    if changed:
        raise ContractError(f"frozen parameters changed during tuning: {changed}")

    save_checkpoint(run_dir / FINAL_CKPT, registry)
    summary = _eval_and_record(model, registry, test_cases, cfg, writer,
                               final_epoch, "finetune", run_dir)
    return summary


def evaluate_run(cfg: RunConfig, dataset_root, run_dir, split: str = "test",
                 recipes: Optional[Sequence[TumorRecipe]] = None) -> dict:
    """Score a finished run's final checkpoint on a dataset split."""
    run_dir = Path(run_dir)
    ckpt_path = run_dir / FINAL_CKPT
    if not ckpt_path.exists():
        ckpt_path = run_dir / PRETRAIN_CKPT
    if not ckpt_path.exists():
        raise CheckpointError(f"no checkpoint found in {run_dir}")
    manifest = read_manifest(dataset_root)
    _check_classes(cfg, manifest)
    recipes = list(recipes) if recipes is not None else default_recipes()
    cases = load_split(dataset_root, manifest, split)
    model, registry = build_model(cfg, recipes)
    load_checkpoint(ckpt_path, registry)
    return evaluate_cases(model, cases, cfg)
