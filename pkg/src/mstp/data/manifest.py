"""Dataset directory layout and its manifest file.

A generated dataset looks like:

    <root>/
      manifest.txt
      prompts.cfg            (copy of the prompt registry used)
      cases/
        case_0000_img.raw / .hdr
        case_0000_lbl.raw / .hdr
        ...

manifest.txt is line oriented:

    MSTPSET1
    seed=123
    counts=1:5,2:3,3:2
    case|0|1|train|cases/case_0000_img|cases/case_0000_lbl
    ...

Case paths are stored relative to the dataset root, without the .raw/.hdr
suffix (both files must exist). The counts line is redundant with the case
lines and is cross-checked on read.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from ..errors import ContractError, FileFormatError
from . import generator, volumes

MAGIC = "MSTPSET1"
MANIFEST_NAME = "manifest.txt"
SPLITS = ("train", "val", "test")


@dataclasses.dataclass(frozen=True)
class CaseEntry:
    index: int
    class_id: int
    split: str
    img: str   # relative base path, no extension
    lbl: str


@dataclasses.dataclass
class DatasetManifest:
    seed: int
    entries: List[CaseEntry]

    def split_entries(self, split: str) -> List[CaseEntry]:
        if split not in SPLITS:
            raise ContractError(f"unknown split {split!r}, expected one of {SPLITS}")
        return [e for e in self.entries if e.split == split]

    def class_counts(self) -> Dict[int, int]:
        counts: Dict[int, int] = {}
        for e in self.entries:
            counts[e.class_id] = counts.get(e.class_id, 0) + 1
        return counts


def write_manifest(root, manifest: DatasetManifest) -> Path:
    root = Path(root)
    counts = manifest.class_counts()
    lines = [
        MAGIC,
        f"seed={manifest.seed}",
        "counts=" + ",".join(f"{c}:{counts[c]}" for c in sorted(counts)),
    ]
    for e in manifest.entries:
        for field in (e.split, e.img, e.lbl):
            if "|" in field or "\n" in field:
                raise ContractError(f"manifest field contains a reserved character: {field!r}")
        lines.append(f"case|{e.index}|{e.class_id}|{e.split}|{e.img}|{e.lbl}")
    path = root / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise FileFormatError(f"missing manifest file {path}") from None
    lines = [ln for ln in lines if ln.strip()]
    if not lines or lines[0] != MAGIC:
        raise FileFormatError(f"{path}: bad magic, expected {MAGIC!r}")
    seed = None
    declared_counts: Dict[int, int] = {}
    entries: List[CaseEntry] = []
    for ln in lines[1:]:
        if ln.startswith("seed="):
            seed = int(ln[len("seed="):])
        elif ln.startswith("counts="):
            for pair in ln[len("counts="):].split(","):
                cid, _, n = pair.partition(":")
                declared_counts[int(cid)] = int(n)
        elif ln.startswith("case|"):
            parts = ln.split("|")
            if len(parts) != 6:
                raise FileFormatError(f"{path}: malformed case line {ln!r}")
            _, idx, cid, split, img, lbl = parts
            if split not in SPLITS:
                raise FileFormatError(f"{path}: unknown split {split!r} in {ln!r}")
            entries.append(CaseEntry(int(idx), int(cid), split, img, lbl))
        else:
            raise FileFormatError(f"{path}: unrecognised line {ln!r}")
    if seed is None:
        raise FileFormatError(f"{path}: missing seed line")
    manifest = DatasetManifest(seed, entries)
    if declared_counts != manifest.class_counts():
        raise FileFormatError(
            f"{path}: counts line {declared_counts} disagrees with case lines {manifest.class_counts()}"
        )
    return manifest


def validate_dataset(root) -> DatasetManifest:
    """Read the manifest and confirm every referenced file exists."""
    root = Path(root)
    manifest = read_manifest(root)
    for e in manifest.entries:
        for base in (e.img, e.lbl):
            for ext in (".raw", ".hdr"):
                p = root / (base + ext)
                if not p.exists():
                    raise FileFormatError(f"manifest references missing file {p}")
    return manifest


def generate_dataset(
    root,
    seed: int,
    recipes: Sequence[generator.TumorRecipe],
    n_train: int,
    n_val: int,
    n_test: int,
    extents: Tuple[int, int, int] = (48, 48, 48),
    spacing_mm: Tuple[float, float, float] = (1.5, 1.5, 1.5),
    prompts_text: str = None,
) -> DatasetManifest:
    """Generate all cases of a dataset and write the full directory layout."""
    generator.validate_recipes(recipes)
    total = n_train + n_val + n_test
    if total < 1:
        raise ContractError("dataset must contain at least one case")
    root = Path(root)
    (root / "cases").mkdir(parents=True, exist_ok=True)

    entries: List[CaseEntry] = []
    for i in range(total):
        vol, lbl, class_id = generator.generate_case(seed, i, recipes, extents, spacing_mm)
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        img_base = f"cases/case_{i:04d}_img"
        lbl_base = f"cases/case_{i:04d}_lbl"
        volumes.write_volume(root / img_base, vol)
        volumes.write_labels(root / lbl_base, lbl)
        entries.append(CaseEntry(i, class_id, split, img_base, lbl_base))

    if prompts_text is not None:
        (root / "prompts.cfg").write_text(prompts_text)
    manifest = DatasetManifest(seed, entries)
    write_manifest(root, manifest)
    return manifest


def load_case(root, entry: CaseEntry):
    root = Path(root)
    vol = volumes.read_volume(root / entry.img)
    lbl = volumes.read_labels(root / entry.lbl)
    return vol, lbl
