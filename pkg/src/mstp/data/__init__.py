from .volumes import LabelMap, Volume, read_labels, read_volume, tumor_label, write_labels, write_volume
from .generator import TumorRecipe, default_recipes, generate_case, validate_recipes
from .pipeline import augment, extract_patch, resample_isotropic, resample_labels, tumor_centered_patch
from .manifest import (
    CaseEntry, DatasetManifest, generate_dataset, load_case, read_manifest,
    validate_dataset, write_manifest,
)

__all__ = [
    "LabelMap", "Volume", "read_labels", "read_volume", "tumor_label",
    "write_labels", "write_volume", "TumorRecipe", "default_recipes",
    "generate_case", "validate_recipes", "augment", "extract_patch",
    "resample_isotropic", "resample_labels", "tumor_centered_patch",
    "CaseEntry", "DatasetManifest", "generate_dataset", "load_case",
    "read_manifest", "validate_dataset", "write_manifest",
]
