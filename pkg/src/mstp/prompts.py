"""Knowledge-driven prompts: template rendering and the two prompt encoders.

Text prompts follow a fixed clinical template filled from a per-class
attribute registry. The text encoder is deliberately small: tokens are
hashed into a learnable embedding table (hash-bucket bag of words), averaged
and layer-normalised. It stands in for a large pretrained text encoder while
keeping the same interface, and precomputed per-class vectors can be loaded
from a file to replace it outright.

The anatomical prompt is the organ segmentation itself: one-hot organ
channels pushed through two strided conv blocks, pooled, and projected to
the prompt dimension. Tumor voxels count as their host organ, so the
anatomy pathway carries no direct tumor-class leak.
"""

from __future__ import annotations

import dataclasses
import hashlib
import re
from importlib import resources
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import rng as rng_mod
from .autodiff import Tensor, conv3d, embedding, layernorm, matmul, mean, relu, reshape
from .data.generator import ORGAN_IDS, TumorRecipe
from .data.volumes import TUMOR_LABEL_BASE, LabelMap
from .errors import ContractError, FileFormatError, RegistryError

TEMPLATE = "This is a {C} in the {O}, appearing as a {S} mass with {E} borders on {M}."

DEFAULT_VOCAB = 512
DEFAULT_DIM = 64

EMB_MAGIC = "MSTPEMB1"


@dataclasses.dataclass(frozen=True)
class PromptSpec:
    """One tumor class's attribute record: the template's five slots."""

    class_id: int
    tumor_type: str    # [C]
    location: str      # [O]
    shape: str         # [S]
    edge: str          # [E]
    modality: str      # [M]

    def __post_init__(self):
        for field in ("tumor_type", "location", "shape", "edge", "modality"):
            if not getattr(self, field).strip():
                raise ContractError(f"prompt attribute {field!r} must be non-empty")


def render_prompt(spec: PromptSpec) -> str:
    return TEMPLATE.format(
        C=spec.tumor_type, O=spec.location, S=spec.shape, E=spec.edge, M=spec.modality
    )


def parse_registry(text: str) -> Dict[int, PromptSpec]:
    """Parse 'class_id|C|O|S|E|M' lines; '#' starts a comment."""
    registry: Dict[int, PromptSpec] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("|")
        if len(parts) != 6:
            raise FileFormatError(f"prompt registry line {lineno}: expected 6 fields, got {len(parts)}")
        try:
            class_id = int(parts[0])
        except ValueError:
            raise FileFormatError(f"prompt registry line {lineno}: bad class id {parts[0]!r}") from None
        if class_id in registry:
            raise FileFormatError(f"prompt registry line {lineno}: duplicate class id {class_id}")
        registry[class_id] = PromptSpec(class_id, *[p.strip() for p in parts[1:]])
    if not registry:
        raise FileFormatError("prompt registry contains no entries")
    return registry


def load_registry(path) -> Dict[int, PromptSpec]:
    return parse_registry(Path(path).read_text())


def default_registry_path() -> Path:
    return Path(resources.files("mstp") / "assets" / "prompts.cfg")


def default_registry() -> Dict[int, PromptSpec]:
    return load_registry(default_registry_path())


# ---------------------------------------------------------------------------
# text encoder

_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")


def tokenize(text: str):
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def token_index(token: str, vocab_size: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab_size


class TextEncoder:
    """Hash-bucket bag-of-words over a learnable table, then layernorm."""

    def __init__(self, table: Tensor, vocab_size: int):
        if table.shape[0] != vocab_size:
            raise ContractError(f"table has {table.shape[0]} rows, vocab says {vocab_size}")
        self.table = table
        self.vocab_size = vocab_size

    @classmethod
    def create(cls, seed: int, vocab_size: int = DEFAULT_VOCAB, dim: int = DEFAULT_DIM):
        stream = rng_mod.stream("init", seed, "text.table")
        data = stream.normal(0.0, 0.02, (vocab_size, dim)).astype(np.float32)
        return cls(Tensor(data, requires_grad=True), vocab_size)

    def encode(self, text: str) -> Tensor:
        tokens = tokenize(text)
        if not tokens:
            raise ContractError(f"text encodes to an empty token stream: {text!r}")
        idx = np.array([token_index(t, self.vocab_size) for t in tokens], dtype=np.int64)
        bag = mean(embedding(self.table, idx), axis=0)
        return layernorm(bag)

    def params(self):
        yield "text.table", "text", self.table


# ---------------------------------------------------------------------------
# anatomy encoder


def one_hot_organs(labels: LabelMap, tumor_host: Dict[int, int]) -> np.ndarray:
    """One channel per registered organ id; tumor voxels count as their host.

    Raises RegistryError for any label id that is neither background, a known
    organ, nor a tumor class with a registered host.
    """
    grid = labels.grid
    out = np.zeros((len(ORGAN_IDS),) + grid.shape, dtype=np.float32)
    known = {0} | set(ORGAN_IDS) | {TUMOR_LABEL_BASE + c for c in tumor_host}
    values = np.unique(grid)
    unknown = [int(v) for v in values if int(v) not in known]
    if unknown:
        raise RegistryError(f"label map contains unregistered ids {unknown}")
    for channel, oid in enumerate(ORGAN_IDS):
        mask = grid == oid
        for class_id, host in tumor_host.items():
            if host == oid:
                mask = mask | (grid == TUMOR_LABEL_BASE + class_id)
        out[channel] = mask
    return out


class AnatomyEncoder:
    """Two stride-2 conv blocks over one-hot organ channels, GAP, linear."""

    def __init__(self, params: Dict[str, Tensor], tumor_host: Dict[int, int]):
        self.p = params
        self.tumor_host = dict(tumor_host)

    @classmethod
    def create(cls, seed: int, recipes: Sequence[TumorRecipe], dim: int = DEFAULT_DIM,
               channels: Tuple[int, int] = (8, 16)):
        n_in = len(ORGAN_IDS)
        c1, c2 = channels

        def init(name, shape, fan_in):
            stream = rng_mod.stream("init", seed, f"anat.{name}")
            scale = float(np.sqrt(2.0 / fan_in))
            return Tensor(stream.normal(0.0, scale, shape).astype(np.float32), requires_grad=True)

        params = {
            "conv1.w": init("conv1.w", (c1, n_in, 3, 3, 3), n_in * 27),
            "conv1.b": Tensor(np.zeros(c1, np.float32), requires_grad=True),
            "conv2.w": init("conv2.w", (c2, c1, 3, 3, 3), c1 * 27),
            "conv2.b": Tensor(np.zeros(c2, np.float32), requires_grad=True),
            "out.w": init("out.w", (c2, dim), c2),
            "out.b": Tensor(np.zeros(dim, np.float32), requires_grad=True),
        }
        tumor_host = {r.class_id: r.host_organ for r in recipes}
        return cls(params, tumor_host)

    def encode(self, labels: LabelMap) -> Tensor:
        onehot = one_hot_organs(labels, self.tumor_host)
        return self.encode_onehot(Tensor(onehot))

    def encode_onehot(self, onehot: Tensor) -> Tensor:
        """Forward from a one-hot (n_organs, D, H, W) tensor (or batched 5-D)."""
        h = relu(conv3d(onehot, self.p["conv1.w"], self.p["conv1.b"], stride=2, padding=1))
        h = relu(conv3d(h, self.p["conv2.w"], self.p["conv2.b"], stride=2, padding=1))
        spatial = tuple(range(h.ndim - 3, h.ndim))
        pooled = mean(h, axis=spatial)           # (C,) or (B, C)
        flat = pooled if pooled.ndim == 2 else reshape(pooled, (1, -1))
        out = matmul(flat, self.p["out.w"]) + self.p["out.b"]
        return out if pooled.ndim == 2 else reshape(out, (-1,))

    def params(self):
        for name, tensor in self.p.items():
            yield f"anat.{name}", "anat", tensor


# ---------------------------------------------------------------------------
# external per-class embedding files


def write_embeddings(base, vectors: Dict[int, np.ndarray]) -> None:
    base = Path(base)
    classes = sorted(vectors)
    dims = {vectors[c].shape for c in classes}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ContractError(f"embedding vectors must share one 1-D shape, got {dims}")
    dim = vectors[classes[0]].shape[0]
    header = "\n".join(
        [EMB_MAGIC, "classes=" + " ".join(str(c) for c in classes), f"dim={dim}", "dtype=f32"]
    )
    base.with_suffix(".hdr").write_text(header + "\n")
    stacked = np.stack([np.asarray(vectors[c], dtype="<f4") for c in classes])
    stacked.tofile(base.with_suffix(".raw"))


def read_embeddings(base) -> Dict[int, np.ndarray]:
    base = Path(base)
    try:
        lines = [ln for ln in base.with_suffix(".hdr").read_text().splitlines() if ln.strip()]
    except FileNotFoundError:
        raise FileFormatError(f"missing embeddings header {base.with_suffix('.hdr')}") from None
    if not lines or lines[0] != EMB_MAGIC:
        raise FileFormatError(f"{base}: bad magic, expected {EMB_MAGIC!r}")
    fields = dict(ln.split("=", 1) for ln in lines[1:])
    classes = [int(c) for c in fields["classes"].split()]
    dim = int(fields["dim"])
    raw = np.fromfile(base.with_suffix(".raw"), dtype="<f4")
    if raw.size != len(classes) * dim:
        raise FileFormatError(f"{base}: payload size {raw.size} != {len(classes)}x{dim}")
    rows = raw.reshape(len(classes), dim)
    return {c: rows[i].copy() for i, c in enumerate(classes)}


# ---------------------------------------------------------------------------
# facade used by the model


class PromptEncoder:
    """Registry plus both encoders; the model's single entry point."""

    def __init__(self, registry: Dict[int, PromptSpec], text: Optional[TextEncoder],
                 anatomy: Optional[AnatomyEncoder], external: Optional[Dict[int, np.ndarray]] = None):
        self.registry = dict(registry)
        self.text = text
        self.anatomy = anatomy
        self.external = external

    def spec(self, class_id: int) -> PromptSpec:
        if class_id not in self.registry:
            raise RegistryError(f"tumor class {class_id} is not in the prompt registry")
        return self.registry[class_id]

    def text_embedding(self, class_id: int) -> Tensor:
        if self.text is None:
            raise ContractError("text prompts are disabled in this configuration")
        if self.external is not None:
            if class_id not in self.external:
                raise RegistryError(f"external embeddings lack class {class_id}")
            return Tensor(self.external[class_id])
        return self.text.encode(render_prompt(self.spec(class_id)))

    def anatomy_embedding(self, labels: LabelMap) -> Tensor:
        if self.anatomy is None:
            raise ContractError("anatomical prompts are disabled in this configuration")
        return self.anatomy.encode(labels)
