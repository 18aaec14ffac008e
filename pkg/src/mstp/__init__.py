"""Prompt-conditioned pan-tumor segmentation at desk scale.

The package trains a small 3-D U-Net whose bottleneck is conditioned on
text and anatomical prompts through cross-attention, specialised per tumor
class by a sparse mixture of low-rank residual experts, and adapted with a
parameter-efficient fine-tuning stage. Everything runs on numpy via the
bundled reverse-mode autodiff engine; datasets are procedural volumetric
phantoms generated bit-reproducibly from a seed.
"""

__version__ = "0.1.0"
