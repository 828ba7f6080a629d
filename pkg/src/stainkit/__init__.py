"""Stain normalization toolkit for histopathology tiles.

Submodules:

- ``autodiff``: float32 tensors with tape-based reverse-mode differentiation
- ``nn`` / ``optim`` / ``tensorio``: layers, AdamW, binary tensor containers
- ``colorstats``: RGB histograms, 1-D Wasserstein distance, template selection
- ``classical``: Reinhard / Macenko / Vahadane baselines
- ``model``: the structure/color decoupling network and its losses
- ``augment``: color- and structure-preserving tile augmentations
- ``metrics``: SSIM, MS-SSIM, UQI
- ``tiling`` / ``config`` / ``pipeline`` / ``cli``: batch tooling
"""

__version__ = "0.1.0"
