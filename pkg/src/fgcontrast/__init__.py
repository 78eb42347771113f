"""Foreground-aware contrastive pre-training for 3D point clouds, desk scale.

Pipeline: synthetic scenes -> dual-view augmentation -> over-segmentation ->
foreground region sampling -> Siamese correspondence network -> geometry and
feature contrast losses, all on a small reverse-mode autodiff engine with
finite-difference verification.
"""

from fgcontrast.errors import ArgumentError, ContractError, DataError, FormatError, ShapeError

__all__ = [
    "ArgumentError",
    "ContractError",
    "DataError",
    "FormatError",
    "ShapeError",
]

__version__ = "0.1.0"
