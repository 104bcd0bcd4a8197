"""Fuse address-history records with official population statistics into
harmonized CBG-to-CBG migration matrices."""
from .errors import InputError, MigrateError, NumericalError
from .flows import BlockPartition, FlowMatrix
from .geo import GeoHierarchy, build_hierarchy
from .harmonizer import HarmonizerOptions, harmonize

__version__ = "0.1.0"

__all__ = [
    "BlockPartition",
    "FlowMatrix",
    "GeoHierarchy",
    "HarmonizerOptions",
    "InputError",
    "MigrateError",
    "NumericalError",
    "build_hierarchy",
    "harmonize",
]
