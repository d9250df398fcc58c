"""Reconstruction and resolution enhancement for acoustic-resolution
photoacoustic microscopy (AR-PAM) volumes.

The processing chain is

    simulate / load  ->  SAFT (pure, D-SAFT, FA-SAFT)  ->  MAP
                     ->  deconvolution (R-L, 2D MB, D-MB)  ->  metrics

Arrays are indexed ``[ix, iy, it]`` for volumes and ``[ix, iy]`` for
lateral images. Lateral coordinates are centred on the grid.
"""

from arpam.core import (
    AcquisitionGeometry,
    DeconvConfig,
    DeconvMethod,
    LateralImage,
    PsfModel,
    RfVolume,
    SaftConfig,
    SaftVariant,
    axial_index_of,
    map_projection,
)

__version__ = "0.1.0"

__all__ = [
    "AcquisitionGeometry",
    "DeconvConfig",
    "DeconvMethod",
    "LateralImage",
    "PsfModel",
    "RfVolume",
    "SaftConfig",
    "SaftVariant",
    "axial_index_of",
    "map_projection",
]
