"""Structure-aware volumetric synthesis toolkit.

Template-conditioned diffusion sampling over 3D volumes, training-free mask
deformation, skip-sampling variance confidence maps and confidence-weighted
segmentation training, plus reference image and overlap metrics.
"""

from structvol.errors import FormatError, TrainingDiverged
from structvol.volume import LabelVolume, Volume, binarize, filter_fine_grained, resample
from structvol.svol import read_svol, write_svol

__version__ = "0.1.0"

__all__ = [
    "FormatError",
    "LabelVolume",
    "TrainingDiverged",
    "Volume",
    "binarize",
    "filter_fine_grained",
    "read_svol",
    "resample",
    "write_svol",
]
