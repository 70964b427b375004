"""Voxel-level locoregional recurrence prediction from PET/CT.

Library layout:

- ``volgrid``     physical-space volumes, masks, resampling, VF32 I/O
- ``preprocess``  intensity normalization, cropping, cohort splits
- ``autodiff``    reverse-mode tensor engine (the operator set the net needs)
- ``kernels``     3D convolution / pooling array kernels, naive and fast
- ``unet3d``      the 3D U-Net model and the training protocols
- ``baselines``   SUVmax percentile thresholding and GTV passthrough
- ``analysis``    overlap metrics, points of origin, statistical tests
- ``phantom``     deterministic synthetic PET/CT cohort generator
- ``cli``         end-to-end experiment subcommands
"""

__version__ = "0.1.0"

from . import analysis, autodiff, baselines, kernels, phantom, preprocess, unet3d, volgrid  # noqa: F401
