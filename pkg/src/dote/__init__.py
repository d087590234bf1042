"""Dual convolutional filter learning for image super-resolution and cross-modality synthesis.

A source filter bank ``Fx``, a target filter bank ``Fy`` and a channel map
``W`` are learned jointly from registered image pairs; a new source image is
sparse-coded over ``Fx``, its feature maps are transported by ``W`` and the
target image is rebuilt with ``Fy``.
"""

from .config import SolverConfig, load_config, parse_config
from .csc_solver import (
    ConvergenceTrace,
    FilterBank,
    csc_objective,
    infer_feature_maps,
    project_unit_ball,
    reconstruct,
    soft_threshold,
    update_feature_maps_dual,
    update_feature_maps_joint,
    update_filters,
)
from .dataio import ImageRecord, build_paired_dataset, load_dataset, load_image, save_image
from .errors import DimensionError, DoteError, FormatError, InvalidInputError, NumericalConsistencyError
from .grid import circular_convolve, crop_kernel, embed_kernel, fft_forward, fft_inverse, read_tensor, write_tensor
from .mapping import ChannelMap, update_mapping
from .metrics import SsimParams, psnr, ssim
from .synthesis import PairedDataset, sr_degrade, sr_pairs, sr_upsample, synthesize
from .training import DoteModel, TrainReport, joint_objective, load_model, save_model, train

__version__ = "0.1.0"
