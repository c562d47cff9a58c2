"""dvk-forge: dose-voxel-kernel estimation with a from-scratch numpy U-Net.

Submodules: ``tensor`` (arrays, normalisation, DVKT files), ``layers``
(network engine), ``optim``, ``losses``, ``unet``, ``dosimetry``, ``pca``,
``gradcheck``, ``plotting`` and ``cli``.
"""

from .dosimetry import (Dataset, convolve3d_direct, convolve3d_fft, energy_to_dose, load_dataset, make_dataset,
                        synth_dvk_oracle)
from .errors import DegenerateInputError, DvkError, FormatError, NumericalError, ShapeError
from .layers import Network
from .losses import clinical_loss, clinical_loss_inverse, iou_loss, mae, mse, soft_iou
from .optim import SGD, Adam, Momentum, Nadam, Nesterov, make_optimizer
from .pca import jacobi_eigh, pca_fit
from .tensor import denormalize, minmax_normalize, quad_convolve, read_tensor, write_tensor
from .unet import (TrainConfig, UNetSpec, build_unet, count_params, evaluate, load_checkpoint, predict,
                   save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "Adam", "Dataset", "DegenerateInputError", "DvkError", "FormatError", "Momentum", "Nadam", "Nesterov",
    "Network", "NumericalError", "SGD", "ShapeError", "TrainConfig", "UNetSpec", "build_unet", "clinical_loss",
    "clinical_loss_inverse", "convolve3d_direct", "convolve3d_fft", "count_params", "denormalize",
    "energy_to_dose", "evaluate", "iou_loss", "jacobi_eigh", "load_checkpoint", "load_dataset", "mae",
    "make_dataset", "make_optimizer", "minmax_normalize", "mse", "pca_fit", "predict", "quad_convolve",
    "read_tensor", "save_checkpoint", "soft_iou", "synth_dvk_oracle", "train", "write_tensor",
]
