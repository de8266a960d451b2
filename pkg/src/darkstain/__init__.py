"""Unsupervised digital staining of dark-field cell images.

Pipeline: closed-form light enhancement by inverse histogram matching, a
colorization teacher pretrained on self-synthesized gray/color pairs, and a
student GAN trained with distillation, content-consistency, and adversarial
terms. Includes a no-reference evaluation protocol and a synthetic unpaired
data generator for desk-scale runs.
"""

from .histmatch import (
    Cdf,
    Histogram256,
    LutMapping,
    accumulate_histogram,
    build_staining_lut,
    enhance,
    histogram_to_cdf,
    ks_statistic,
    load_lut,
    save_lut,
)
from .errors import ConfigError, MissingArtifactError, NumericalError
from .imaging import (
    UnpairedDataset,
    gray_pair_from_stained,
    load_image,
    save_image,
    to_luma,
)
from .losses import LossReport, LossWeights, adv_losses, content_loss, kd_loss, total_loss
from .metrics import (
    FeatureSet,
    MetricsReport,
    NiqeModel,
    evaluate,
    extract_features,
    fid,
    fit_niqe_model,
    kid,
    lpips_content,
    niqe,
)
from .networks import (
    build_discriminators,
    build_embedder,
    build_generator,
    build_teacher,
)
from .synthcells import SynthConfig, gen_bright_field, gen_dark_field, write_dataset
from .training import TrainConfig, lr_schedule, pretrain_teacher, stain, train_student

__version__ = "0.1.0"
