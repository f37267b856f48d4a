"""Frequency-domain flare removal: dynamic spectral filtering network,
patch-contrastive guidance, paired-data synthesis and masked metrics."""

from .contrastive import ProjectionHead, info_nce, ldg_loss, sample_patches
from .freq_filter import FilterBank, GDFGBlock, dynamic_filter, irdft2, mix_coefficients, rdft2
from .losses import LossWeights, frequency_loss, perceptual_loss, total_loss
from .metrics import masked_psnr, psnr, spectrum_image, ssim
from .network import DeflareNet, NetworkConfig
from .synthesis import AugmentParams, CompositeSample, FlareAsset, make_sample
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"
