"""Lesion-perceived and quantification-consistent modulation for patch-based PET denoising."""
from .volume import Volume, build_patch_grid, extract_patch, reassemble, read_volume, write_volume
from .lemod import SamplingConfig, le_loss, sampling_weight, sample_batch, build_weight_table
from .qumod import build_parcellation, qu_loss, qu_loss_bruteforce
from .denoiser import TrainConfig, combined_loss, denoise_volume, forward, backward, train

__all__ = [
    "Volume", "build_patch_grid", "extract_patch", "reassemble", "read_volume", "write_volume",
    "SamplingConfig", "le_loss", "sampling_weight", "sample_batch", "build_weight_table",
    "build_parcellation", "qu_loss", "qu_loss_bruteforce",
    "TrainConfig", "combined_loss", "denoise_volume", "forward", "backward", "train",
]
