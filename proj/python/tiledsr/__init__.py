"""Tiled single-image super-resolution.

Images are float32 numpy arrays shaped (H, W) or (H, W, C) with values in [0, 1].
"""

from ._core import (
    Model,
    bicubic_downsample,
    build_discriminator,
    build_generator,
    checkerboard_index,
    load_model,
    psnr,
    read_png,
    sr_image,
    sr_patch,
    ssim,
    synthesize,
    time_patch,
    train,
    upscale_interpolated,
    write_png,
)

__all__ = [
    "Model",
    "bicubic_downsample",
    "build_discriminator",
    "build_generator",
    "checkerboard_index",
    "load_model",
    "psnr",
    "read_png",
    "sr_image",
    "sr_patch",
    "ssim",
    "synthesize",
    "time_patch",
    "train",
    "upscale_interpolated",
    "write_png",
]
