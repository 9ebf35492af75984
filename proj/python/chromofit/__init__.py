"""Chromophore-space blemish fitting and retouching for 8-bit sRGB images.

Images are ``(H, W, 3)`` uint8 arrays; ROIs are ``(x, y, w, h)`` tuples and
gains ``(h, m, r)`` tuples.
"""

from ._core import (
    ConvergenceError,
    DegenerateSamplesError,
    DimensionError,
    Error,
    IoError,
    MixingMatrix,
    ParameterError,
    RankError,
    RoiError,
    StudioService,
    blemish_contrast,
    default_mixing_matrix,
    estimate_mixing_matrix,
    fit_field,
    gaussian_kernel,
    psnr,
    read_png,
    retouch,
    separate,
    simulate_fading,
    srgb_eotf,
    srgb_oetf,
    ssim,
    to_chromophore,
    write_png,
)

__version__ = "0.1.0"
