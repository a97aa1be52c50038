"""Data preparation shared by the CLI commands: noise, patches and the split."""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .data import PatchSet, add_gaussian_noise, extract_patches, load_cube, split_patches
from .engine import NOISE, SPLIT, denoise_array, stream
from .metrics import mpsnr, mssim
from .tensor import Network


def prepare_patches(rc: RunConfig) -> tuple[PatchSet, PatchSet, PatchSet]:
    """Noisy/clean patch sets ``(train, eval, test)`` derived deterministically from the seed."""
    sets = []
    for i, path in enumerate(rc.cubes):
        clean = load_cube(path)
        noisy = add_gaussian_noise(clean, rc.sigma, stream(rc.seed, NOISE, i))
        sets.append(extract_patches(clean, noisy, rc.patch_size, rc.stride, cube_id=i))
    return split_patches(PatchSet.concat(sets), rc.split, stream(rc.seed, SPLIT))


def patch_quality(model: Network, patches: PatchSet, peak: float = 1.0, batch_size: int = 16) -> dict:
    """Per-patch MPSNR/MSSIM of the noisy input and of the model output, averaged over patches."""
    x, _ = patches.nchw()
    out = denoise_array(model, x, batch_size).transpose(0, 2, 3, 1)
    window = min(8, patches.clean.shape[1])
    noisy_psnr = [mpsnr(c, n, peak=peak) for c, n in zip(patches.clean, patches.noisy)]
    den_psnr = [mpsnr(c, d, peak=peak) for c, d in zip(patches.clean, out)]
    return {
        "patches": len(patches),
        "noisy_mpsnr": float(np.mean(noisy_psnr)),
        "denoised_mpsnr": float(np.mean(den_psnr)),
        "noisy_mssim": float(np.mean([mssim(c, n, peak, window) for c, n in zip(patches.clean, patches.noisy)])),
        "denoised_mssim": float(np.mean([mssim(c, d, peak, window) for c, d in zip(patches.clean, out)])),
    }
