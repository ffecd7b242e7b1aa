"""Morphological component analysis: texture / cartoon separation.

Two dictionaries are used:

* texture -- an overlapping local DCT: orthonormal 2-D DCT-II on blocks laid
  out with 50% overlap, scaled so the frame is Parseval (analysis followed by
  synthesis is the identity);
* cartoon -- an undecimated separable wavelet frame built by the a-trous
  scheme with the 4-tap smoothing filter [1, 3, 3, 1] / 8; synthesis is the
  sum of all detail planes and the coarse approximation.

The separation is iterative hard thresholding with a threshold decreasing
linearly from the largest analysis coefficient to zero.  Low-pass content
(the wavelet coarse approximation, DCT block means) is always assigned to the
cartoon.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

from .errors import ContractError, ConvergenceError, ParameterError
from .raster import Raster, as_plane

MCA_ITERATIONS = 30
MCA_BLOCK = 32
MCA_LEVELS = 3
SMOOTH_TAPS = np.array([1.0, 3.0, 3.0, 1.0]) / 8.0


@dataclass(frozen=True)
class McaResult:
    cartoon: Raster
    texture: Raster
    residual_energy: float


class LocalDCT:
    """Parseval frame of orthonormal DCTs on half-overlapping square blocks."""

    def __init__(self, shape, block: int = MCA_BLOCK):
        if block < 2 or block % 2:
            raise ParameterError(f"DCT block size must be even and >= 2, got {block}")
        self.shape = shape
        self.block = block
        hop = block // 2
        h, w = shape
        self.starts_y = np.arange(-hop, h, hop)
        self.starts_x = np.arange(-hop, w, hop)
        # every pixel is covered by exactly two blocks per axis
        self.scale = 0.5
        self._pad = block

    def analysis(self, f: np.ndarray) -> np.ndarray:
        b, pad = self.block, self._pad
        p = np.zeros((f.shape[0] + 2 * pad, f.shape[1] + 2 * pad))
        p[pad:-pad, pad:-pad] = f
        out = np.empty((len(self.starts_y), len(self.starts_x), b, b))
        for i, y in enumerate(self.starts_y):
            for j, x in enumerate(self.starts_x):
                blk = p[y + pad:y + pad + b, x + pad:x + pad + b]
                out[i, j] = dctn(blk, norm="ortho")
        return out * self.scale

    def synthesis(self, coeffs: np.ndarray) -> np.ndarray:
        b, pad = self.block, self._pad
        h, w = self.shape
        p = np.zeros((h + 2 * pad, w + 2 * pad))
        for i, y in enumerate(self.starts_y):
            for j, x in enumerate(self.starts_x):
                p[y + pad:y + pad + b, x + pad:x + pad + b] += idctn(coeffs[i, j], norm="ortho")
        return p[pad:-pad, pad:-pad] * self.scale


class UndecimatedWavelet:
    """A-trous undecimated wavelet frame; coefficients are (levels + 1, H, W)."""

    def __init__(self, levels: int = MCA_LEVELS):
        if levels < 1:
            raise ParameterError(f"need at least one wavelet level, got {levels}")
        self.levels = levels
        n = 8 * 2 ** levels + 1
        delta = np.zeros((n, n))
        delta[n // 2, n // 2] = 1.0
        # l2 norm of each analysis atom, used to put coefficients on a common scale
        self.atom_norms = np.sqrt((self.analysis(delta) ** 2).sum(axis=(1, 2)))

    @staticmethod
    def _holed(level: int) -> np.ndarray:
        """Smoothing taps at offsets (-1, 0, 1, 2) * 2**level around the center."""
        step = 2 ** level
        k = np.zeros(4 * step + 1)
        center = 2 * step
        for t, tap in zip((-1, 0, 1, 2), SMOOTH_TAPS):
            k[center + t * step] = tap
        return k

    def analysis(self, f: np.ndarray) -> np.ndarray:
        out = np.empty((self.levels + 1,) + f.shape)
        c = f
        for lev in range(self.levels):
            k = self._holed(lev)
            s = ndimage.correlate1d(c, k, axis=0, mode="nearest")
            s = ndimage.correlate1d(s, k, axis=1, mode="nearest")
            out[lev] = c - s
            c = s
        out[self.levels] = c
        return out

    def synthesis(self, coeffs: np.ndarray) -> np.ndarray:
        return coeffs.sum(axis=0)


def _hard(coeffs: np.ndarray, thresh: float) -> np.ndarray:
    return np.where(np.abs(coeffs) > thresh, coeffs, 0.0)


def _threshold_wavelet(coeffs: np.ndarray, norms: np.ndarray, thresh: float) -> np.ndarray:
    # the coarse approximation always belongs to the cartoon
    keep = np.abs(coeffs) > thresh * norms[:, None, None]
    out = np.where(keep, coeffs, 0.0)
    out[-1] = coeffs[-1]
    return out


def _threshold_dct(coeffs: np.ndarray, thresh: float) -> np.ndarray:
    # block means are cartoon content, never texture
    out = _hard(coeffs, thresh)
    out[:, :, 0, 0] = 0.0
    return out


def mca_separate(raster, iterations: int = MCA_ITERATIONS, block: int = MCA_BLOCK,
                 levels: int = MCA_LEVELS, trace=None) -> McaResult:
    """Split an image into cartoon and texture by iterative thresholding.

    ``trace``, if given, is called after each iteration with
    ``(iteration, cartoon, texture, residual)`` where the residual is tracked
    incrementally rather than recomputed from the input.
    """
    f = as_plane(raster)
    if min(f.shape) < block:
        raise ContractError(f"image {f.shape} is smaller than the DCT block {block}")
    if iterations < 1:
        raise ParameterError(f"iterations must be positive, got {iterations}")
    dct = LocalDCT(f.shape, block)
    wav = UndecimatedWavelet(levels)
    cartoon = np.zeros_like(f)
    texture = np.zeros_like(f)
    residual = f.copy()
    energy0 = float((f * f).sum())
    if energy0 == 0:
        zero = Raster(np.zeros_like(f))
        return McaResult(zero, zero, 0.0)

    dct0 = dct.analysis(f)
    dct0[:, :, 0, 0] = 0.0
    wav0 = wav.analysis(f)[:levels] / wav.atom_norms[:levels, None, None]
    lam0 = max(np.abs(dct0).max(), np.abs(wav0).max())
    for it in range(1, iterations + 1):
        lam = lam0 * (1.0 - it / iterations)
        new = dct.synthesis(_threshold_dct(dct.analysis(texture + residual), lam))
        residual -= new - texture
        texture = new
        new = wav.synthesis(_threshold_wavelet(wav.analysis(cartoon + residual), wav.atom_norms, lam))
        residual -= new - cartoon
        cartoon = new
        energy = float((residual * residual).sum())
        if not np.isfinite(energy) or energy > energy0 * (1.0 + 1e-6):
            raise ConvergenceError(
                f"MCA residual energy grew to {energy / energy0:.3g} of the input at iteration {it}"
            )
        if trace is not None:
            trace(it, cartoon, texture, residual)
    return McaResult(Raster(cartoon), Raster(texture), float((residual * residual).sum()) / energy0)
