"""Synthetic multimodal crack scenes.

Cracks are random-walk curves that are darkest and sharpest in the X-ray,
visible in VIS and faint and blurred in IR.  Letter-like distractor strokes of
similar darkness are painted into VIS only, so a classifier that looks at VIS
alone would confuse them with cracks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError, ParameterError
from .features import ModalitySet
from .quantize import BACKGROUND, CRACK, UNLABELED
from .raster import Raster, as_plane, gaussian_blur, to_gray

HALO = 2
CRACK_DEPTH = {"IR": 0.08, "VIS": 0.25, "XRAY": 0.45}
STROKE_DEPTH = 0.3


@dataclass(frozen=True)
class SynthSpec:
    width: int = 256
    height: int = 256
    cracks: int = 8
    crack_width: tuple = (1, 3)
    distractors: int = 6
    noise: dict = field(default_factory=lambda: {"IR": 0.02, "VIS": 0.02, "XRAY": 0.02})
    grain: float = 0.0  # amplitude of wood grain in the X-ray
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.crack_width
        if not (1 <= lo <= hi <= 3):
            raise ParameterError(f"crack width range must lie within 1..3, got {self.crack_width}")
        if self.width < 8 or self.height < 8:
            raise ParameterError("synthetic image must be at least 8x8")
        if self.cracks < 0 or self.distractors < 0:
            raise ParameterError("crack and distractor counts must be nonnegative")
        if any(v < 0 for v in self.noise.values()):
            raise ParameterError("noise levels must be nonnegative")


@dataclass(frozen=True, eq=False)
class SynthScene:
    modalities: ModalitySet
    labels: np.ndarray  # int8: CRACK, BACKGROUND, UNLABELED
    crack_body: np.ndarray  # bool, every pixel darkened by a crack
    strokes: np.ndarray  # bool, distractor stroke pixels


def _walk(rng, shape, steps, turn):
    """Pixel centers visited by a random walk with smoothly drifting heading."""
    h, w = shape
    pos = np.array([rng.uniform(0, h), rng.uniform(0, w)])
    theta = rng.uniform(0, 2 * np.pi)
    pts = []
    for _ in range(steps):
        pts.append(pos.copy())
        theta += rng.normal(0, turn)
        pos += 0.5 * np.array([np.sin(theta), np.cos(theta)])
    pts = np.rint(np.array(pts)).astype(int)
    keep = (pts[:, 0] >= 0) & (pts[:, 0] < h) & (pts[:, 1] >= 0) & (pts[:, 1] < w)
    return pts[keep]


def _thicken(center: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return center.copy()
    dist = ndimage.distance_transform_edt(~center)
    return dist <= (width - 1) / 2.0 + 0.5


def _background(rng, shape, lo, hi):
    f = gaussian_blur(rng.normal(size=shape), max(shape) / 8.0)
    f = (f - f.min()) / max(np.ptp(f), 1e-12)
    return lo + (hi - lo) * f


def synth_scene(spec: SynthSpec) -> SynthScene:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    shape = (spec.height, spec.width)
    center = np.zeros(shape, dtype=bool)
    body = np.zeros(shape, dtype=bool)
    depth = np.zeros(shape)
    for _ in range(spec.cracks):
        line = np.zeros(shape, dtype=bool)
        pts = _walk(rng, shape, int(rng.integers(500, 800)), 0.05)
        line[pts[:, 0], pts[:, 1]] = True
        wd = int(rng.integers(spec.crack_width[0], spec.crack_width[1] + 1))
        b = _thicken(line, wd)
        center |= line
        body |= b
        depth = np.maximum(depth, b * rng.uniform(0.8, 1.0))

    strokes = np.zeros(shape, dtype=bool)
    for _ in range(spec.distractors):
        line = np.zeros(shape, dtype=bool)
        # short, strongly curving strokes reminiscent of script
        pts = _walk(rng, shape, int(rng.integers(40, 90)), 0.35)
        line[pts[:, 0], pts[:, 1]] = True
        strokes |= _thicken(line, int(rng.integers(2, 4)))
    strokes &= ~body

    xray = _background(rng, shape, 0.45, 0.75)
    if spec.grain > 0:
        yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
        warp = 6.0 * gaussian_blur(rng.normal(size=shape), 12.0) / 0.05
        xray = xray + spec.grain * np.sin(2 * np.pi * (xx + warp) / 9.0 + 0.3 * yy / shape[0])
    xray = xray - CRACK_DEPTH["XRAY"] * depth

    ir = _background(rng, shape, 0.4, 0.6)
    ir = ir - CRACK_DEPTH["IR"] * gaussian_blur(depth, 1.0)

    tint = np.array([1.0, 0.9, 0.75])
    vis_base = _background(rng, shape, 0.5, 0.8)
    vis_gray = vis_base - CRACK_DEPTH["VIS"] * gaussian_blur(depth, 0.6) - STROKE_DEPTH * strokes
    vis = vis_gray[:, :, None] * tint[None, None, :]

    def noisy(img, mod):
        return np.clip(img + rng.normal(0, spec.noise.get(mod, 0.0), img.shape), 0.0, 1.0)

    modalities = ModalitySet(Raster(noisy(ir, "IR")), Raster(noisy(vis, "VIS")), Raster(noisy(xray, "XRAY")))

    labels = np.full(shape, BACKGROUND, dtype=np.int8)
    if body.any():
        near = ndimage.distance_transform_edt(~body) <= HALO
        labels[near] = UNLABELED
    labels[center] = CRACK
    return SynthScene(modalities, labels, body, strokes)


def synth_generate(spec: SynthSpec):
    """(ModalitySet, label mask) for a synthetic scene."""
    scene = synth_scene(spec)
    return scene.modalities, scene.labels


def overlay(vis, crack) -> Raster:
    """Grayscale rendering of `vis` in three channels with crack pixels painted pure red."""
    gray = as_plane(to_gray(vis) if isinstance(vis, Raster) else vis)
    crack = np.asarray(crack).astype(bool)
    if crack.shape != gray.shape:
        raise ContractError(f"crack map {crack.shape} does not match image {gray.shape}")
    out = np.repeat(gray[:, :, None], 3, axis=2)
    out[crack] = (1.0, 0.0, 0.0)
    return Raster(out)
