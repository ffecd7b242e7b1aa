"""The multimodal per-pixel feature bank and its manifest."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import filters
from .errors import ContractError, FormatError
from .raster import Raster, to_gray

MODALITIES = ("IR", "VIS", "XRAY")
MODALITY_LABELS = {"IR": "IR", "VIS": "VIS", "XRAY": "X-ray"}
COLOR_CHANNELS = ("R", "G", "B", "hue")
MANIFEST_VERSION = "manifest-1"


@dataclass(frozen=True)
class ModalitySet:
    """Registered acquisitions: grayscale IR and X-ray, 3-channel visible."""

    ir: Raster
    vis: Raster
    xray: Raster

    def __post_init__(self):
        shapes = {(r.height, r.width) for r in (self.ir, self.vis, self.xray)}
        if len(shapes) != 1:
            raise ContractError(f"modalities have different dimensions: {sorted(shapes)}")
        if self.ir.channels != 1 or self.xray.channels != 1:
            raise ContractError("IR and X-ray rasters must be single-channel")

    @property
    def shape(self):
        return self.ir.height, self.ir.width

    def get(self, modality: str) -> Raster:
        return {"IR": self.ir, "VIS": self.vis, "XRAY": self.xray}[modality]


@dataclass(frozen=True)
class FeatureEntry:
    feature_id: str
    modality: str
    filter: str
    params: dict = field(default_factory=dict)
    kind: str = "continuous"
    categories: int | None = None

    def matches(self, modality: str, filter_name: str, params: dict | None = None) -> bool:
        if self.modality != modality or self.filter != filter_name:
            return False
        return all(self.params.get(k) == v for k, v in (params or {}).items())

    def describe(self) -> str:
        """Human-readable description in the style of a selection table row."""
        p = self.params
        label = MODALITY_LABELS[self.modality]
        if self.filter == "elongated":
            text = f"Elongated filter (σ = {_num(p['sigma'])}, {p['output']})"
        elif self.filter == "frangi":
            text = "Frangi vesselness filter ({})".format(
                "vessel measure" if p["output"] == "vesselness" else "vessel scale")
        elif self.filter == "structure_tensor":
            text = f"Structure tensor ({p['output']})"
        elif self.filter == "black_top_hat":
            text = f"Black Top Hat (size structuring element: {p['se']}×{p['se']})"
        elif self.filter == "lbp":
            text = "Local binary pattern"
        elif self.filter == "intensity":
            text = "Grayscale intensity"
        elif self.filter == "median":
            text = f"Median filter (size filter: {p['size']}×{p['size']})"
        elif self.filter == "log":
            text = f"LoG (σ = {_num(p['sigma'])})"
        elif self.filter == "leung_malik":
            fam = {"directional": "directional", "log": "LoG", "gaussian": "Gaussian"}[p["family"]]
            text = f"Leung-Malik filter: {fam} (#{p['index'] + 1})"
        elif self.filter == "color":
            text = f"Color ({p['channel']})"
        else:
            text = self.filter
        return f"{label}: {text}"


def _num(x) -> str:
    return f"{x:g}"


@dataclass(frozen=True)
class FeatureManifest:
    entries: tuple

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        ids = [e.feature_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ContractError("feature ids must be unique")
        order = [MODALITIES.index(e.modality) for e in self.entries]
        if order != sorted(order):
            raise ContractError("manifest entries must be grouped by modality in IR, VIS, XRAY order")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def find(self, modality: str, filter_name: str, params: dict | None = None) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.matches(modality, filter_name, params)]

    def subset(self, predicate) -> "FeatureManifest":
        return FeatureManifest([e for e in self.entries if predicate(e)])

    def to_json(self) -> str:
        doc = {"version": MANIFEST_VERSION, "entries": [asdict(e) for e in self.entries]}
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FeatureManifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest is not valid JSON: {exc.msg}", offset=exc.pos) from exc
        if not isinstance(doc, dict) or doc.get("version") != MANIFEST_VERSION:
            raise FormatError(f"manifest version must be {MANIFEST_VERSION!r}")
        return cls([FeatureEntry(**e) for e in doc["entries"]])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "FeatureManifest":
        try:
            return cls.from_json(Path(path).read_text())
        except FormatError as exc:
            raise FormatError(str(exc), path=path) from exc


def _modality_entries(mod: str) -> list[FeatureEntry]:
    m = mod.lower()
    out = []
    for sigma in (1, 2):
        for output in ("max", "argmax"):
            out.append(FeatureEntry(f"{m}.elongated.s{sigma}.{output}", mod, "elongated",
                                    {"sigma": sigma, "output": output,
                                     "orientations": filters.ELONGATED_ORIENTATIONS}))
    for output in ("vesselness", "scale"):
        out.append(FeatureEntry(f"{m}.frangi.{output}", mod, "frangi",
                                {"output": output, "sigmas": list(filters.FRANGI_SIGMAS)}))
    for output in ("L1", "L2", "orientation", "coherence"):
        out.append(FeatureEntry(f"{m}.structure_tensor.{output}", mod, "structure_tensor",
                                {"output": output, "grad_sigma": 1.0, "window_sigma": 2.0}))
    for se in (2, 3):
        out.append(FeatureEntry(f"{m}.black_top_hat.se{se}", mod, "black_top_hat", {"se": se}))
    out.append(FeatureEntry(f"{m}.lbp", mod, "lbp",
                            {"points": filters.LBP_POINTS, "radius": filters.LBP_RADIUS},
                            kind="categorical", categories=filters.LBP_CATEGORIES))
    out.append(FeatureEntry(f"{m}.intensity", mod, "intensity", {}))
    for size in filters.MEDIAN_SIZES:
        out.append(FeatureEntry(f"{m}.median.{size}", mod, "median", {"size": size}))
    for sigma in filters.LOG_SIGMAS:
        out.append(FeatureEntry(f"{m}.log.s{sigma:g}", mod, "log", {"sigma": sigma}))
    for i, (_, info) in enumerate(filters.leung_malik_bank()):
        out.append(FeatureEntry(f"{m}.lm.{i:02d}", mod, "leung_malik", {"index": i, **info}))
    return out


def default_manifest() -> FeatureManifest:
    """68 filters per modality plus R, G, B and hue for the visible image: 208 entries."""
    entries = []
    for mod in MODALITIES:
        entries += _modality_entries(mod)
        if mod == "VIS":
            entries += [FeatureEntry(f"vis.color.{c.lower()}", "VIS", "color", {"channel": c})
                        for c in COLOR_CHANNELS]
    return FeatureManifest(entries)


@dataclass(frozen=True, eq=False)
class FeatureStack:
    planes: np.ndarray  # (P, H, W) float64
    manifest: FeatureManifest

    def __post_init__(self):
        if self.planes.ndim != 3 or self.planes.shape[0] != len(self.manifest):
            raise ContractError(
                f"stack has {self.planes.shape[0] if self.planes.ndim == 3 else '?'} planes "
                f"but the manifest lists {len(self.manifest)}")
        if not np.all(np.isfinite(self.planes)):
            raise ContractError("feature planes must be finite")

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    def to_hwc(self) -> np.ndarray:
        return np.moveaxis(self.planes, 0, -1)

    @classmethod
    def from_hwc(cls, data: np.ndarray, manifest: FeatureManifest) -> "FeatureStack":
        return cls(np.ascontiguousarray(np.moveaxis(data, -1, 0)), manifest)


def rgb_hue(rgb: np.ndarray) -> np.ndarray:
    """HSV hue in [0, 1); zero for gray pixels."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    delta = mx - rgb.min(axis=-1)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, (g - b) / safe,
                 np.where(mx == g, 2.0 + (b - r) / safe, 4.0 + (r - g) / safe))
    h = np.where(delta > 0, np.mod(h / 6.0, 1.0), 0.0)
    return h


class _Extractor:
    """Computes manifest planes, sharing work between entries of one filter."""

    def __init__(self, modalities: ModalitySet):
        self.mods = modalities
        self.cache = {}
        self.lm_bank = None

    def gray(self, mod):
        key = ("gray", mod)
        if key not in self.cache:
            self.cache[key] = to_gray(self.mods.get(mod)).plane
        return self.cache[key]

    def _cached(self, key, fn):
        if key not in self.cache:
            self.cache[key] = fn()
        return self.cache[key]

    def plane(self, e: FeatureEntry) -> np.ndarray:
        p, mod = e.params, e.modality
        if e.filter == "elongated":
            mx, am = self._cached(("elongated", mod, p["sigma"], p["orientations"]),
                                  lambda: filters.elongated_features(self.gray(mod), p["sigma"], p["orientations"]))
            return mx if p["output"] == "max" else am
        if e.filter == "frangi":
            v, s = self._cached(("frangi", mod, tuple(p["sigmas"])),
                                lambda: filters.frangi_features(self.gray(mod), p["sigmas"]))
            return v if p["output"] == "vesselness" else s
        if e.filter == "structure_tensor":
            res = self._cached(("st", mod, p["grad_sigma"], p["window_sigma"]),
                               lambda: filters.structure_tensor_features(
                                   self.gray(mod), p["grad_sigma"], p["window_sigma"]))
            return res[("L1", "L2", "orientation", "coherence").index(p["output"])]
        if e.filter == "black_top_hat":
            return filters.black_top_hat(self.gray(mod), p["se"])
        if e.filter == "lbp":
            return filters.lbp_riu(self.gray(mod), p["points"], p["radius"])
        if e.filter == "intensity":
            return self.gray(mod)
        if e.filter == "median":
            return filters.median_filter(self.gray(mod), p["size"])
        if e.filter == "log":
            return filters.log_filter(self.gray(mod), p["sigma"])
        if e.filter == "leung_malik":
            if self.lm_bank is None:
                self.lm_bank = filters.leung_malik_bank()
            kernel, _ = self.lm_bank[p["index"]]
            return filters.correlate(self.gray(mod), kernel.weights)
        if e.filter == "color":
            rgb = self.mods.vis.data
            if rgb.shape[2] != 3:
                rgb = np.repeat(rgb, 3, axis=2)
            if p["channel"] == "hue":
                return rgb_hue(rgb)
            return rgb[:, :, "RGB".index(p["channel"])]
        raise ContractError(f"unknown filter {e.filter!r} in manifest entry {e.feature_id}")


def extract_features(modalities: ModalitySet, manifest: FeatureManifest | None = None) -> FeatureStack:
    """Evaluate every manifest entry on its modality; planes follow manifest order."""
    if manifest is None:
        manifest = default_manifest()
    h, w = modalities.shape
    ex = _Extractor(modalities)
    planes = np.empty((len(manifest), h, w))
    for i, entry in enumerate(manifest):
        planes[i] = ex.plane(entry)
    return FeatureStack(planes, manifest)
