"""Equal-frequency quantization of feature planes and training-set assembly."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, ParameterError
from .features import FeatureStack
from .raster import Raster, encode_pnm, read_pnm

QUANTIZER_VERSION = "quantizer-1"
DEFAULT_BINS = 11

BACKGROUND = 0
CRACK = 1
UNLABELED = -1
_MASK_LEVELS = {BACKGROUND: 0, CRACK: 255, UNLABELED: 128}


@dataclass(frozen=True)
class QuantizerSpec:
    """Per-feature bin edges; ``None`` marks a categorical passthrough column."""

    feature_ids: tuple
    edges: tuple  # per feature: ascending float tuple, or None
    categories: tuple  # per feature: d_j
    d_default: int

    def to_json(self) -> str:
        doc = {
            "version": QUANTIZER_VERSION,
            "d_default": self.d_default,
            "features": [
                {"feature_id": fid, "categories": d,
                 "passthrough": e is None, "bin_edges": None if e is None else list(e)}
                for fid, e, d in zip(self.feature_ids, self.edges, self.categories)
            ],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "QuantizerSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"quantizer spec is not valid JSON: {exc.msg}", offset=exc.pos) from exc
        if not isinstance(doc, dict) or doc.get("version") != QUANTIZER_VERSION:
            raise FormatError(f"quantizer spec version must be {QUANTIZER_VERSION!r}")
        feats = doc["features"]
        return cls(
            tuple(f["feature_id"] for f in feats),
            tuple(None if f["passthrough"] else tuple(f["bin_edges"]) for f in feats),
            tuple(int(f["categories"]) for f in feats),
            int(doc["d_default"]),
        )

    @property
    def degenerate(self) -> list[int]:
        """Indices of columns that collapsed to a single category."""
        return [j for j, d in enumerate(self.categories) if d == 1]


def quantile_edges(values: np.ndarray, d: int) -> np.ndarray:
    """Equal-frequency edges: value v falls in bin 1 + #{edges < v}.

    Edge i is the largest value of the i-th tenth (for d = 10) of the sorted
    sample.  Duplicates and edges at or above the maximum are dropped, so a
    constant feature has no edges at all.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = v.size
    idx = -(-np.arange(1, d) * n // d) - 1  # ceil(i * n / d) - 1
    edges = np.unique(v[idx])
    return edges[edges < v[-1]]


def fit_quantizer(stack: FeatureStack, d: int = DEFAULT_BINS) -> QuantizerSpec:
    """Fit equal-frequency bins for every continuous plane of `stack`."""
    if d < 2:
        raise ParameterError(f"need at least 2 bins, got {d}")
    if stack.planes.size == 0:
        raise ContractError("cannot fit a quantizer on an empty stack")
    edges, cats = [], []
    for entry, plane in zip(stack.manifest, stack.planes):
        if entry.kind == "categorical":
            edges.append(None)
            cats.append(int(entry.categories))
        else:
            e = quantile_edges(plane, d)
            edges.append(tuple(float(x) for x in e))
            cats.append(len(e) + 1)
    ids = tuple(e.feature_id for e in stack.manifest)
    return QuantizerSpec(ids, tuple(edges), tuple(cats), d)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """n observations by p categorical predictors, 1-based categories."""

    values: np.ndarray  # (n, p) uint16
    d: np.ndarray  # (p,) category counts

    def __post_init__(self):
        values = np.asarray(self.values)
        d = np.asarray(self.d, dtype=np.int64)
        if values.ndim != 2 or values.shape[1] != d.size:
            raise ContractError(f"values shape {values.shape} does not match {d.size} predictors")
        if values.size and (values.min() < 1 or np.any(values.max(axis=0) > d)):
            raise ContractError("category values out of range 1..d_j")
        object.__setattr__(self, "values", values.astype(np.uint16))
        object.__setattr__(self, "d", d)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


def apply_quantizer(stack: FeatureStack, spec: QuantizerSpec) -> FeatureMatrix:
    """Map each pixel of `stack` to categories; rows follow row-major pixel order."""
    ids = tuple(e.feature_id for e in stack.manifest)
    if ids != spec.feature_ids:
        raise ContractError("feature stack manifest does not match the quantizer spec")
    n = stack.height * stack.width
    out = np.empty((n, len(ids)), dtype=np.uint16)
    for j, (plane, edges, d) in enumerate(zip(stack.planes, spec.edges, spec.categories)):
        flat = plane.ravel()
        if edges is None:
            cat = np.rint(flat).astype(np.int64) + 1
            if cat.min() < 1 or cat.max() > d:
                raise ContractError(f"categorical feature {ids[j]} has values outside 0..{d - 1}")
        else:
            cat = 1 + np.searchsorted(np.asarray(edges), flat, side="left")
        out[:, j] = cat
    return FeatureMatrix(out, np.asarray(spec.categories))


def assemble_training(matrix: FeatureMatrix, labels: np.ndarray):
    """Rows of labeled pixels (row-major order) and their 0/1 labels."""
    labels = np.asarray(labels)
    if labels.size != matrix.n:
        raise ContractError(f"label mask has {labels.size} pixels, feature matrix has {matrix.n}")
    flat = labels.ravel()
    for cls, name in ((CRACK, "crack"), (BACKGROUND, "background")):
        if not np.any(flat == cls):
            raise ContractError(f"no labeled {name} pixels")
    rows = np.flatnonzero(flat != UNLABELED)
    return matrix.values[rows], (flat[rows] == CRACK).astype(np.int8)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

BFM_MAGIC = b"BFM1"
_BFM_HEADER = struct.Struct("<4sII")


def encode_bfm(matrix: FeatureMatrix) -> bytes:
    head = _BFM_HEADER.pack(BFM_MAGIC, matrix.n, matrix.p)
    return head + matrix.d.astype("<u2").tobytes() + matrix.values.astype("<u2").tobytes()


def decode_bfm(buf: bytes, path=None) -> FeatureMatrix:
    if len(buf) < _BFM_HEADER.size:
        raise FormatError("file too short for a BFM1 header", offset=len(buf), path=path)
    magic, n, p = _BFM_HEADER.unpack_from(buf, 0)
    if magic != BFM_MAGIC:
        raise FormatError(f"bad BFM1 magic {magic!r}", offset=0, path=path)
    need = _BFM_HEADER.size + 2 * p + 2 * n * p
    if len(buf) != need:
        raise FormatError(f"BFM1 size mismatch: expected {need} bytes, found {len(buf)}",
                          offset=min(len(buf), need), path=path)
    off = _BFM_HEADER.size
    d = np.frombuffer(buf, dtype="<u2", count=p, offset=off).astype(np.int64)
    values = np.frombuffer(buf, dtype="<u2", count=n * p, offset=off + 2 * p).reshape(n, p)
    try:
        return FeatureMatrix(values.copy(), d)
    except ContractError as exc:
        raise FormatError(str(exc), offset=off + 2 * p, path=path) from exc


def write_bfm(matrix: FeatureMatrix, path) -> None:
    Path(path).write_bytes(encode_bfm(matrix))


def read_bfm(path) -> FeatureMatrix:
    path = Path(path)
    return decode_bfm(path.read_bytes(), path=path)


def encode_label_mask(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    gray = np.full(labels.shape, _MASK_LEVELS[UNLABELED], dtype=np.float64)
    gray[labels == BACKGROUND] = 0
    gray[labels == CRACK] = 255
    return encode_pnm(Raster(gray / 255.0), depth=8)


def write_label_mask(labels: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_label_mask(labels))


def read_label_mask(path) -> np.ndarray:
    """Read an 8-bit PGM mask: 0 background, 255 crack, 128 unlabeled."""
    r = read_pnm(path)
    if r.channels != 1:
        raise FormatError("label mask must be a PGM (P5) file", offset=0, path=path)
    g = np.rint(r.plane * 255).astype(np.int64)
    out = np.full(g.shape, UNLABELED, dtype=np.int8)
    out[g == 0] = BACKGROUND
    out[g == 255] = CRACK
    bad = ~np.isin(g, (0, 128, 255))
    if bad.any():
        pos = int(np.flatnonzero(bad.ravel())[0])
        raise FormatError(f"label mask value {g.ravel()[pos]} is not one of 0, 128, 255 (pixel {pos})",
                          path=path)
    return out
