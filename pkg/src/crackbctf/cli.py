"""Command-line pipeline: preprocess -> align -> features -> quantize -> train -> predict.

Every stage writes its outputs plus ``<output>.run.json`` recording the
parameters and SHA-256 hashes of inputs and outputs.  Failures print one JSON
line prefixed with ``error:`` on stderr and exit with

    2 bad arguments, 3 missing or corrupt input, 4 contract violation,
    5 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bctf import (BctfPosterior, Hyper, fit, format_selection, predict, selection_report,
                   threshold_map)
from .errors import ContractError, ConvergenceError, FormatError, ParameterError
from .features import FeatureManifest, FeatureStack, ModalitySet, default_manifest, extract_features
from .mca import mca_separate
from .preprocess import align_translation, apply_offset, clahe, crude_crack_map, xray_flatten
from .quantize import (BACKGROUND, CRACK, QuantizerSpec, apply_quantizer, encode_bfm,
                       encode_label_mask, fit_quantizer, read_bfm, read_label_mask)
from .raster import FR32_MAGIC, Raster, decode_fr32, encode_fr32, encode_pnm, read_pnm
from .synth import SynthSpec, overlay, synth_scene

EXIT_OK = 0
EXIT_ARGS = 2
EXIT_INPUT = 3
EXIT_CONTRACT = 4
EXIT_NUMERIC = 5

log = logging.getLogger("crackbctf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------

def _require(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input not found: {path}")
    return path


def read_raster(path) -> Raster:
    """PNM or FR32, chosen by the leading magic bytes."""
    path = _require(path)
    head = path.read_bytes()[:4]
    if head[:2] in (b"P5", b"P6"):
        return read_pnm(path)
    if head == FR32_MAGIC:
        data = decode_fr32(path.read_bytes(), path=path)
        return Raster(data)
    raise FormatError(f"unrecognized raster magic {head!r}", offset=0, path=path)


def _raster_bytes(raster: Raster, path: Path) -> bytes:
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        return encode_pnm(Raster(np.clip(raster.data, 0.0, 1.0)), depth=16)
    return encode_fr32(raster.data)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Stage:
    """Collects inputs and outputs of one command and writes the run manifest."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.params = {k: v for k, v in sorted(vars(args).items())
                       if k not in ("func", "config") and not callable(v)}
        self.inputs = {}
        self.outputs = []

    def input(self, path) -> Path:
        path = _require(path)
        self.inputs[str(path)] = _sha256(path)
        return path

    def write(self, path, data: bytes) -> None:
        path = Path(path)
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.outputs.append(path)

    def finish(self) -> None:
        doc = {
            "command": self.command,
            "version": __version__,
            "parameters": {k: (str(v) if isinstance(v, Path) else v) for k, v in self.params.items()},
            "inputs": self.inputs,
            "outputs": {str(p): _sha256(p) for p in self.outputs},
        }
        text = json.dumps(doc, indent=1, sort_keys=True)
        for p in self.outputs:
            Path(str(p) + ".run.json").write_text(text)


def _load_stack(stage: Stage, features, manifest) -> FeatureStack:
    man = FeatureManifest.load(stage.input(manifest))
    path = stage.input(features)
    data = decode_fr32(path.read_bytes(), path=path)
    if data.shape[2] != len(man):
        raise ContractError(f"feature file has {data.shape[2]} planes, manifest lists {len(man)}")
    return FeatureStack.from_hwc(data.astype(np.float64), man)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    st = Stage("preprocess", args)
    img = read_raster(st.input(args.input))
    if args.method == "clahe":
        out = clahe(img, args.tiles, args.tiles, args.clip)
    elif args.method == "flatten":
        out = xray_flatten(img, args.blur_sigma)
    elif args.method == "mca":
        res = mca_separate(img, iterations=args.mca_iterations)
        out = res.cartoon if args.component == "cartoon" else res.texture
    else:
        out = img
    st.write(args.output, _raster_bytes(out, Path(args.output)))
    st.finish()
    return EXIT_OK


def cmd_align(args) -> int:
    st = Stage("align", args)
    ref = read_raster(st.input(args.reference))
    mov = read_raster(st.input(args.moving))
    if (ref.height, ref.width) != (mov.height, mov.width):
        raise ContractError(f"reference is {ref.width}x{ref.height}, moving is {mov.width}x{mov.height}")
    off = align_translation(crude_crack_map(ref, modality="reference"),
                            crude_crack_map(mov, modality="moving"), args.radius)
    st.write(args.output, _raster_bytes(apply_offset(mov, off), Path(args.output)))
    doc = json.dumps({"dx": off.dx, "dy": off.dy, "score": off.score})
    if args.offset_out:
        st.write(args.offset_out, doc.encode())
    print(doc)
    st.finish()
    return EXIT_OK


def cmd_features(args) -> int:
    st = Stage("features", args)
    mods = ModalitySet(read_raster(st.input(args.ir)), read_raster(st.input(args.vis)),
                       read_raster(st.input(args.xray)))
    man = FeatureManifest.load(st.input(args.manifest)) if args.manifest else default_manifest()
    stack = extract_features(mods, man)
    st.write(args.output, encode_fr32(stack.to_hwc()))
    st.write(args.manifest_out, man.to_json().encode())
    st.finish()
    return EXIT_OK


def cmd_quantize_fit(args) -> int:
    st = Stage("quantize-fit", args)
    stack = _load_stack(st, args.features, args.manifest)
    spec = fit_quantizer(stack, args.bins)
    st.write(args.output, spec.to_json().encode())
    st.finish()
    return EXIT_OK


def _load_quantizer(stage, path) -> QuantizerSpec:
    p = stage.input(path)
    try:
        return QuantizerSpec.from_json(p.read_text())
    except FormatError as exc:
        raise FormatError(str(exc), path=p) from exc


def cmd_quantize_apply(args) -> int:
    st = Stage("quantize-apply", args)
    stack = _load_stack(st, args.features, args.manifest)
    spec = _load_quantizer(st, args.quantizer)
    st.write(args.output, encode_bfm(apply_quantizer(stack, spec)))
    st.finish()
    return EXIT_OK


def balanced_pixels(labels: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Up to count/2 crack and count/2 background pixels, drawn without replacement."""
    flat = labels.ravel()
    picks = []
    for cls in (CRACK, BACKGROUND):
        pool = np.flatnonzero(flat == cls)
        if pool.size == 0:
            raise ContractError(f"no labeled {'crack' if cls == CRACK else 'background'} pixels")
        take = min(pool.size, count // 2)
        picks.append(rng.choice(pool, take, replace=False))
    return np.sort(np.concatenate(picks))


def cmd_train(args) -> int:
    st = Stage("train", args)
    mp = st.input(args.matrix)
    matrix = read_bfm(mp)
    labels = read_label_mask(st.input(args.labels))
    if labels.size != matrix.n:
        raise ContractError(f"label mask has {labels.size} pixels, feature matrix has {matrix.n}")
    rng = np.random.default_rng(args.seed)
    if args.train_pixels:
        rows = balanced_pixels(labels, args.train_pixels, rng)
    else:
        rows = np.flatnonzero(labels.ravel() != -1)
    y = (labels.ravel()[rows] == CRACK).astype(np.int64)
    ids = _load_quantizer(st, args.quantizer).feature_ids if args.quantizer else ()
    hyper = Hyper(r=args.r, rbar=args.rbar, iterations=args.iters, burn_in=args.burnin,
                  thin=args.thin, seed=args.seed)
    post = fit(matrix.values[rows], y, hyper, d=matrix.d, feature_ids=ids)
    st.write(args.output, post.to_json().encode())
    st.finish()
    return EXIT_OK


def cmd_predict(args) -> int:
    st = Stage("predict", args)
    post = BctfPosterior.load(st.input(args.posterior))
    matrix = read_bfm(st.input(args.matrix))
    if args.width * args.height != matrix.n:
        raise ContractError(f"{args.width}x{args.height} does not match {matrix.n} matrix rows")
    prob = predict(post, matrix).reshape(args.height, args.width)
    st.write(args.output, encode_fr32(prob[:, :, None]))
    if args.binary:
        st.write(args.binary, encode_pnm(Raster(threshold_map(prob, args.threshold).astype(float)), 8))
    st.finish()
    return EXIT_OK


def cmd_select(args) -> int:
    st = Stage("select", args)
    post = BctfPosterior.load(st.input(args.posterior))
    man = FeatureManifest.load(st.input(args.manifest)) if args.manifest else None
    if man is not None and len(man) != post.p:
        raise ContractError(f"manifest lists {len(man)} features, posterior has {post.p}")
    text = format_selection(selection_report(post, man, args.cutoff))
    sys.stdout.write(text)
    if args.output:
        st.write(args.output, text.encode())
        st.finish()
    return EXIT_OK


def cmd_synth(args) -> int:
    st = Stage("synth", args)
    spec = SynthSpec(width=args.width, height=args.height, cracks=args.cracks,
                     crack_width=(args.min_width, args.max_width), distractors=args.distractors,
                     noise={"IR": args.noise, "VIS": args.noise, "XRAY": args.noise},
                     grain=args.grain, seed=args.seed)
    scene = synth_scene(spec)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, r in (("ir.pgm", scene.modalities.ir), ("vis.ppm", scene.modalities.vis),
                    ("xray.pgm", scene.modalities.xray)):
        st.write(out / name, encode_pnm(r, depth=16))
    st.write(out / "labels.pgm", encode_label_mask(scene.labels))
    st.write(out / "strokes.pgm", encode_pnm(Raster(scene.strokes.astype(float)), 8))
    st.finish()
    return EXIT_OK


def cmd_overlay(args) -> int:
    st = Stage("overlay", args)
    vis = read_raster(st.input(args.vis))
    crack = read_raster(st.input(args.crack))
    if crack.channels != 1:
        raise FormatError("crack map must be single-channel", path=args.crack)
    st.write(args.output, encode_pnm(overlay(vis, crack.plane >= 0.5), depth=8))
    st.finish()
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crackbctf", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file of option values; command-line flags take precedence")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("preprocess", help="CLAHE, X-ray flattening or MCA on one raster")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--method", choices=("clahe", "flatten", "mca", "none"), default="clahe")
    s.add_argument("--tiles", type=int, default=8)
    s.add_argument("--clip", type=float, default=3.0)
    s.add_argument("--blur-sigma", type=float, default=30.0)
    s.add_argument("--mca-iterations", type=int, default=30)
    s.add_argument("--component", choices=("cartoon", "texture"), default="cartoon")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("align", help="register a modality onto a reference by crude crack maps")
    s.add_argument("--reference", required=True)
    s.add_argument("--moving", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--radius", type=int, default=10)
    s.add_argument("--offset-out")
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("features", help="compute the feature stack")
    s.add_argument("--ir", required=True)
    s.add_argument("--vis", required=True)
    s.add_argument("--xray", required=True)
    s.add_argument("--manifest", help="manifest JSON selecting features (default: all 208)")
    s.add_argument("--output", required=True)
    s.add_argument("--manifest-out", required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("quantize-fit", help="fit equal-frequency bins")
    s.add_argument("--features", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--bins", type=int, default=11)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_quantize_fit)

    s = sub.add_parser("quantize-apply", help="quantize a feature stack into a BFM1 matrix")
    s.add_argument("--features", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--quantizer", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_quantize_apply)

    s = sub.add_parser("train", help="fit the classifier on labeled pixels")
    s.add_argument("--matrix", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--quantizer", help="quantizer JSON, used to record feature ids")
    s.add_argument("--output", required=True)
    s.add_argument("--train-pixels", type=int, default=0,
                   help="balanced random subset of labeled pixels (0 = all labeled pixels)")
    s.add_argument("--r", type=float, default=5.0)
    s.add_argument("--rbar", type=int, default=20)
    s.add_argument("--iters", type=int, default=5000)
    s.add_argument("--burnin", type=int, default=2000)
    s.add_argument("--thin", type=int, default=5)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="probability and binary crack maps")
    s.add_argument("--posterior", required=True)
    s.add_argument("--matrix", required=True)
    s.add_argument("--width", type=int, required=True)
    s.add_argument("--height", type=int, required=True)
    s.add_argument("--output", required=True, help="probability map (FR32)")
    s.add_argument("--binary", help="binary crack map (PGM)")
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("select", help="report predictors with inclusion probability above a cutoff")
    s.add_argument("--posterior", required=True)
    s.add_argument("--manifest")
    s.add_argument("--cutoff", type=float, default=0.5)
    s.add_argument("--output")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("synth", help="generate a synthetic multimodal scene")
    s.add_argument("--output-dir", required=True)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--height", type=int, default=256)
    s.add_argument("--cracks", type=int, default=8)
    s.add_argument("--distractors", type=int, default=6)
    s.add_argument("--min-width", type=int, default=1)
    s.add_argument("--max-width", type=int, default=3)
    s.add_argument("--noise", type=float, default=0.02)
    s.add_argument("--grain", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("overlay", help="paint a binary crack map red over grayscale VIS")
    s.add_argument("--vis", required=True)
    s.add_argument("--crack", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_overlay)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv) -> None:
    """Turn config values into parser defaults so explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    path = _require(known.config)
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"config is not valid JSON: {exc.msg}", offset=exc.pos, path=path) from exc
    if not isinstance(cfg, dict):
        raise FormatError("config must be a JSON object", offset=0, path=path)
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
    flat = {k.replace("-", "_"): v for k, v in cfg.items() if not isinstance(v, dict)}
    if "seed" in flat:
        parser.set_defaults(seed=flat["seed"])
    for name, sp in subs.items():
        dests = {a.dest for a in sp._actions}
        values = {k: v for k, v in flat.items() if k in dests}
        section = cfg.get(name, {})
        if isinstance(section, dict):
            values.update({k.replace("-", "_"): v for k, v in section.items()})
        unknown = set(values) - dests
        if unknown:
            raise ParameterError(f"unknown config keys for {name}: {sorted(unknown)}")
        for a in sp._actions:
            if a.dest in values:
                a.required = False
        sp.set_defaults(**values)


def _fail(kind: str, code: int, message: str) -> int:
    sys.stderr.write("error: " + json.dumps({"kind": kind, "exit": code, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with np.errstate(over="raise", invalid="raise", divide="ignore", under="ignore"):
            return args.func(args)
    except UsageError as exc:
        return _fail("bad_arguments", EXIT_ARGS, str(exc))
    except ParameterError as exc:
        return _fail("bad_arguments", EXIT_ARGS, str(exc))
    except FileNotFoundError as exc:
        return _fail("missing_input", EXIT_INPUT, str(exc))
    except FormatError as exc:
        return _fail("format_mismatch", EXIT_INPUT, str(exc))
    except ContractError as exc:
        return _fail("contract_violation", EXIT_CONTRACT, str(exc))
    except (ConvergenceError, FloatingPointError) as exc:
        return _fail("numeric_failure", EXIT_NUMERIC, str(exc))


if __name__ == "__main__":
    sys.exit(main())
