"""Command-line entry point: ``fgin {ingest,train,eval,sr,gradcheck,inspect}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure (non-finite loss, failed gradient check).

Config files are flat ``key = value`` text; keys are the field names of
:class:`~fgin.model.ModelConfig`, :class:`~fgin.train.TrainConfig` and
:class:`DataConfig`.  Values are parsed as JSON when possible (numbers,
``true``/``false``, ``null``) and kept as strings otherwise.  Command-line
flags override file values.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, metrics, ops
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (PATCH_SIZE, Cube, export_band_png, extract_patches, header_path, normalize,
                   read_cube, read_raw, write_cube)
from .errors import ConfigError, DataError, ShapeError
from .model import ModelConfig, buffer_count, layer_specs, param_count, predict
from .train import TrainConfig, bilinear_baseline, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.fgin"  # per-epoch, resumable
MODEL_NAME = "model.fgin"  # best weights, for eval / sr
TRAINLOG_NAME = "trainlog.csv"
MANIFEST_NAME = "manifest.json"

log = logging.getLogger("fgin")


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


@dataclass
class DataConfig:
    patch_size: int = PATCH_SIZE
    anchor: str = "top-left"
    val_fraction: float = 0.1


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    tool_version: str = __version__
    inputs: dict = field(default_factory=dict)   # path -> sha256 of file bytes
    outputs: dict = field(default_factory=dict)  # role -> path
    created: str = ""

    def write(self, path) -> None:
        self.created = self.created or time.strftime("%Y-%m-%dT%H:%M:%S")
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise UsageError(f"unreadable manifest {path}: {e}") from e


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cube_digests(path) -> dict:
    return {str(path): file_digest(path), str(header_path(path)): file_digest(header_path(path))}


# ---------------------------------------------------------------- config file

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines into ``{"model": {...}, "train": {...}, "data": {...}}``."""
    owner = {}
    for sec, cls in _SECTIONS.items():
        for f in fields(cls):
            owner.setdefault(f.name, sec)
    out = {sec: {} for sec in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        if key not in owner:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        out[owner[key]][key] = parsed
    return out


def format_config_text(resolved: dict) -> str:
    lines = []
    for sec in _SECTIONS:
        lines.append(f"# {sec}")
        for k, v in resolved[sec].items():
            lines.append(f"{k} = {json.dumps(v)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- argparse

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _layout(text: str):
    try:
        dims = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H,W,C, got {text!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive integers H,W,C, got {text!r}")
    return dims


def _bands(text: str):
    try:
        idx = [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected band index or R,G,B triple, got {text!r}")
    if len(idx) not in (1, 3):
        raise argparse.ArgumentTypeError("give one band index or an R,G,B triple")
    return idx


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fgin", description="Hyperspectral single-image super-resolution toolkit.")
    p.add_argument("--version", action="version", version=f"fgin {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="convert a raw float32 array to the normalized cube format")
    s.add_argument("--input", required=True, type=Path)
    s.add_argument("--layout", required=True, type=_layout, metavar="H,W,C")
    s.add_argument("--interleave", choices=("bsq", "bip"), default="bsq",
                   help="bsq: band-sequential [C,H,W]; bip: band-interleaved-by-pixel [H,W,C]")
    s.add_argument("--output", required=True, type=Path)

    s = sub.add_parser("train", help="extract patches and train a model")
    s.add_argument("--cube", type=Path)
    s.add_argument("--scale", type=int, choices=(2, 4, 8))
    s.add_argument("--config", type=Path, help="flat key = value file")
    s.add_argument("--manifest", type=Path, help="rerun from a previous run's manifest")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--no-band-grouping", action="store_true")
    s.add_argument("--group-size", type=int, choices=(16, 32, 48))
    s.add_argument("--no-spectral-fusion", action="store_true")
    s.add_argument("--upsampling", choices=("optimized", "bilinear"))
    s.add_argument("--features", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int, dest="max_epochs")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float, dest="learning_rate")
    s.add_argument("--patch-size", type=int)
    s.add_argument("--anchor", help="top-left | bottom-center | ROW,COL")
    s.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.fgin")

    s = sub.add_parser("eval", help="score a checkpoint on held-out patches")
    s.add_argument("--cube", required=True, type=Path)
    s.add_argument("--checkpoint", required=True, type=Path)
    s.add_argument("--scale", type=int, choices=(2, 4, 8))
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--role", choices=("test", "validation", "train"), default="test")
    s.add_argument("--patch-size", type=int, default=PATCH_SIZE)
    s.add_argument("--anchor", default="top-left")
    s.add_argument("--png-bands", type=_bands, help="export ground truth / bilinear / model PNGs")

    s = sub.add_parser("sr", help="super-resolve a whole cube with tiled inference")
    s.add_argument("--cube", required=True, type=Path)
    s.add_argument("--checkpoint", required=True, type=Path)
    s.add_argument("--output", required=True, type=Path)
    s.add_argument("--tile", type=int, help=f"input tile size (default {PATCH_SIZE}/scale)")
    s.add_argument("--tile-overlap", type=int, help="input-pixel overlap between tiles (default tile/4)")

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and block")
    s.add_argument("--tiny-config", action="store_true", help="use the tiny network (the only supported size)")
    s.add_argument("--probes", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("inspect", help="print the layer layout and parameter census")
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--config", type=Path)
    s.add_argument("--bands", type=int, help="band count C (default from config)")
    s.add_argument("--scale", type=int, choices=(2, 4, 8))
    s.add_argument("--no-band-grouping", action="store_true")
    s.add_argument("--group-size", type=int, choices=(16, 32, 48))
    s.add_argument("--no-spectral-fusion", action="store_true")
    s.add_argument("--upsampling", choices=("optimized", "bilinear"))
    return p


# ---------------------------------------------------------------- helpers

def _anchor(text):
    if text is None:
        return None
    if "," in str(text):
        r, c = str(text).split(",")
        return (int(r), int(c))
    return text


def _model_overrides(args) -> dict:
    if getattr(args, "no_band_grouping", False) and args.group_size is not None:
        raise UsageError("--group-size cannot be combined with --no-band-grouping")
    o = {}
    if args.no_band_grouping:
        o["use_band_grouping"] = False
    if args.group_size is not None:
        o["group_size"] = args.group_size
        o["overlap"] = args.group_size // 4
    if args.no_spectral_fusion:
        o["use_spectral_fusion"] = False
    if args.upsampling is not None:
        o["upsampling"] = "bilinear_only" if args.upsampling == "bilinear" else "optimized"
    if getattr(args, "features", None) is not None:
        o["features"] = args.features
    if args.scale is not None:
        o["scale"] = args.scale
    return o


def _read_config(path) -> dict:
    if path is None:
        return {sec: {} for sec in _SECTIONS}
    try:
        return parse_config_text(Path(path).read_text())
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e


def resolve_train_config(args, n_bands: int) -> dict:
    """Merge defaults, config file and flags into plain dicts."""
    cfg = _read_config(args.config)
    model, tr, data = cfg["model"], cfg["train"], cfg["data"]
    if args.no_band_grouping and "group_size" in model:
        raise UsageError("group_size in config cannot be combined with --no-band-grouping")
    model.update(_model_overrides(args))
    if "n_bands" in model and model["n_bands"] != n_bands:
        raise UsageError(f"config n_bands={model['n_bands']} but the cube has {n_bands} bands")
    model["n_bands"] = n_bands
    for key in ("seed", "max_epochs", "max_steps", "batch_size", "learning_rate"):
        v = getattr(args, key)
        if v is not None:
            tr[key] = v
    if args.patch_size is not None:
        data["patch_size"] = args.patch_size
    if args.anchor is not None:
        data["anchor"] = args.anchor
    mcfg = ModelConfig(**model)
    tr["scale"] = mcfg.scale
    tcfg = TrainConfig(**tr)
    dcfg = DataConfig(**data)
    return {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "data": asdict(dcfg)}


# ---------------------------------------------------------------- commands

def cmd_ingest(args) -> int:
    H, W, C = args.layout
    raw = read_raw(args.input, H, W, C, args.interleave)
    cube = normalize(raw)
    write_cube(cube, args.output)
    RunManifest("ingest", {"layout": [H, W, C], "interleave": args.interleave}, None,
                inputs={str(args.input): file_digest(args.input)},
                outputs={"cube": str(args.output), "header": str(header_path(args.output))}
                ).write(args.output.with_name(args.output.name + ".manifest.json"))
    print(f"wrote {args.output} ({H}x{W}x{C}), range [{cube.norm.global_min:g}, {cube.norm.global_max:g}]")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.manifest is not None:
        if args.config is not None or args.cube is not None:
            raise UsageError("--manifest replaces --cube and --config")
        man = RunManifest.read(args.manifest)
        if man.command != "train":
            raise UsageError(f"manifest records a {man.command!r} run, not 'train'")
        cube_path = Path(man.config["cube"])
        resolved = {k: man.config[k] for k in ("model", "train", "data")}
        if any(v not in (None, False) for k, v in vars(args).items()
               if k not in ("command", "manifest", "out", "verbose", "resume")):
            raise UsageError("--manifest cannot be combined with config flags")
    else:
        if args.cube is None:
            raise UsageError("train needs --cube (or --manifest)")
        cube_path = args.cube
        resolved = None
    cube = read_cube(cube_path)
    if resolved is None:
        if args.scale is None and args.config is None:
            raise UsageError("train needs --scale")
        resolved = resolve_train_config(args, cube.bands)
    mcfg = ModelConfig.from_dict(resolved["model"])
    tcfg = TrainConfig.from_dict(resolved["train"])
    dcfg = DataConfig(**resolved["data"])

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    ckpt, model_path, tlog_path = out / CHECKPOINT_NAME, out / MODEL_NAME, out / TRAINLOG_NAME
    resume = ckpt if args.resume and ckpt.exists() else None
    if args.resume and resume is None:
        raise UsageError(f"--resume: no checkpoint at {ckpt}")
    RunManifest("train", {"cube": str(cube_path), **resolved}, tcfg.seed, inputs=cube_digests(cube_path),
                outputs={"checkpoint": str(ckpt), "model": str(model_path), "trainlog": str(tlog_path),
                         "manifest": str(out / MANIFEST_NAME)}).write(out / MANIFEST_NAME)

    patches = extract_patches(cube, mcfg.scale, _anchor(dcfg.anchor), dcfg.patch_size,
                              dcfg.val_fraction, tcfg.seed)
    counts = {r: len(patches.by_role(r)) for r in ("train", "validation", "test")}
    print(f"param_count {param_count(mcfg)}  buffers {buffer_count(mcfg)}  groups {len(mcfg.group_spec())}")
    print(f"patches train {counts['train']} validation {counts['validation']} test {counts['test']}")

    def progress(rec):
        val = "" if rec.val_mpsnr is None else f"  val_mpsnr {rec.val_mpsnr:.4f}"
        print(f"epoch {rec.epoch:4d}  steps {rec.steps:6d}  loss {rec.train_loss:.6f}{val}{'  *' if rec.best else ''}",
              flush=True)

    store, tlog = train(patches, mcfg, tcfg, checkpoint_path=ckpt, resume_from=resume, progress=progress)
    tlog.to_csv(tlog_path)
    save_checkpoint(store, mcfg, model_path, {"train_log": tlog.to_dict()})
    print(f"stop {tlog.stop_reason}  best_epoch {tlog.best_epoch}  best_mpsnr {tlog.best_mpsnr}")
    if tlog.stop_reason == "diverged":
        raise NumericalFailure("training diverged (non-finite loss); kept the last finite parameters")
    return EXIT_OK


def cmd_eval(args) -> int:
    store, mcfg, _, _ = load_checkpoint(args.checkpoint)
    if args.scale is not None and args.scale != mcfg.scale:
        raise UsageError(f"--scale {args.scale} but the checkpoint was trained at {mcfg.scale}x")
    cube = read_cube(args.cube)
    if cube.bands != mcfg.n_bands:
        raise DataError(f"cube has {cube.bands} bands, checkpoint expects {mcfg.n_bands}")
    patches = extract_patches(cube, mcfg.scale, _anchor(args.anchor), args.patch_size, 0.1, 0)
    reports, agg = evaluate(store, patches, mcfg, args.role)
    base, base_agg = bilinear_baseline(patches, args.role)
    rows = reports + [agg] + base + [base_agg]
    args.out.mkdir(parents=True, exist_ok=True)
    metrics.reports_to_csv(rows, args.out / "metrics.csv")
    metrics.band_psnr_csv(rows, args.out / "band_psnr.csv")
    outputs = {"metrics": str(args.out / "metrics.csv"), "band_psnr": str(args.out / "band_psnr.csv")}
    if args.png_bands is not None:
        p = patches.by_role(args.role)[0]
        sr = np.clip(predict(p.lr, store, mcfg), 0, 1)
        bil = np.clip(ops.bilinear_resize(p.lr[None].astype(np.float64), p.scale)[0], 0, 1)
        for tag, img in (("ground_truth", p.hr), ("bilinear", bil), ("fgin", sr)):
            path = args.out / f"{tag}.png"
            export_band_png(img, args.png_bands, path)
            outputs[tag] = str(path)
    RunManifest("eval", {"checkpoint": str(args.checkpoint), "cube": str(args.cube), "role": args.role,
                         "patch_size": args.patch_size, "anchor": args.anchor, "model": mcfg.to_dict()},
                None, inputs={**cube_digests(args.cube), str(args.checkpoint): file_digest(args.checkpoint)},
                outputs=outputs).write(args.out / MANIFEST_NAME)
    print(agg.to_kv())
    print(base_agg.to_kv())
    return EXIT_OK


def tile_starts(n: int, tile: int, overlap: int) -> list:
    """Tile origins covering ``[0, n)``; the last tile is clamped to end at ``n``."""
    if tile >= n:
        return [0]
    stride = max(1, tile - overlap)
    starts = list(range(0, n - tile + 1, stride))
    if starts[-1] + tile < n:
        starts.append(n - tile)
    return starts


def super_resolve(values: np.ndarray, store, cfg: ModelConfig, tile: int | None = None,
                  overlap: int | None = None) -> np.ndarray:
    """Tiled inference over an ``[H, W, C]`` LR cube; overlapping tiles are averaged."""
    s = cfg.scale
    H, W, C = values.shape
    tile = tile or PATCH_SIZE // s
    overlap = tile // 4 if overlap is None else overlap
    if tile < 1 or not 0 <= overlap < tile:
        raise UsageError(f"need tile >= 1 and 0 <= overlap < tile, got tile={tile}, overlap={overlap}")
    acc = np.zeros((H * s, W * s, C))
    cnt = np.zeros((H * s, W * s, 1))
    th, tw = min(tile, H), min(tile, W)
    for r in tile_starts(H, th, overlap):
        for c in tile_starts(W, tw, overlap):
            out = predict(values[r:r + th, c:c + tw], store, cfg)
            win = (slice(r * s, (r + th) * s), slice(c * s, (c + tw) * s))
            # running mean: exact wherever overlapping tiles agree
            cnt[win] += 1
            acc[win] += (out - acc[win]) / cnt[win]
    return acc


def cmd_sr(args) -> int:
    store, mcfg, _, _ = load_checkpoint(args.checkpoint)
    cube = read_cube(args.cube)
    if cube.bands != mcfg.n_bands:
        raise DataError(f"cube has {cube.bands} bands, checkpoint expects {mcfg.n_bands}")
    out = super_resolve(cube.values, store, mcfg, args.tile, args.tile_overlap)
    if not np.all(np.isfinite(out)):
        raise NumericalFailure("non-finite values in the super-resolved cube")
    write_cube(Cube(np.clip(out, 0.0, 1.0).astype(np.float32), cube.norm), args.output)
    RunManifest("sr", {"checkpoint": str(args.checkpoint), "cube": str(args.cube), "tile": args.tile,
                       "tile_overlap": args.tile_overlap, "model": mcfg.to_dict()}, None,
                inputs={**cube_digests(args.cube), str(args.checkpoint): file_digest(args.checkpoint)},
                outputs={"cube": str(args.output)}
                ).write(args.output.with_name(args.output.name + ".manifest.json"))
    print(f"wrote {args.output} ({out.shape[0]}x{out.shape[1]}x{out.shape[2]})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, format_report, run_suite

    t0 = time.perf_counter()
    results = run_suite(n_probes=args.probes, seed=args.seed)
    print(format_report(results))
    failed = [r.name for r in results if not r.passed(TOLERANCE)]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - t0:.1f}s")
    if failed:
        raise NumericalFailure(f"gradient check failed: {', '.join(failed)}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.checkpoint is not None:
        store, mcfg, _, _ = load_checkpoint(args.checkpoint)
        print(f"checkpoint {args.checkpoint}  dtype {store.dtype}  adam_t {store.t}")
    else:
        cfg = _read_config(args.config)
        model = cfg["model"]
        model.update(_model_overrides(args))
        if args.bands is not None:
            model["n_bands"] = args.bands
        mcfg = ModelConfig(**model)
    for spec in layer_specs(mcfg):
        print("  ".join(str(t) for t in spec))
    spec = mcfg.group_spec()
    print(f"groups {len(spec)}: " + " ".join(f"[{a},{b})" for a, b in spec.intervals))
    print(f"param_count {param_count(mcfg)}")
    print(f"buffer_count {buffer_count(mcfg)}")
    return EXIT_OK


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval, "sr": cmd_sr,
            "gradcheck": cmd_gradcheck, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"fgin {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, FileNotFoundError, IsADirectoryError) as e:
        print(f"fgin {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, FloatingPointError) as e:
        print(f"fgin {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
