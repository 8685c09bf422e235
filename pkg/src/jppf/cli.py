"""``jppf`` command-line interface.

Subcommands: fuse, merge, eval, synth, viz, bench. Shared options may also
come from a ``--config`` file of ``key = value`` lines (keys are the long
option names with dashes or underscores); command-line flags win.

Exit status is 0 on success. Errors print ``jppf: error: <kind>: <detail>``
to stderr and exit with a code per kind (see ``EXIT_CODES``).
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields
from typing import Optional, Sequence

from ._validation import CatalogMismatchError
from .bench import run_bench
from .config import FusionConfig
from .detections import DetectionFormatError, read_detections, write_detections
from .fusion import jppf, panoptic_fuse_two
from .labelmap import load_labelmap, save_labelmap
from .merge import part_map_from_logits, top_down_merge
from .metrics import PanopticPartEvaluator
from .synth import SceneConfig, SceneGenerationError, generate_scene
from .taxonomy import CatalogError, UnknownClassError, load_catalog
from .tensors import BoundsError, ShapeError, TensorFormatError, load_tensor, save_tensor
from .viz import save_png

EXIT_CODES = {
    "usage": 2,
    "missing file": 3,
    "format": 4,
    "catalog mismatch": 5,
    "shape": 6,
    "generation": 7,
    "config": 8,
    "io": 9,
}


class ConfigFileError(ValueError):
    pass


@dataclass
class RunConfig:
    catalog: str = "cpp"
    confidence: float = 0.5
    overlap: float = 0.5
    min_stuff: Optional[int] = None
    normalize: bool = True
    seed: int = 0
    threads: int = 1
    reps: int = 5
    out: Optional[str] = None

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(self.confidence, self.overlap, self.min_stuff, self.normalize)

    def validate(self, command: str) -> None:
        if self.reps < 1:
            raise ConfigFileError(f"reps must be >= 1, got {self.reps}")
        if self.threads < 1:
            raise ConfigFileError(f"threads must be >= 1, got {self.threads}")
        if command in ("fuse", "merge", "synth", "viz") and not self.out:
            raise ConfigFileError(f"`{command}` needs an output path (--out)")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config_file(path: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigFileError(f"{path}:{lineno}: expected `key = value`")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            if key == "no_normalize":
                key, value = "normalize", str(not _parse_bool(value))
            if key not in types:
                raise ConfigFileError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                if key == "normalize":
                    values[key] = _parse_bool(value)
                elif key in ("confidence", "overlap"):
                    values[key] = float(value)
                elif key in ("seed", "threads", "reps"):
                    values[key] = int(value)
                elif key == "min_stuff":
                    values[key] = None if value.lower() in ("", "none", "auto") else int(value)
                else:
                    values[key] = value
            except ValueError as exc:
                raise ConfigFileError(f"{path}:{lineno}: {exc}") from None
    return values


def _common(parser: argparse.ArgumentParser) -> None:
    # defaults stay None so that config-file values can fill the gaps
    parser.add_argument("--config", help="key = value file; flags override it")
    parser.add_argument("--catalog", help="cpp, ppp, or a catalog file path")
    parser.add_argument("--confidence", type=float, help="detection score threshold")
    parser.add_argument("--overlap", type=float, help="mask overlap suppression threshold")
    parser.add_argument("--min-stuff", type=int, dest="min_stuff", help="minimum stuff region size in pixels")
    parser.add_argument("--no-normalize", action="store_const", const=False, dest="normalize",
                        help="skip the softmax on semantic and part logits")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int, help="worker threads")
    parser.add_argument("--reps", type=int, help="benchmark repetitions")
    parser.add_argument("--out", help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jppf", description="Joint panoptic-part fusion tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="fuse head outputs into a panoptic-part label map")
    _common(p)
    p.add_argument("--sem", required=True, help="semantic logits [N, H, W]")
    p.add_argument("--parts", required=True, help="part logits [N_P, H, W]")
    p.add_argument("--dets", required=True, help="detection record file")

    p = sub.add_parser("merge", help="top-down baseline: panoptic fusion, then part overlay")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--panoptic", help="precomputed panoptic label map")
    src.add_argument("--sem", help="semantic logits; the panoptic map is fused from --sem and --dets")
    p.add_argument("--dets", help="detection record file (with --sem)")
    part_src = p.add_mutually_exclusive_group(required=True)
    part_src.add_argument("--parts", help="part logits, argmaxed internally")
    part_src.add_argument("--part-map", dest="part_map", help="part id map [H, W] (uint16)")

    p = sub.add_parser("eval", help="evaluate a label map against ground truth")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--sem", help="semantic logits, for the semantic mIoU column")
    p.add_argument("--parts", help="part logits, for the part mIoU column")
    p.add_argument("--dets", help="detections, for the instance AP column")

    p = sub.add_parser("synth", help="write a synthetic scene (gt, heads, detections)")
    _common(p)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--instances", type=int, nargs=2, metavar=("MIN", "MAX"), default=(2, 5))
    p.add_argument("--noise", type=float, default=0.0, help="logit noise sigma")
    p.add_argument("--jitter", type=int, default=0, help="box jitter in pixels")

    p = sub.add_parser("viz", help="render a label map as PNG")
    _common(p)
    p.add_argument("--in", dest="input", required=True, help="label map file")
    p.add_argument("--no-outlines", action="store_true")

    p = sub.add_parser("bench", help="time jppf against panoptic fusion + top-down merge")
    _common(p)
    p.add_argument("--scene", help="directory written by `synth`; default generates one")
    p.add_argument("--width", type=int, default=2048)
    p.add_argument("--height", type=int, default=1024)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--noise", type=float, default=1.0)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    cfg = RunConfig(**values)
    cfg.validate(args.command)
    return cfg


def _scene_paths(directory: str) -> dict:
    names = {"gt": "gt.jptf", "sem": "sem.jptf", "parts": "parts.jptf", "dets": "dets.txt", "config": "scene.cfg"}
    return {k: os.path.join(directory, v) for k, v in names.items()}


def _cmd_fuse(args, cfg: RunConfig) -> int:
    catalog = load_catalog(cfg.catalog)
    out = jppf(load_tensor(args.sem), load_tensor(args.parts), read_detections(args.dets),
               catalog, cfg.fusion_config(), cfg.threads)
    save_labelmap(cfg.out, out)
    return 0


def _cmd_merge(args, cfg: RunConfig) -> int:
    catalog = load_catalog(cfg.catalog)
    if args.panoptic:
        panoptic = load_labelmap(args.panoptic)
    else:
        if not args.dets:
            raise ConfigFileError("`merge --sem` also needs --dets")
        panoptic = panoptic_fuse_two(load_tensor(args.sem), read_detections(args.dets), catalog,
                                     cfg.fusion_config(), cfg.threads)
    if args.parts:
        logits = load_tensor(args.parts)
        if logits.ndim != 3 or logits.shape[0] != catalog.n_part_channels:
            raise CatalogMismatchError(
                f"part logits have shape {logits.shape}; catalog expects {catalog.n_part_channels} channels")
        part_map = part_map_from_logits(logits)
    else:
        part_map = load_tensor(args.part_map)
        if part_map.ndim == 3 and part_map.shape[0] == 1:
            part_map = part_map[0]
    save_labelmap(cfg.out, top_down_merge(panoptic, part_map, catalog))
    return 0


def _cmd_eval(args, cfg: RunConfig) -> int:
    catalog = load_catalog(cfg.catalog)
    pred, gt = load_labelmap(args.pred), load_labelmap(args.gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    ev = PanopticPartEvaluator(catalog)
    ev.update(pred, gt,
              sem_logits=load_tensor(args.sem) if args.sem else None,
              part_logits=load_tensor(args.parts) if args.parts else None,
              dets=read_detections(args.dets) if args.dets else None)
    report = ev.report()
    sys.stdout.write(report.to_text(catalog))
    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_kv())
    return 0


def _cmd_synth(args, cfg: RunConfig) -> int:
    scfg = SceneConfig(width=args.width, height=args.height, n_instances=tuple(args.instances),
                       catalog=cfg.catalog, logit_noise_sigma=args.noise, bbox_jitter=args.jitter,
                       seed=cfg.seed)
    scene = generate_scene(scfg)
    os.makedirs(cfg.out, exist_ok=True)
    paths = _scene_paths(cfg.out)
    save_labelmap(paths["gt"], scene.gt)
    save_tensor(paths["sem"], scene.sem)
    save_tensor(paths["parts"], scene.parts)
    write_detections(paths["dets"], scene.dets)
    with open(paths["config"], "w", encoding="utf-8") as fh:
        fh.write(scfg.to_text())
    return 0


def _cmd_viz(args, cfg: RunConfig) -> int:
    save_png(cfg.out, load_labelmap(args.input), outlines=not args.no_outlines)
    return 0


def _cmd_bench(args, cfg: RunConfig) -> int:
    catalog = load_catalog(cfg.catalog)
    if args.scene:
        paths = _scene_paths(args.scene)
        sem, parts, dets = load_tensor(paths["sem"]), load_tensor(paths["parts"]), read_detections(paths["dets"])
    else:
        scene = generate_scene(SceneConfig(width=args.width, height=args.height,
                                           n_instances=(args.instances, args.instances),
                                           catalog=cfg.catalog, logit_noise_sigma=args.noise,
                                           size_range=(0.05, 0.2), seed=cfg.seed))
        sem, parts, dets = scene.sem, scene.parts, scene.dets
    report, _, _ = run_bench(sem, parts, dets, catalog, cfg.fusion_config(), cfg.reps, cfg.threads)
    sys.stdout.write(report.to_text())
    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_kv())
    return 0


COMMANDS = {"fuse": _cmd_fuse, "merge": _cmd_merge, "eval": _cmd_eval,
            "synth": _cmd_synth, "viz": _cmd_viz, "bench": _cmd_bench}


def _error_kind(exc: BaseException) -> str:
    if isinstance(exc, FileNotFoundError):
        return "missing file"
    if isinstance(exc, (TensorFormatError, DetectionFormatError, CatalogError)):
        return "format"
    if isinstance(exc, (CatalogMismatchError, UnknownClassError)):
        return "catalog mismatch"
    if isinstance(exc, (ShapeError, BoundsError)):
        return "shape"
    if isinstance(exc, SceneGenerationError):
        return "generation"
    if isinstance(exc, OSError):
        return "io"
    return "config"


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        kind = _error_kind(exc)
        detail = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        if isinstance(exc, FileNotFoundError):
            detail = f"{exc.filename}: no such file"
        print(f"jppf: error: {kind}: {detail}", file=sys.stderr)
        return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())
