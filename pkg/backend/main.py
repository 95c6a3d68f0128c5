import argparse
import logging
import os
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError

import storage
from errors import ConfigError, DataError, FstackError
from models import Burst
from schemas import EccConfig, FusionConfig, NoiseConfig, PipelineConfig, SplitRecord, WarpFile
from services.dataset_service import DEFAULT_LENS_SPLITS, grid_crops, split_manifest
from services.fixture_service import FixtureService
from services.noise_service import burst_key
from services.pipeline_service import PipelineService, discover_bursts, rgb_frame_paths, stage_scope

# Load environment variables
load_dotenv()

logger = logging.getLogger("fstack")

SKIPPABLE_STAGES = ("register", "noise", "fuse", "crops", "eval")


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = os.getenv("FSTACK_LOG_LEVEL", "INFO").upper()
    if verbose:
        level = "DEBUG"
    elif quiet:
        level = "WARNING"
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def env_threads() -> Optional[int]:
    value = os.getenv("FSTACK_THREADS")
    if value is None:
        return None
    try:
        return int(value)
    except ValueError as e:
        raise ConfigError(f"FSTACK_THREADS must be an integer, got {value!r}") from e


def parse_frames(value: Optional[str]) -> Optional[List[int]]:
    if not value:
        return None
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"--frames expects comma-separated integers, got {value!r}") from e


def ecc_from_args(args: argparse.Namespace, base: Optional[Dict[str, Any]] = None) -> EccConfig:
    values = dict(base or {})
    for name in ("pyramid_levels", "max_iterations", "epsilon", "pre_blur_sigma", "min_rho"):
        if getattr(args, name, None) is not None:
            values[name] = getattr(args, name)
    return EccConfig(**values)


def fusion_from_args(args: argparse.Namespace, base: Optional[Dict[str, Any]] = None) -> FusionConfig:
    values = dict(base or {})
    for name in ("method", "pyramid_levels", "variance_radius", "decision_smooth_radius", "wavelet_levels"):
        flag = "fusion_levels" if name == "pyramid_levels" else name
        if getattr(args, flag, None) is not None:
            values[name] = getattr(args, flag)
    frames = parse_frames(getattr(args, "frames", None))
    if frames is not None:
        values["frames"] = frames
    return FusionConfig(**values)


def noise_from_args(args: argparse.Namespace, base: Optional[Dict[str, Any]] = None) -> NoiseConfig:
    values = dict(base or {})
    if getattr(args, "sample", False):
        values["mode"] = "sampled"
    elif getattr(args, "lambda_shot", None) is not None or getattr(args, "lambda_read", None) is not None:
        values.update(mode="fixed", lambda_shot=args.lambda_shot, lambda_read=args.lambda_read)
    if getattr(args, "noise", None):
        values["mode"] = args.noise
    if getattr(args, "noise_seed", None) is not None:
        values["seed"] = args.noise_seed
    return NoiseConfig(**values)


def parse_counts(entries: Optional[List[str]]) -> Dict[str, List[int]]:
    """lens=train:test entries"""
    counts = {}
    for entry in entries or []:
        try:
            lens, numbers = entry.split("=", 1)
            train, test = numbers.split(":")
            counts[lens] = [int(train), int(test)]
        except ValueError as e:
            raise ConfigError(f"Split counts must look like lens=train:test, got {entry!r}") from e
    return counts


def load_pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    """TOML file, then flags; FSTACK_THREADS applies when --threads is absent"""
    data: Dict[str, Any] = {}
    if args.config:
        try:
            with open(args.config, "rb") as f:
                data = tomllib.load(f)
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"Cannot read config {args.config}: {e}") from e

    if args.input:
        data["input_dir"] = args.input
    if args.out:
        data["output_dir"] = args.out
    for name in ("seed", "crop_size"):
        if getattr(args, name) is not None:
            data[name] = getattr(args, name)
    if args.raw_crops:
        data["raw_crops"] = True
    if args.augment:
        data["augment"] = True
    if args.counts:
        data["split"] = parse_counts(args.counts)
    if args.skip:
        stages = dict(data.get("stages", {}))
        stages.update({stage: False for stage in args.skip})
        data["stages"] = stages

    threads = args.threads if args.threads is not None else env_threads()
    if threads is not None:
        data["threads"] = threads

    try:
        data["ecc"] = ecc_from_args(args, data.get("ecc"))
        data["fusion"] = fusion_from_args(args, data.get("fusion"))
        data["noise"] = noise_from_args(args, data.get("noise"))
        if "input_dir" not in data or "output_dir" not in data:
            raise ConfigError("pipeline needs an input and an output directory")
        return PipelineConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"Invalid pipeline configuration: {e}") from e


def service_for(args: argparse.Namespace, input_dir: Path, output_dir: Path) -> PipelineService:
    threads = args.threads if args.threads is not None else env_threads()
    config = PipelineConfig(input_dir=input_dir, output_dir=output_dir, threads=threads or 4)
    return PipelineService(config)


# Commands
def cmd_ingest(args: argparse.Namespace) -> int:
    out = Path(args.out)
    service = service_for(args, Path(args.burst_dir), out)
    with stage_scope("ingest", Path(args.burst_dir).name):
        loaded = service.load_burst(args.burst_dir)
        for index, frame in zip(loaded.frame_indices, loaded.rgb):
            storage.write_rgb(out / f"frame_{index:03d}.{args.format}", frame)
        storage.write_json(out / "burst.json", loaded.manifest)
    logger.info(f"Ingested {len(loaded.rgb)} frames into {out}")
    return 0


def cmd_register(args: argparse.Namespace) -> int:
    out = Path(args.out)
    service = service_for(args, Path(args.burst_dir), out.parent)
    loaded = service.load_burst(args.burst_dir)
    cfg = ecc_from_args(args)
    with stage_scope("register", loaded.burst_id):
        luma = [service.raw_service.luma(frame) for frame in loaded.rgb]
        result = service.registration_service.register_burst(luma, cfg, strict=args.strict)
        storage.write_json(out, service.registration_service.to_warp_file(result, cfg))
    return 0


def cmd_stack(args: argparse.Namespace) -> int:
    out = Path(args.out)
    service = service_for(args, Path(args.burst_dir), out.parent)
    loaded = service.load_burst(args.burst_dir)
    ecc = ecc_from_args(args)
    fusion_cfg = fusion_from_args(args)
    registration = service.registration_service

    with stage_scope("register", loaded.burst_id):
        if args.warps:
            result = registration.from_warp_file(storage.read_json(args.warps, WarpFile))
        else:
            luma = [service.raw_service.luma(frame) for frame in loaded.rgb]
            result = registration.register_burst(luma, ecc)
            storage.write_json(out.parent / "warps.json", registration.to_warp_file(result, ecc))
        aligned = registration.apply_to_frames(loaded.rgb, result)

    with stage_scope("fuse", loaded.burst_id):
        fusion = service.fusion_service.fuse(loaded.as_burst(aligned), fusion_cfg)
        storage.write_rgb(out, fusion.image)
        if args.decision_map and fusion.decision_map is not None:
            storage.write_counts(args.decision_map, fusion.decision_map.indices)
        if args.raw_out:
            if loaded.planar is None:
                raise DataError("--raw-out needs a raw burst", item=loaded.burst_id)
            planar = registration.apply_to_planar(loaded.planar, result)
            raw_fused = service.fusion_service.fuse(
                Burst(frames=planar, burst_id=loaded.burst_id), fusion_cfg, proxies=aligned
            )
            storage.write_counts(args.raw_out, np.moveaxis(storage.to_uint16(raw_fused.image.planes), 0, -1))
    logger.info(f"Stacked {len(aligned)} frames with {fusion_cfg.method} into {out}")
    return 0


def cmd_noise(args: argparse.Namespace) -> int:
    cfg = noise_from_args(args)
    if cfg.mode == "off":
        raise ConfigError("noise needs --lambda-shot/--lambda-read or --sample")
    source, out = Path(args.input), Path(args.out)
    service = service_for(args, source if source.is_dir() else source.parent, out)
    noise = service.noise_service
    seed = cfg.seed if cfg.seed is not None else args.seed

    with stage_scope("noise", source.name):
        if source.is_dir():
            key = burst_key(source.name)
            params = noise.resolve_params(cfg, seed, key)
            pairs = service.raw_service.ingest_paths(source)
            frames = [frame for _, frame in pairs]
            indices = [frame.frame_index for frame in frames]
            planar = [service.raw_service.pack_planes(frame) for frame in frames]
            noisy = noise.add_burst_noise(planar, params, seed, indices, key)
            for (path, frame), planes in zip(pairs, noisy):
                service.raw_service.write_frame(out / path.name, service.raw_service.to_frame(planes, frame))
            record_dir = out
        else:
            key = burst_key(source.stem)
            params = noise.resolve_params(cfg, seed, key)
            image = storage.read_rgb(source)
            storage.write_rgb(out, noise.add_burst_noise([image], params, seed, [0], key)[0])
            indices, record_dir = [0], out.parent
        storage.write_json(record_dir / "noise.json", noise.record(source.name, cfg, seed, params, indices))
    return 0


def cmd_crops(args: argparse.Namespace) -> int:
    out = Path(args.out)
    service = service_for(args, Path(args.burst_dir), out)
    loaded = service.load_burst(args.burst_dir)
    registration = service.registration_service

    with stage_scope("register", loaded.burst_id):
        if args.warps:
            result = registration.from_warp_file(storage.read_json(args.warps, WarpFile))
        else:
            ecc = ecc_from_args(args)
            result = registration.register_burst([service.raw_service.luma(f) for f in loaded.rgb], ecc)
            storage.write_json(out / loaded.burst_id / "warps.json", registration.to_warp_file(result, ecc))
        aligned = registration.apply_to_frames(loaded.rgb, result)
        raw_burst = None
        if args.raw:
            if loaded.planar is None:
                raise DataError("--raw needs a raw burst", item=loaded.burst_id)
            raw_burst = Burst(frames=registration.apply_to_planar(loaded.planar, result), burst_id=loaded.burst_id)

    with stage_scope("crops", loaded.burst_id):
        gt = storage.read_rgb(args.gt)
        height, width = aligned[0].shape[:2]
        manifest = service.dataset_service.build_crop_dataset(
            loaded.as_burst(aligned),
            gt,
            grid_crops(width, height, args.size),
            out / loaded.burst_id,
            raw_burst=raw_burst,
            manifest_root=out,
            split=args.split,
            augment_seed=args.seed if args.augment else None,
        )
        manifest = manifest.model_copy(update={"seed": args.seed, "crop_size": args.size})
        storage.write_json(out / "manifest.json", manifest)
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    counts = parse_counts(args.counts) if args.counts else {k: list(v) for k, v in DEFAULT_LENS_SPLITS.items()}
    bursts = []
    service = service_for(args, Path(args.root), Path(args.out).parent)
    for burst_dir in discover_bursts(args.root):
        payloads = service.raw_service.find_frames(burst_dir)
        lens = storage.read_sidecar(payloads[0].with_suffix(".json")).lens if payloads else None
        bursts.append((burst_dir.name, lens))
    assignment = split_manifest(bursts, counts, args.seed)
    storage.write_json(args.out, SplitRecord(seed=args.seed, counts=counts, assignment=assignment))
    totals = {name: sum(1 for v in assignment.values() if v == name) for name in ("train", "test")}
    logger.info(f"Split {len(bursts)} bursts: {totals['train']} train, {totals['test']} test")
    return 0


def _image_items(path: Path) -> List:
    if path.is_dir():
        return [(p.stem, storage.read_rgb(p)) for p in rgb_frame_paths(path)]
    return [(path.stem, storage.read_rgb(path))]


def cmd_eval(args: argparse.Namespace) -> int:
    pred, gt = Path(args.pred), Path(args.gt)
    service = service_for(args, pred if pred.is_dir() else pred.parent, pred.parent)
    outputs = _image_items(pred)
    references = _image_items(gt) if gt.is_dir() else [(outputs[0][0], storage.read_rgb(gt))]
    if args.id and len(outputs) == 1:
        outputs = [(args.id, outputs[0][1])]
        references = [(args.id, references[0][1])]
    with stage_scope("eval"):
        report = service.metrics_service.evaluate(outputs, references, ignore_border=args.ignore_border)
        out = Path(args.out) if args.out else (pred if pred.is_dir() else pred.parent) / "report.json"
        storage.write_json(out, report)
        if args.csv:
            service.metrics_service.to_csv(report, args.csv)
    return 0


def cmd_pipeline(args: argparse.Namespace) -> int:
    config = load_pipeline_config(args)
    PipelineService(config).run()
    return 0


def cmd_fixture(args: argparse.Namespace) -> int:
    FixtureService().generate(
        args.out,
        size=args.size,
        n_frames=args.frames,
        seed=args.seed,
        jitter=args.jitter,
        pattern=args.pattern,
        lens=args.lens,
    )
    return 0


def _add_ecc_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("registration")
    group.add_argument("--pyramid-levels", type=int, help="ECC pyramid depth (default 4)")
    group.add_argument("--max-iterations", type=int, help="ECC iterations per level (default 200)")
    group.add_argument("--epsilon", type=float, help="ECC update-norm threshold (default 1e-6)")
    group.add_argument("--pre-blur-sigma", type=float, help="Gaussian pre-blur in pixels (default 1.0)")
    group.add_argument("--min-rho", type=float, help="Correlation below which a burst is flagged")


def _add_fusion_flags(parser: argparse.ArgumentParser, default_method: Optional[str] = None) -> None:
    group = parser.add_argument_group("fusion")
    group.add_argument(
        "--method",
        choices=["pixel_contrast", "pixel_variance", "laplacian", "wavelet"],
        default=default_method,
    )
    group.add_argument("--fusion-levels", type=int, help="Laplacian pyramid depth (default 5)")
    group.add_argument("--wavelet-levels", type=int, help="Wavelet decomposition levels (default 4)")
    group.add_argument("--variance-radius", type=int)
    group.add_argument("--decision-smooth-radius", type=int)
    group.add_argument("--frames", help="Comma-separated frame positions to stack")


def _add_noise_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("noise")
    group.add_argument("--lambda-shot", type=float)
    group.add_argument("--lambda-read", type=float)
    group.add_argument("--sample", action="store_true", help="Sample shot/read parameters")
    group.add_argument("--noise-seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("-q", "--quiet", action="store_true")
    common.add_argument("--threads", type=int, help="Worker threads (overrides FSTACK_THREADS)")

    parser = argparse.ArgumentParser(prog="fstack", description="Focus-stacking burst toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="Read a burst and write demosaiced frames")
    p.add_argument("--burst-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["png", "pfm"], default="png")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("register", parents=[common], help="Align a burst and write warps.json")
    p.add_argument("--burst-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true", help="Fail on ECC divergence")
    _add_ecc_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("stack", parents=[common], help="Register and fuse a burst into one image")
    p.add_argument("--burst-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--warps", help="Reuse an existing warps.json")
    p.add_argument("--decision-map", help="Write the per-pixel frame selection")
    p.add_argument("--raw-out", help="Also stack packed raw planes into a 4-channel PNG")
    _add_ecc_flags(p)
    _add_fusion_flags(p, default_method="wavelet")
    p.set_defaults(func=cmd_stack)

    p = sub.add_parser("noise", parents=[common], help="Add synthetic shot/read noise")
    p.add_argument("--input", required=True, help="Raw burst directory or RGB image")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_noise_flags(p)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("crops", parents=[common], help="Cut a registered burst into a crop dataset")
    p.add_argument("--burst-dir", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=int(os.getenv("FSTACK_CROP_SIZE", "128")))
    p.add_argument("--raw", action="store_true", help="Also write packed raw crops")
    p.add_argument("--augment", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--warps")
    _add_ecc_flags(p)
    p.set_defaults(func=cmd_crops)

    p = sub.add_parser("split", parents=[common], help="Assign bursts to train/test per lens")
    p.add_argument("--root", required=True)
    p.add_argument("--counts", action="append", help="lens=train:test, repeatable")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out")
    p.add_argument("--id")
    p.add_argument("--csv")
    p.add_argument("--ignore-border", type=int, default=4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", parents=[common], help="Run every stage over one burst or a root of bursts")
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--input")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--crop-size", type=int)
    p.add_argument("--raw-crops", action="store_true")
    p.add_argument("--augment", action="store_true")
    p.add_argument("--counts", action="append", help="lens=train:test, repeatable")
    p.add_argument("--skip", action="append", choices=SKIPPABLE_STAGES, help="Disable an optional stage")
    p.add_argument("--noise", choices=["off", "fixed", "sampled"])
    _add_ecc_flags(p)
    _add_fusion_flags(p)
    _add_noise_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("fixture", parents=[common], help="Write the synthetic miniature burst")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jitter", type=float, default=0.0, help="Max random shift per frame in pixels")
    p.add_argument("--pattern", default="RGGB")
    p.add_argument("--lens", default="leica")
    p.set_defaults(func=cmd_fixture)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        return args.func(args)
    except FstackError as e:
        logger.error(f"{type(e).__name__} [{e.stage or args.command}] {e.item or ''}: {e.message}")
        return e.exit_code
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return ConfigError.exit_code
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
