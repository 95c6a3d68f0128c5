import logging
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

import numpy as np

import storage
from errors import DataError, FstackError
from models import Burst, PlanarRaw, RegistrationResult
from schemas import (
    BurstFrameEntry,
    FusionRecord,
    IngestManifest,
    PipelineConfig,
    PipelineManifest,
    StageRecord,
)
from services.dataset_service import UNASSIGNED, DatasetService, grid_crops, split_manifest
from services.fusion_service import FusionService
from services.metrics_service import MetricsService
from services.noise_service import NoiseService, burst_key
from services.raw_service import RawService
from services.registration_service import RegistrationService

logger = logging.getLogger(__name__)

GT_NAMES = ("gt.png", "gt.pfm", "gt.tif", "gt.tiff")


@dataclass
class LoadedBurst:
    """A burst directory after ingest (and demosaic for raw input)"""

    burst_id: str
    kind: str
    rgb: List[np.ndarray]
    frame_indices: List[int]
    lens: Optional[str] = None
    iso: Optional[int] = None
    pattern: Optional[str] = None
    planar: Optional[List[PlanarRaw]] = None
    gt_path: Optional[Path] = None
    manifest: Optional[IngestManifest] = None

    def as_burst(self, frames: Optional[List] = None) -> Burst:
        return Burst(
            frames=frames if frames is not None else self.rgb,
            burst_id=self.burst_id,
            lens=self.lens,
            iso=self.iso,
            frame_indices=list(self.frame_indices),
        )


@dataclass
class BurstOutcome:
    burst_id: str
    lens: Optional[str]
    fused: np.ndarray
    aligned: List[np.ndarray]
    aligned_planar: Optional[List[PlanarRaw]]
    gt: np.ndarray
    gt_source: str


@contextmanager
def stage_scope(stage: str, item: Optional[str] = None) -> Iterator[None]:
    """Tag toolkit errors raised inside the block with the stage and item"""
    try:
        yield
    except FstackError as e:
        e.stage = e.stage or stage
        e.item = e.item or item
        raise
    except OSError as e:
        raise DataError(f"I/O failure: {e}", stage=stage, item=item) from e


def find_ground_truth(burst_dir: Path) -> Optional[Path]:
    for name in GT_NAMES:
        if (burst_dir / name).is_file():
            return burst_dir / name
    return None


def rgb_frame_paths(burst_dir: Path) -> List[Path]:
    """RGB frames of a burst directory, ground truth excluded"""
    paths = []
    for suffix in storage.RGB_SUFFIXES:
        paths.extend(p for p in burst_dir.glob(f"*{suffix}") if not p.stem.startswith("gt"))
    return sorted(paths)


def is_burst_dir(path: Path) -> bool:
    return bool(RawService.find_frames(path)) or bool(rgb_frame_paths(path))


def discover_bursts(input_dir: Union[str, Path]) -> List[Path]:
    """The input itself when it is a burst, else its burst subdirectories by name"""
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise DataError(f"Input directory does not exist: {input_dir}", stage="ingest")
    if is_burst_dir(input_dir):
        return [input_dir]
    bursts = sorted(p for p in input_dir.iterdir() if p.is_dir() and is_burst_dir(p))
    if not bursts:
        raise DataError(f"No bursts found under {input_dir}", stage="ingest")
    return bursts


class PipelineService:
    """Runs ingest → demosaic → register → noise → fuse → crops → eval"""

    def __init__(self, config: PipelineConfig):
        self.config = config
        threads = config.threads
        self.raw_service = RawService(max_workers=threads)
        self.registration_service = RegistrationService(max_workers=threads)
        self.noise_service = NoiseService(max_workers=threads)
        self.fusion_service = FusionService(max_workers=threads)
        self.dataset_service = DatasetService(max_workers=threads)
        self.metrics_service = MetricsService(max_workers=threads)
        self.records: List[StageRecord] = []

    def load_burst(self, burst_dir: Union[str, Path]) -> LoadedBurst:
        """Ingest a burst directory; raw frames are packed and demosaiced"""
        burst_dir = Path(burst_dir)
        burst_id = burst_dir.name
        gt_path = find_ground_truth(burst_dir)
        if self.raw_service.find_frames(burst_dir):
            pairs = self.raw_service.ingest_paths(burst_dir)
            frames = [frame for _, frame in pairs]
            entries = [
                BurstFrameEntry(index=f.frame_index, path=p.name, iso=f.iso, lens=f.lens)
                for p, f in pairs
            ]
            rgb = list(self.raw_service.executor.map(self.raw_service.demosaic, frames))
            planar = [self.raw_service.pack_planes(frame) for frame in frames]
            first = frames[0]
            manifest = IngestManifest(
                id=burst_id, kind="raw", width=first.width, height=first.height,
                pattern=first.pattern, frames=entries,
            )
            return LoadedBurst(
                burst_id=burst_id, kind="raw", rgb=rgb,
                frame_indices=[f.frame_index for f in frames],
                lens=first.lens, iso=first.iso, pattern=first.pattern,
                planar=planar, gt_path=gt_path, manifest=manifest,
            )

        paths = rgb_frame_paths(burst_dir)
        if not paths:
            raise DataError(f"No frames in {burst_dir}", item=burst_id)
        rgb = [storage.read_rgb(p) for p in paths]
        height, width = rgb[0].shape[:2]
        manifest = IngestManifest(
            id=burst_id, kind="rgb", width=width, height=height,
            frames=[BurstFrameEntry(index=i, path=p.name) for i, p in enumerate(paths)],
        )
        logger.info(f"Loaded {len(rgb)} RGB frames from {burst_dir}")
        return LoadedBurst(
            burst_id=burst_id, kind="rgb", rgb=rgb, frame_indices=list(range(len(rgb))),
            gt_path=gt_path, manifest=manifest,
        )

    def _record(self, stage: str, burst_id: Optional[str], outputs: List[Path]) -> None:
        root = self.config.output_dir
        self.records.append(
            StageRecord(stage=stage, burst=burst_id, outputs=[storage.relative_to(p, root) for p in outputs])
        )

    def process_burst(self, burst_dir: Path) -> BurstOutcome:
        cfg = self.config
        burst_id = burst_dir.name
        out_dir = cfg.output_dir / "bursts" / burst_id

        with stage_scope("ingest", burst_id):
            loaded = self.load_burst(burst_dir)
            storage.write_json(out_dir / "burst.json", loaded.manifest)
            self._record("ingest", burst_id, [out_dir / "burst.json"])
            if loaded.kind == "raw":
                self._record("demosaic", burst_id, [])

        result = RegistrationResult.identity(len(loaded.rgb))
        if cfg.stages.registration:
            with stage_scope("register", burst_id):
                luma = [self.raw_service.luma(frame) for frame in loaded.rgb]
                result = self.registration_service.register_burst(luma, cfg.ecc)
                warp_file = self.registration_service.to_warp_file(result, cfg.ecc)
                storage.write_json(out_dir / "warps.json", warp_file)
                self._record("register", burst_id, [out_dir / "warps.json"])

        rgb, planar = loaded.rgb, loaded.planar
        if cfg.stages.noise and cfg.noise.mode != "off":
            with stage_scope("noise", burst_id):
                rgb, planar = self._add_noise(loaded, out_dir)

        with stage_scope("register", burst_id):
            aligned = self.registration_service.apply_to_frames(rgb, result)
            aligned_planar = None
            if planar is not None and cfg.raw_crops:
                aligned_planar = self.registration_service.apply_to_planar(planar, result)

        with stage_scope("fuse", burst_id):
            fused_path = out_dir / "fused.png"
            if cfg.stages.fuse:
                fusion = self.fusion_service.fuse(loaded.as_burst(aligned), cfg.fusion)
                fused = fusion.image
                storage.write_rgb(fused_path, fused)
                outputs = [fused_path]
                decision_path = None
                if fusion.decision_map is not None:
                    decision_path = out_dir / "decision.png"
                    storage.write_counts(decision_path, fusion.decision_map.indices)
                    outputs.append(decision_path)
                record = FusionRecord(
                    burst=burst_id,
                    output=fused_path.name,
                    decision_map=decision_path.name if decision_path else None,
                    fusion=cfg.fusion,
                    frames_used=[loaded.frame_indices[i] for i in fusion.frames_used],
                )
                storage.write_json(out_dir / "fusion.json", record)
                self._record("fuse", burst_id, outputs + [out_dir / "fusion.json"])
            else:
                fused = np.mean(aligned, axis=0)

        with stage_scope("ingest", burst_id):
            if loaded.gt_path is not None:
                gt, gt_source = storage.read_rgb(loaded.gt_path), "file"
                if gt.shape != fused.shape:
                    raise DataError(
                        f"Ground truth {gt.shape} does not match burst frames {fused.shape}"
                    )
            else:
                logger.warning(f"No ground truth for {burst_id}; using the fused output")
                gt, gt_source = fused, "fused"

        return BurstOutcome(
            burst_id=burst_id, lens=loaded.lens, fused=fused, aligned=aligned,
            aligned_planar=aligned_planar, gt=gt, gt_source=gt_source,
        )

    def _add_noise(self, loaded: LoadedBurst, out_dir: Path):
        cfg = self.config
        seed = cfg.noise.seed if cfg.noise.seed is not None else cfg.seed
        key = burst_key(loaded.burst_id)
        params = self.noise_service.resolve_params(cfg.noise, seed, key)
        if loaded.planar is not None:
            planar = self.noise_service.add_burst_noise(
                loaded.planar, params, seed, loaded.frame_indices, key
            )
            rgb = [
                self.raw_service.demosaic_normalized(self.raw_service.unpack_planes(p), p.pattern)
                for p in planar
            ]
        else:
            planar = None
            rgb = self.noise_service.add_burst_noise(loaded.rgb, params, seed, loaded.frame_indices, key)
        record = self.noise_service.record(loaded.burst_id, cfg.noise, seed, params, loaded.frame_indices)
        storage.write_json(out_dir / "noise.json", record)
        self._record("noise", loaded.burst_id, [out_dir / "noise.json"])
        return rgb, planar

    def assign_splits(self, burst_dirs: List[Path]) -> Dict[str, str]:
        if not self.config.split:
            return {path.name: UNASSIGNED for path in burst_dirs}
        lenses = []
        for path in burst_dirs:
            payloads = self.raw_service.find_frames(path)
            lens = storage.read_sidecar(payloads[0].with_suffix(".json")).lens if payloads else None
            lenses.append((path.name, lens))
        with stage_scope("split"):
            return split_manifest(lenses, self.config.split, self.config.seed)

    def run(self) -> PipelineManifest:
        """Execute the enabled stages for every burst; writes error.json on failure"""
        cfg = self.config
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        self.records = []
        try:
            manifest = self._run()
        except FstackError as e:
            storage.write_record(cfg.output_dir / "error.json", e.to_record())
            logger.error(f"Stage {e.stage} failed on {e.item}: {e.message}")
            raise
        return manifest

    def _run(self) -> PipelineManifest:
        cfg = self.config
        burst_dirs = discover_bursts(cfg.input_dir)
        splits = self.assign_splits(burst_dirs)
        outcomes = []
        for burst_dir in burst_dirs:
            outcomes.append(self.process_burst(burst_dir))

        if cfg.stages.crops:
            crops_root = cfg.output_dir / "crops"
            parts = []
            for outcome in outcomes:
                with stage_scope("crops", outcome.burst_id):
                    height, width = outcome.fused.shape[:2]
                    rects = grid_crops(width, height, cfg.crop_size)
                    raw_burst = None
                    if outcome.aligned_planar is not None:
                        raw_burst = Burst(frames=outcome.aligned_planar, burst_id=outcome.burst_id)
                    parts.append(
                        self.dataset_service.build_crop_dataset(
                            Burst(frames=outcome.aligned, burst_id=outcome.burst_id, lens=outcome.lens),
                            outcome.gt,
                            rects,
                            crops_root / outcome.burst_id,
                            raw_burst=raw_burst,
                            manifest_root=crops_root,
                            split=splits[outcome.burst_id],
                            gt_source=outcome.gt_source,
                            augment_seed=cfg.seed if cfg.augment else None,
                        )
                    )
            crop_manifest = self.dataset_service.merge_manifests(parts, cfg.seed, cfg.crop_size)
            storage.write_json(crops_root / "manifest.json", crop_manifest)
            self._record("crops", None, [crops_root / "manifest.json"])

        if cfg.stages.eval:
            scored = [o for o in outcomes if o.gt_source == "file"]
            if scored:
                with stage_scope("eval"):
                    report = self.metrics_service.evaluate(
                        [(o.burst_id, o.fused) for o in scored],
                        [(o.burst_id, o.gt) for o in scored],
                        splits={o.burst_id: splits[o.burst_id] for o in scored},
                    )
                    storage.write_json(cfg.output_dir / "report.json", report)
                    self._record("eval", None, [cfg.output_dir / "report.json"])
            else:
                logger.warning("No burst has a ground-truth file; skipping evaluation")

        manifest = PipelineManifest(config=cfg, stages=self.records)
        storage.write_json(cfg.output_dir / "pipeline.json", manifest)
        logger.info(f"Pipeline finished: {len(outcomes)} bursts, {len(self.records)} stage records")
        return manifest
