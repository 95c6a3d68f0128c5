import os
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from dotenv import load_dotenv

import storage
from errors import DimensionMismatchError, InsufficientBurstsError, InvalidFrameError
from models import AugmentOp, Burst, CropRect, PlanarRaw
from schemas import BurstCrops, CropManifest, CropRecord
from services.noise_service import AUGMENT_STREAM, SPLIT_STREAM, burst_key, rng_for

load_dotenv()

logger = logging.getLogger(__name__)

# Train/test burst counts per lens of the reference capture campaign
DEFAULT_LENS_SPLITS: Dict[str, Tuple[int, int]] = {
    "leica": (47, 5),
    "olympus": (37, 5),
}

# Plane order after a dihedral op: transposing ops exchange the two greens
AUGMENT_PLANE_ORDER: Dict[AugmentOp, Tuple[int, int, int, int]] = {
    op: (0, 2, 1, 3) if op.transposes else (0, 1, 2, 3) for op in AugmentOp.all_ops()
}

UNASSIGNED = "unassigned"


def grid_crops(width: int, height: int, size: int = 128) -> List[CropRect]:
    """Non-overlapping row-major grid anchored at (0, 0); remainders dropped"""
    if size <= 0 or size % 2:
        raise InvalidFrameError(f"Crop size must be positive and even, got {size}")
    if size > width or size > height:
        logger.warning(f"Crop size {size} exceeds image {width}x{height}; no crops")
        return []
    return [
        CropRect(x=col * size, y=row * size, size=size)
        for row in range(height // size)
        for col in range(width // size)
    ]


def transform_pattern(pattern: str, op: AugmentOp) -> str:
    grid = np.array(list(pattern)).reshape(2, 2)
    return "".join(op.apply(grid).ravel())


def augment(crop: Union[np.ndarray, PlanarRaw], op: AugmentOp) -> Union[np.ndarray, PlanarRaw]:
    """Dihedral transform; packed raw crops also get their planes and pattern remapped"""
    if isinstance(crop, PlanarRaw):
        if op.transposes and crop.height != crop.width:
            raise InvalidFrameError(f"Rotation by {op.rotation} needs a square crop")
        planes = op.apply(crop.planes, axes=(1, 2))[list(AUGMENT_PLANE_ORDER[op])]
        return PlanarRaw(planes=planes, pattern=transform_pattern(crop.pattern, op))
    crop = np.asarray(crop)
    if op.transposes and crop.shape[0] != crop.shape[1]:
        raise InvalidFrameError(f"Rotation by {op.rotation} needs a square crop")
    return op.apply(crop, axes=(0, 1))


def split_manifest(
    bursts: Sequence[Tuple[str, Optional[str]]],
    counts: Dict[str, Sequence[int]],
    seed: int = 0,
) -> Dict[str, str]:
    """Assign whole bursts to train/test per lens with a seeded shuffle.

    ``bursts`` holds (burst_id, lens) pairs and ``counts`` maps a lens to
    (train, test). Bursts past the requested counts, or of a lens without
    counts, are left unassigned.
    """
    by_lens: Dict[Optional[str], List[str]] = {}
    for burst_id, lens in bursts:
        by_lens.setdefault(lens, []).append(burst_id)

    assignment = {burst_id: UNASSIGNED for burst_id, _ in bursts}
    for lens_index, lens in enumerate(sorted(counts)):
        train, test = counts[lens]
        ids = sorted(by_lens.get(lens, []))
        if train + test > len(ids):
            raise InsufficientBurstsError(
                f"insufficient bursts for {lens}: {train} train + {test} test > {len(ids)} available",
                stage="split",
                item=lens,
            )
        order = rng_for(seed, SPLIT_STREAM, lens_index).permutation(len(ids))
        shuffled = [ids[i] for i in order]
        for burst_id in shuffled[:test]:
            assignment[burst_id] = "test"
        for burst_id in shuffled[test:test + train]:
            assignment[burst_id] = "train"
        extra = len(ids) - train - test
        if extra:
            logger.info(f"{extra} {lens} bursts left unassigned")

    for lens in by_lens:
        if lens not in counts:
            logger.warning(f"No split counts for lens {lens!r}; {len(by_lens[lens])} bursts unassigned")
    return assignment


class DatasetService:
    """Crop extraction, manifests and augmentation"""

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or int(os.getenv("FSTACK_THREADS", "4"))
        self.crop_size = int(os.getenv("FSTACK_CROP_SIZE", "128"))
        self.executor = ThreadPoolExecutor(max_workers=self.max_workers)

    def build_crop_dataset(
        self,
        burst: Burst,
        ground_truth: np.ndarray,
        rects: Sequence[CropRect],
        out_dir: Union[str, Path],
        raw_burst: Optional[Burst] = None,
        manifest_root: Optional[Union[str, Path]] = None,
        split: str = "train",
        gt_source: str = "file",
        augment_seed: Optional[int] = None,
    ) -> CropManifest:
        """Write every rect of every frame plus the ground truth as 16-bit PNGs.

        Images are quantized to 16 bits before cropping so each file holds the
        exact counts of its source region. Paths in the manifest are relative
        to ``manifest_root`` (default ``out_dir``). ``augment_seed`` adds one
        seeded non-identity dihedral copy per crop.
        """
        out_dir = Path(out_dir)
        root = Path(manifest_root) if manifest_root is not None else out_dir
        if burst.is_planar:
            raise InvalidFrameError("Crop bursts must be RGB; pass packed raw frames as raw_burst")
        height, width = burst.shape[:2]
        ground_truth = np.asarray(ground_truth)
        if ground_truth.shape[:2] != (height, width):
            raise DimensionMismatchError(
                f"Ground truth {ground_truth.shape[:2]} does not match burst {(height, width)}",
                item=burst.burst_id,
            )
        if raw_burst is not None:
            if not raw_burst.is_planar or raw_burst.shape[1:] != (height // 2, width // 2):
                raise DimensionMismatchError("Raw burst must be packed planes at half resolution")
            if len(raw_burst) != len(burst):
                raise DimensionMismatchError("Raw and RGB bursts differ in length")
        for rect in rects:
            if not rect.fits(width, height):
                raise InvalidFrameError(f"Rect {rect} outside {width}x{height}", item=burst.burst_id)

        frames = [storage.to_uint16(frame) for frame in burst.frames]
        gt = storage.to_uint16(ground_truth)
        raw = [storage.to_uint16(frame.planes) for frame in raw_burst.frames] if raw_burst is not None else None
        key = burst_key(burst.burst_id)

        def write_crop(job: Tuple[int, CropRect]) -> CropRecord:
            index, rect = job
            crop_dir = out_dir / f"crop_{index:05d}"
            rows, cols = rect.slices()
            frame_paths = []
            for position, frame in enumerate(frames):
                path = crop_dir / f"frame_{position:03d}.png"
                storage.write_counts(path, frame[rows, cols])
                frame_paths.append(path)
            gt_path = crop_dir / "gt.png"
            storage.write_counts(gt_path, gt[rows, cols])
            written = frame_paths + [gt_path]
            raw_paths = None
            if raw is not None:
                px, py, ps = rect.to_planar()
                raw_paths = []
                for position, planes in enumerate(raw):
                    path = crop_dir / f"raw_{position:03d}.png"
                    storage.write_counts(path, np.moveaxis(planes[:, py:py + ps, px:px + ps], 0, -1))
                    raw_paths.append(path)
                written += raw_paths

            augment_record = None
            if augment_seed is not None:
                augment_record = self._write_augmented(
                    crop_dir, frame_paths, gt_path, raw_paths, raw_burst,
                    rng_for(augment_seed, AUGMENT_STREAM, key, index), root,
                )
            return CropRecord(
                x=rect.x,
                y=rect.y,
                size=rect.size,
                frames=[storage.relative_to(p, root) for p in frame_paths],
                gt=storage.relative_to(gt_path, root),
                sha256=[storage.sha256_file(p) for p in written],
                raw=[storage.relative_to(p, root) for p in raw_paths] if raw_paths else None,
                augment=augment_record,
            )

        records = list(self.executor.map(write_crop, enumerate(rects)))
        logger.info(f"Wrote {len(records)} crops of {burst.burst_id} ({len(frames)} frames each)")
        entry = BurstCrops(
            id=burst.burst_id, lens=burst.lens, split=split, gt_source=gt_source, crops=records
        )
        crop_size = rects[0].size if rects else self.crop_size
        return CropManifest(seed=augment_seed or 0, crop_size=crop_size, bursts=[entry])

    def _write_augmented(
        self,
        crop_dir: Path,
        frame_paths: List[Path],
        gt_path: Path,
        raw_paths: Optional[List[Path]],
        raw_burst: Optional[Burst],
        rng: np.random.Generator,
        root: Path,
    ) -> dict:
        ops = [op for op in AugmentOp.all_ops() if op != AugmentOp()]
        op = ops[int(rng.integers(len(ops)))]
        written = []
        for path in frame_paths + [gt_path]:
            target = path.with_name(f"{path.stem}_aug.png")
            storage.write_counts(target, op.apply(storage.read_counts(path)))
            written.append(target)
        raw_written = []
        for position, path in enumerate(raw_paths or []):
            counts = np.moveaxis(storage.read_counts(path), -1, 0)
            planar = PlanarRaw(planes=counts, pattern=raw_burst.frames[position].pattern)
            turned = augment(planar, op)
            target = path.with_name(f"{path.stem}_aug.png")
            storage.write_counts(target, np.moveaxis(turned.planes, 0, -1))
            raw_written.append(target)
        record = op.to_dict()
        record["frames"] = [storage.relative_to(p, root) for p in written[:-1]]
        record["gt"] = storage.relative_to(written[-1], root)
        if raw_written:
            record["raw"] = [storage.relative_to(p, root) for p in raw_written]
            record["pattern"] = transform_pattern(raw_burst.frames[0].pattern, op)
        record["sha256"] = [storage.sha256_file(p) for p in written + raw_written]
        return record

    @staticmethod
    def merge_manifests(manifests: Sequence[CropManifest], seed: int, crop_size: int) -> CropManifest:
        bursts = sorted((entry for m in manifests for entry in m.bursts), key=lambda entry: entry.id)
        return CropManifest(seed=seed, crop_size=crop_size, bursts=bursts)

    @staticmethod
    def verify_manifest(manifest: CropManifest, root: Union[str, Path]) -> List[str]:
        """Re-hash every referenced file; returns the paths that do not match"""
        root = Path(root)
        mismatches = []
        for entry in manifest.bursts:
            for crop in entry.crops:
                paths = crop.frames + [crop.gt] + (crop.raw or [])
                checks = list(zip(paths, crop.sha256))
                if crop.augment:
                    aug_paths = crop.augment["frames"] + [crop.augment["gt"]] + crop.augment.get("raw", [])
                    checks += list(zip(aug_paths, crop.augment["sha256"]))
                for path, digest in checks:
                    full = root / path
                    if not full.is_file() or storage.sha256_file(full) != digest:
                        mismatches.append(path)
        if mismatches:
            logger.warning(f"{len(mismatches)} crop files failed verification")
        return mismatches
